import numpy as np

from dmb_sim.models.minibatch import RegretLedger
from dmb_sim.utils.report_builder import (CSV_HEADER, CurveRow, ReportBuilder, first_divergent_row,
                                          format_float, read_summary, render_csv, rows_from_ledger,
                                          summarize_variants, summary_path_for, write_csv, write_summary)


def test_float_format_is_round_trip_repr() -> None:
    assert format_float(0.1) == "0.1"
    assert format_float(1e-20) == "1e-20"
    assert format_float(2) == "2.0"
    assert format_float(None) == ""


def test_rows_are_sorted_canonically() -> None:
    rows = [CurveRow("serial", 1, 1, 0.5, None), CurveRow("dmb", 0, 2, 0.25, 1.0),
            CurveRow("dmb", 0, 1, 0.75, 0.5)]
    text = render_csv(rows)
    assert text.splitlines() == [
        CSV_HEADER,
        "dmb,0,1,0.75,0.5",
        "dmb,0,2,0.25,1.0",
        "serial,1,1,0.5,",
    ]
    assert text.endswith("\n")


def test_first_divergent_row() -> None:
    base = "h\na\nb\n"
    assert first_divergent_row(base, base) is None
    assert first_divergent_row(base, "h\na\nc\n") == 2
    assert first_divergent_row(base, "h\na\n") == 2


def test_rows_from_ledger_use_checkpoints() -> None:
    ledger = RegretLedger(5, 1)
    ledger.record(np.ones(5), np.zeros(5), np.zeros(1))
    rows = rows_from_ledger("serial", 3, ledger)
    assert [row.t for row in rows] == [1, 2, 5]
    assert rows[-1] == CurveRow("serial", 3, 5, 1.0, 5.0)


def test_csv_and_summary_files(tmp_path) -> None:
    csv_path = tmp_path / "out" / "run.csv"
    sha = write_csv([CurveRow("serial", 0, 1, 0.5, 0.1)], csv_path)
    assert len(sha) == 64
    summary_path = summary_path_for(csv_path)
    assert summary_path.name == "run.csv.summary.json"
    write_summary(summary_path, {"seed": 3, "csv_sha256": sha})
    assert read_summary(summary_path) == {"seed": 3, "csv_sha256": sha}


def test_variant_summary_uses_final_checkpoint() -> None:
    rows = [CurveRow("a", 0, 1, 9.0, 1.0), CurveRow("a", 0, 10, 1.0, 2.0),
            CurveRow("a", 1, 10, 3.0, 4.0), CurveRow("b", 0, 10, 1.0, None)]
    summary = summarize_variants(rows)
    assert summary["a"]["avg_loss"] == 2.0
    assert summary["a"]["regret"] == 3.0
    assert summary["a"]["trials"] == 2
    assert summary["b"]["regret"] is None


def test_bounds_report_lines() -> None:
    text = ReportBuilder().build_bounds_report({"m": 10000}, {"psi_serial": 202.0,
                                                              "psi_dmb": {"general": 1.5}})
    assert "psi_serial = 202" in text
    assert "psi_dmb.general = 1.5" in text


def test_run_detail_lists_replays() -> None:
    run = {"run_id": "abc123", "command": "dmb", "seed": 3, "csv_path": "/tmp/dmb.csv",
           "csv_sha256": "ff", "created_at": 0.0}
    replays = [{"passed": True, "first_divergent_row": None, "created_at": 1.0},
               {"passed": False, "first_divergent_row": 7, "created_at": 2.0}]
    text = ReportBuilder().build_run_detail(run, replays)
    assert "abc123" in text and "SHA-256: ff" in text
    assert "PASS" in text
    assert "FAIL 第 7 行" in text
    assert "暂无重放记录" in ReportBuilder().build_run_detail(run, [])
