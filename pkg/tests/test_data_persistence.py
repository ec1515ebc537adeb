import asyncio

from dmb_sim.utils.data_persistence import RunDatabase


def test_runs_are_saved_and_listed(tmp_path) -> None:
    async def scenario():
        database = RunDatabase(tmp_path / "runs.db")
        try:
            first = RunDatabase.new_run_id()
            second = RunDatabase.new_run_id()
            await database.save_run(first, "serial", 1, {"m": 10}, tmp_path / "a.csv", "abc",
                                    {"variants": {"serial": {"avg_loss": 0.5}}})
            await database.save_run(second, "bounds", 2, {"m": 20}, None, None, {"bounds": {}})
            return (await database.get_run(first), await database.list_runs(),
                    await database.list_runs(command="bounds"), await database.get_run("missing"))
        finally:
            await database.close()

    run, runs, bounds_runs, missing = asyncio.run(scenario())
    assert run["command"] == "serial"
    assert run["config"] == {"m": 10}
    assert run["summary"]["variants"]["serial"]["avg_loss"] == 0.5
    assert run["csv_path"].endswith("a.csv")
    assert len(runs) == 2
    assert [r["command"] for r in bounds_runs] == ["bounds"]
    assert bounds_runs[0]["csv_path"] is None
    assert missing is None


def test_replays_are_recorded(tmp_path) -> None:
    async def scenario():
        database = RunDatabase(tmp_path / "nested" / "runs.db")
        try:
            await database.record_replay("r1", tmp_path / "a.csv.summary.json", True, None, "abc")
            await database.record_replay("r1", tmp_path / "a.csv.summary.json", False, 3, "def")
            return await database.list_replays("r1")
        finally:
            await database.close()

    replays = asyncio.run(scenario())
    assert [r["passed"] for r in replays] == [True, False]
    assert replays[1]["first_divergent_row"] == 3


def test_database_reopens_existing_file(tmp_path) -> None:
    async def write():
        database = RunDatabase(tmp_path / "runs.db")
        try:
            await database.save_run("keep", "dmb", 0, {}, None, None, {})
        finally:
            await database.close()

    async def read():
        database = RunDatabase(tmp_path / "runs.db")
        try:
            return await database.list_runs()
        finally:
            await database.close()

    asyncio.run(write())
    assert [r["run_id"] for r in asyncio.run(read())] == ["keep"]
