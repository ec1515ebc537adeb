import datetime
import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional

import numpy as np
from loguru import logger

from ..models.analysis import SpeedupRow
from ..models.minibatch import RegretLedger

CSV_HEADER = "variant,trial,t,avg_loss,regret"


def format_float(value: Optional[float]) -> str:
    """最短往返十进制表示；None 输出空字段"""
    if value is None:
        return ""
    return repr(float(value))


@dataclass(frozen=True)
class CurveRow:
    """
    平均损失曲线上的一行

    属性：
    - variant: 变体标签
    - trial: 试验编号
    - t: 已处理的输入数
    - avg_loss: (1/t)Σf(w_i,z_i)
    - regret: 累计后悔值，w* 未知时为 None
    """
    variant: str
    trial: int
    t: int
    avg_loss: float
    regret: Optional[float] = None

    def to_line(self) -> str:
        return f"{self.variant},{self.trial},{self.t},{format_float(self.avg_loss)},{format_float(self.regret)}"

    @property
    def sort_key(self):
        return self.variant, self.trial, self.t


def rows_from_ledger(variant: str, trial: int, ledger: RegretLedger) -> List[CurveRow]:
    return [CurveRow(variant, trial, point.t, point.avg_loss, point.regret) for point in ledger.checkpoints]


def render_csv(rows: Iterable[CurveRow]) -> str:
    """按 (variant, trial, t) 的规范顺序输出，与试验完成顺序无关"""
    lines = [CSV_HEADER] + [row.to_line() for row in sorted(rows, key=lambda row: row.sort_key)]
    return "\n".join(lines) + "\n"


def digest(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def write_csv(rows: Iterable[CurveRow], path: Path) -> str:
    """
    写出曲线 CSV

    Returns:
        str: 文件内容的 SHA-256
    """
    text = render_csv(rows)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8", newline="\n")
    logger.debug(f"CSV 已写出: {path}")
    return digest(text)


def first_divergent_row(expected: str, actual: str) -> Optional[int]:
    """
    第一处不同的数据行号（表头为第 0 行），完全一致时返回 None
    """
    expected_lines = expected.splitlines()
    actual_lines = actual.splitlines()
    for index in range(max(len(expected_lines), len(actual_lines))):
        left = expected_lines[index] if index < len(expected_lines) else None
        right = actual_lines[index] if index < len(actual_lines) else None
        if left != right:
            return index
    return None


def summary_path_for(csv_path: Path) -> Path:
    csv_path = Path(csv_path)
    return csv_path.with_name(csv_path.name + ".summary.json")


def write_summary(path: Path, summary: Dict[str, Any]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def read_summary(path: Path) -> Dict[str, Any]:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def summarize_variants(rows: Iterable[CurveRow]) -> Dict[str, Dict[str, Any]]:
    """
    每个变体在最后检查点上的跨试验均值与标准误

    Returns:
        Dict: variant → {trials, t, avg_loss, avg_loss_stderr, regret}
    """
    finals: Dict[str, Dict[int, CurveRow]] = {}
    for row in rows:
        latest = finals.setdefault(row.variant, {})
        if row.trial not in latest or row.t > latest[row.trial].t:
            latest[row.trial] = row

    summary = {}
    for variant, by_trial in sorted(finals.items()):
        last_rows = [by_trial[trial] for trial in sorted(by_trial)]
        losses = np.array([row.avg_loss for row in last_rows])
        stderr = float(np.std(losses, ddof=1) / math.sqrt(len(losses))) if len(losses) > 1 else 0.0
        regrets = [row.regret for row in last_rows if row.regret is not None]
        summary[variant] = {
            "trials": len(last_rows),
            "t": last_rows[0].t,
            "avg_loss": float(losses.mean()),
            "avg_loss_stderr": stderr,
            "regret": float(np.mean(regrets)) if len(regrets) == len(last_rows) else None,
        }
    return summary


class ReportBuilder:
    """
    终端报告构建器

    支持的报告类型：
    - 运行汇总
    - 界与批大小选择
    - 加速比表
    - 重放判定
    - 历史运行列表
    """

    def __init__(self, width: int = 40):
        self.width = width

    def _header(self, title: str) -> List[str]:
        return [title, "=" * self.width]

    def build_run_report(self, summary: Dict[str, Any]) -> str:
        """
        构建运行汇总

        Args:
            summary: 摘要文件内容

        Returns:
            str: 格式化文本
        """
        status_lines = self._header(f"📈 {summary['command']} 运行完成")
        status_lines.append(f"🎲 种子: {summary['seed']}")
        status_lines.append(f"🆔 运行: {summary['run_id']}")
        if summary.get("csv_path"):
            status_lines.append(f"📄 CSV: {summary['csv_path']}")
        status_lines.append("")
        status_lines.append("变体最终平均损失:")
        status_lines.append("-" * self.width)
        for variant, stats in summary.get("variants", {}).items():
            line = (f"{variant}: t={stats['t']} avg_loss={stats['avg_loss']:.6g}"
                    f" ± {stats['avg_loss_stderr']:.2g} ({stats['trials']} 次)")
            if stats.get("regret") is not None:
                line += f" regret={stats['regret']:.6g}"
            status_lines.append(line)
        if summary.get("bounds"):
            status_lines.append("")
            status_lines.extend(self._bound_lines(summary["bounds"]))
        return "\n".join(status_lines)

    def _bound_lines(self, bounds: Dict[str, Any]) -> List[str]:
        lines = ["理论界:", "-" * self.width]
        for name, value in bounds.items():
            if isinstance(value, dict):
                for part, part_value in value.items():
                    lines.append(f"{name}.{part} = {self.format_value(part_value)}")
            else:
                lines.append(f"{name} = {self.format_value(value)}")
        return lines

    def build_bounds_report(self, params: Dict[str, Any], bounds: Dict[str, Any]) -> str:
        status_lines = self._header("📐 界计算")
        status_lines.append(" ".join(f"{key}={self.format_value(value)}" for key, value in params.items()))
        status_lines.append("")
        status_lines.extend(self._bound_lines(bounds))
        return "\n".join(status_lines)

    def build_speedup_report(self, nodes: int, delta: float, rows: List[SpeedupRow]) -> str:
        status_lines = self._header(f"🚀 加速比 k={nodes} δ={self.format_value(delta)}")
        status_lines.append(f"{'eps':>10} {'m_srl':>14} {'m_dmb':>14} {'b':>12} {'S':>12}")
        for row in rows:
            status_lines.append(f"{row.eps:>10.3g} {row.serial_samples:>14.6g} {row.dmb_samples:>14.6g}"
                                f" {row.batch_size:>12.6g} {row.speedup:>12.6g}")
        return "\n".join(status_lines)

    def build_replay_report(self, passed: bool, summary_path: Path, row: Optional[int]) -> str:
        if passed:
            return f"✅ PASS 重放结果与 {summary_path} 逐字节一致"
        return f"❌ FAIL 第 {row} 行开始不一致（{summary_path}）"

    def build_history(self, runs: List[Dict[str, Any]]) -> str:
        if not runs:
            return "暂无运行记录"
        status_lines = self._header("🗂️ 历史运行")
        for run in runs:
            status_lines.append(f"{run['run_id']}  {self.format_time(run['created_at'])}  "
                                f"{run['command']:<14} seed={run['seed']}  {run['csv_path'] or '-'}")
        return "\n".join(status_lines)

    def build_run_detail(self, run: Dict[str, Any], replays: List[Dict[str, Any]]) -> str:
        """单次运行的记录及其全部重放结果"""
        status_lines = self._header(f"🗂️ 运行 {run['run_id']}")
        status_lines.append(f"命令: {run['command']}  种子: {run['seed']}  时间: {self.format_time(run['created_at'])}")
        status_lines.append(f"📄 CSV: {run['csv_path'] or '-'}")
        if run.get("csv_sha256"):
            status_lines.append(f"SHA-256: {run['csv_sha256']}")
        status_lines.append("")
        if not replays:
            status_lines.append("暂无重放记录")
            return "\n".join(status_lines)
        status_lines.append("重放记录:")
        status_lines.append("-" * self.width)
        for replay in replays:
            verdict = "PASS" if replay["passed"] else f"FAIL 第 {replay['first_divergent_row']} 行"
            status_lines.append(f"{self.format_time(replay['created_at'])}  {verdict}")
        return "\n".join(status_lines)

    def format_value(self, value: Any) -> str:
        if isinstance(value, float):
            return f"{value:.10g}"
        return str(value)

    def format_time(self, timestamp: float) -> str:
        return datetime.datetime.fromtimestamp(timestamp).strftime("%Y-%m-%d %H:%M:%S")
