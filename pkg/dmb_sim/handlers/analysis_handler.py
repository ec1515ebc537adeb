from dataclasses import asdict
from pathlib import Path
from typing import Any, Callable, Dict, Optional, Tuple

from loguru import logger

from ..models.analysis import (BatchMode, BoundParams, accelerated_gap_bound, doubling_schedule,
                               fixed_batch_dominant_term, gap_bound, nearest_power_of_two, psi_dmb, psi_interlaced,
                               psi_minibatch, psi_nocomm, psi_serial, select_batch_size, speedup_samples,
                               speedup_table, strongly_convex_gap_rate)
from ..models.errors import InputError, UnsupportedError
from ..utils.config import ANALYSIS_COMMANDS, ExperimentConfig
from ..utils.report_builder import first_divergent_row, read_summary, render_csv, digest
from .base_handler import BaseCommandHandler

DEFAULT_VECTOR_SUM_DELAY = 1.0


class AnalysisHandler(BaseCommandHandler):
    """
    界计算、加速比、重放与历史查询命令

    bounds 与 speedup 只调用分析模块中的公式，不做任何模拟。
    """

    def get_command_handlers(self) -> Dict[str, Callable]:
        return {
            "bounds": self.handle_bounds,
            "speedup": self.handle_speedup,
            "replay": self.handle_replay,
            "history": self.handle_history,
        }

    def analysis_params(self, config: ExperimentConfig) -> BoundParams:
        spec = config.analysis
        return BoundParams(
            sigma2=spec.sigma2,
            horizon=config.m,
            diameter=spec.diameter,
            smoothness=spec.smoothness,
            initial_gap=spec.initial_gap,
            batch_size=config.b,
            latency_gap=config.net.mu or 0,
            nodes=config.net.k,
            delta=spec.delta if spec.delta is not None else DEFAULT_VECTOR_SUM_DELAY,
            rho=spec.rho,
            theta=spec.theta,
        )

    async def handle_bounds(self, config: ExperimentConfig) -> Tuple[str, Dict[str, Any]]:
        """
        计算全部后悔值界、间隙界与推荐批大小

        Returns:
            Tuple[str, Dict]: (报告文本, 摘要内容)
        """
        p = self.analysis_params(config)
        bounds: Dict[str, Any] = {
            "psi_serial": psi_serial(p),
            "psi_minibatch": asdict(psi_minibatch(p)),
            "psi_dmb": asdict(psi_dmb(p)),
            "psi_nocomm": psi_nocomm(p),
            "psi_interlaced": psi_interlaced(p),
            "fixed_batch_dominant_term": fixed_batch_dominant_term(p),
            "gap_bound": gap_bound(p),
            "accelerated_gap_bound": accelerated_gap_bound(p),
        }
        if config.analysis.modulus is not None:
            bounds["strongly_convex_gap_rate"] = strongly_convex_gap_rate(p, config.analysis.modulus)
        bounds["speedup_samples"] = speedup_samples(p.nodes, p.delta, p.batch_size)

        horizon = int(config.m)
        fixed = select_batch_size(horizon, BatchMode.FIXED, p.rho)
        bounds["batch_size"] = {
            "fixed": fixed,
            "doubling": select_batch_size(horizon, BatchMode.DOUBLING, p.rho),
            "nearest_power_of_two": nearest_power_of_two(fixed),
        }
        bounds["doubling_schedule"] = {
            f"epoch{epoch}": f"[{start}, {min(start + length, horizon)}) b={b_e}"
            for epoch, start, length, b_e in doubling_schedule(horizon, p.rho)
        }
        if bounds["batch_size"]["nearest_power_of_two"] != fixed:
            logger.info(f"推荐批大小 {fixed} 不是 2 的幂，最近的 2 的幂为 {bounds['batch_size']['nearest_power_of_two']}")

        shown = {key: value for key, value in p.to_dict().items() if value is not None}
        return self.report_builder.build_bounds_report(shown, bounds), {"params": p.to_dict(), "bounds": bounds}

    async def handle_speedup(self, config: ExperimentConfig) -> Tuple[str, Dict[str, Any]]:
        p = self.analysis_params(config)
        rows = speedup_table(p, config.analysis.eps_list)
        text = self.report_builder.build_speedup_report(p.nodes, p.delta, rows)
        return text, {"params": p.to_dict(), "speedup": [asdict(row) for row in rows]}

    async def handle_replay(self, summary_path: Path) -> Tuple[bool, Optional[int], str]:
        """
        按摘要中的种子与配置重新运行，逐字节比较 CSV

        Args:
            summary_path: 摘要文件路径

        Returns:
            Tuple[bool, Optional[int], str]: (是否一致, 第一处不同的行号, 报告文本)

        Raises:
            UnsupportedError: 摘要来自不产生 CSV 的命令
            OSError: 摘要或 CSV 无法读取
        """
        summary = read_summary(summary_path)
        if summary["command"] in ANALYSIS_COMMANDS or not summary.get("csv_path"):
            raise UnsupportedError(f"{summary['command']} 运行没有 CSV，无法重放")

        config = ExperimentConfig.from_dict(summary["config"])
        config.seed = int(summary["seed"])
        config.validate()

        expected = Path(summary["csv_path"]).read_text(encoding="utf-8")
        outcome = await self.app.experiment_handler.run(config)
        actual = render_csv(outcome.rows)
        row = first_divergent_row(expected, actual)
        passed = row is None

        database = self.app.open_database(Path(summary["csv_path"]).parent)
        try:
            await database.record_replay(summary.get("run_id"), summary_path, passed, row, digest(actual))
        finally:
            await database.close()

        if passed:
            logger.info(f"✅ 重放通过: {summary_path}")
        else:
            logger.warning(f"⚠️ 重放失败: 第 {row} 行不一致")
        return passed, row, self.report_builder.build_replay_report(passed, summary_path, row)

    async def handle_history(self, directory: Path, limit: int = 20, command: Optional[str] = None,
                             run_id: Optional[str] = None) -> str:
        """
        列出运行记录；给出 run_id 时显示该运行及其重放结果

        Raises:
            InputError: run_id 不存在
        """
        database = self.app.open_database(directory)
        try:
            if run_id is None:
                return self.report_builder.build_history(await database.list_runs(limit, command))
            run = await database.get_run(run_id)
            if run is None:
                raise InputError(f"未找到运行记录: {run_id}")
            replays = await database.list_replays(run_id)
        finally:
            await database.close()
        return self.report_builder.build_run_detail(run, replays)
