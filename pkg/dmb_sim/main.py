import argparse
import asyncio
import functools
import os
import sys
import time
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional

import aiosqlite
from loguru import logger

from .models.errors import (ConfigError, DMBSimError, InputError, ScheduleError, SolverError,
                            TopologyError, UnsupportedError)
from .utils.config import ANALYSIS_COMMANDS, RUN_COMMANDS, ExperimentConfig, build_config, default_output_dir
from .utils.data_persistence import RunDatabase
from .utils.report_builder import ReportBuilder, summarize_variants, summary_path_for, write_csv, write_summary

LOG_LEVEL_ENV = "DMB_SIM_LOG_LEVEL"

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_IO = 3

_CONFIG_ERRORS = (ConfigError, InputError, ScheduleError, TopologyError, SolverError, UnsupportedError)

RUN_FLAGS = [
    ("--problem", "problem.kind", "问题类型：quadratic / logistic"),
    ("--n", "problem.n", "维度"),
    ("--sigma-z", "problem.sigma_z", "二次问题每坐标噪声"),
    ("--diameter", "problem.diameter", "直径代理 D"),
    ("--sparsity", "problem.sparsity", "逻辑斯蒂输入的非零特征数"),
    ("--density", "problem.density", "w° 的非零比例"),
    ("--label-noise", "problem.label_noise", "标签翻转概率"),
    ("--rule", "rule.kind", "更新规则：pgd / da / md / cda"),
    ("--schedule", "rule.schedule", "步长：sqrt / constant"),
    ("--L", "rule.smoothness", "光滑常数 L，默认取问题的值"),
    ("--gamma", "rule.gamma", "γ 常数，实际使用 γ/√b"),
    ("--lambda", "rule.lam", "ℓ1 正则系数 λ"),
    ("--set", "rule.feasible_set", "可行域：unconstrained / ball"),
    ("--radius", "rule.radius", "球半径"),
    ("--topology", "net.topology", "拓扑：star / path / tree / complete / file"),
    ("--topology-file", "net.path", "拓扑文件"),
    ("--k", "net.k", "节点数"),
    ("--latency", "net.latency", "每跳延迟（毫秒）"),
    ("--rate", "net.rate", "输入速率（每毫秒）"),
    ("--arity", "net.arity", "树拓扑的分叉数"),
    ("--mu", "net.mu", "直接指定 μ"),
    ("--root", "net.root", "生成树根节点"),
    ("--m", "run.m", "输入数"),
    ("--b", "run.b", "批大小"),
    ("--b-list", "run.b_list", "批大小列表，逗号分隔"),
    ("--batch-mode", "run.batch_mode", "批大小方式：fixed / doubling（仅 dmb）"),
    ("--rho", "analysis.rho", "倍增模式的增长指数 ρ"),
    ("--mu-list", "run.mu_list", "μ 列表，逗号分隔"),
    ("--latency-list", "run.latency_list", "延迟列表，逗号分隔"),
    ("--per-node-b", "run.per_node_b", "无通信基线的每节点批大小"),
    ("--trials", "run.trials", "试验次数"),
    ("--seed", "run.seed", "随机种子"),
    ("--out", "run.out", "CSV 输出路径"),
    ("--workers", "run.workers", "并发试验数"),
]

RUN_SWITCHES = [
    ("--root-broadcast", "net.root_broadcast", "由根更新后广播预测向量"),
    ("--align-mu", "net.align_mu", "计算出的 μ 向上取整到 k 的倍数"),
]

ANALYSIS_FLAGS = [
    ("--sigma2", "analysis.sigma2", "梯度方差 σ²"),
    ("--D", "analysis.diameter", "直径代理 D"),
    ("--L", "analysis.smoothness", "光滑常数 L"),
    ("--F0", "analysis.initial_gap", "初始间隙 F(w₁) − F(w*)"),
    ("--delta", "analysis.delta", "向量求和延迟 δ"),
    ("--rho", "analysis.rho", "批大小增长指数 ρ"),
    ("--theta", "analysis.theta", "批大小系数 θ"),
    ("--eps-list", "analysis.eps_list", "ε 列表，逗号分隔"),
    ("--modulus", "analysis.modulus", "强凸参数 ν，给出时报告强凸速率"),
    ("--m", "run.m", "输入数"),
    ("--b", "run.b", "批大小"),
    ("--mu", "net.mu", "μ"),
    ("--k", "net.k", "节点数"),
    ("--seed", "run.seed", "记录用种子"),
    ("--out", "run.out", "摘要对应的输出路径"),
]


def handle_command_exception(operation_name: str):
    """
    异常处理装饰器，用于包装命令执行函数

    记录失败后重新抛出，由 main() 转换为退出码。

    Args:
        operation_name: 操作名称，用于错误消息

    Returns:
        装饰器函数
    """
    def decorator(func: Callable):
        @functools.wraps(func)
        async def wrapper(self, *args, **kwargs):
            try:
                return await func(self, *args, **kwargs)
            except Exception as e:
                logger.error(f"❌ {operation_name}失败: {type(e).__name__}: {e}")
                raise
        return wrapper
    return decorator


def exit_code_for(error: BaseException) -> int:
    if isinstance(error, _CONFIG_ERRORS):
        return EXIT_CONFIG
    if isinstance(error, (OSError, aiosqlite.Error)):
        return EXIT_IO
    return EXIT_FAILURE


def configure_logging(level: Optional[str] = None) -> None:
    """移除默认输出，日志只写到 stderr"""
    logger.remove()
    logger.add(sys.stderr, level=(level or os.environ.get(LOG_LEVEL_ENV) or "WARNING").upper(),
               format="<green>{time:HH:mm:ss}</green> | <level>{level: <8}</level> | {message}")


class DMBSimulator:
    """
    分布式小批量模拟器主类

    功能包括：
    - 在线预测实验（串行、小批量、DMB、无通信、交错实例）
    - 随机优化实验
    - 界与加速比计算
    - 运行记录与逐字节重放

    支持的操作：
    - 实验：serial/minibatch/dmb/nocomm/interlaced/opt/compare/sweep-batch/sweep-latency
    - 分析：bounds/speedup
    - 记录：replay/history
    """

    def __init__(self, output_dir: Optional[Path] = None):
        self.output_dir = Path(output_dir) if output_dir else default_output_dir()
        self.report_builder = ReportBuilder()
        self.start_time = time.time()
        self._init_command_handlers()

    def _init_command_handlers(self):
        from .handlers.analysis_handler import AnalysisHandler
        from .handlers.experiment_handler import ExperimentHandler

        self.experiment_handler = ExperimentHandler(self)
        self.analysis_handler = AnalysisHandler(self)

    def open_database(self, directory: Path) -> RunDatabase:
        """运行数据库与 CSV 放在同一目录"""
        return RunDatabase(Path(directory) / "runs.db")

    async def _save_run(self, directory: Path, summary: Dict[str, Any]) -> None:
        database = self.open_database(directory)
        try:
            await database.save_run(summary["run_id"], summary["command"], summary["seed"], summary["config"],
                                    summary.get("csv_path"), summary.get("csv_sha256"), summary)
        finally:
            await database.close()

    @handle_command_exception("运行实验")
    async def run_experiment(self, config: ExperimentConfig) -> Dict[str, Any]:
        """
        运行实验并写出 CSV、摘要与运行记录

        Returns:
            Dict: 摘要内容
        """
        outcome = await self.experiment_handler.run(config)
        csv_path = config.output_path(self.output_dir).resolve()
        csv_sha256 = write_csv(outcome.rows, csv_path)

        summary = {
            "run_id": RunDatabase.new_run_id(),
            "command": config.command,
            "seed": config.seed,
            "config": config.to_dict(),
            "csv_path": str(csv_path),
            "csv_sha256": csv_sha256,
            "variants": summarize_variants(outcome.rows),
            "bounds": outcome.bounds,
            "notes": outcome.notes,
            "created_at": time.time(),
        }
        write_summary(summary_path_for(csv_path), summary)
        await self._save_run(csv_path.parent, summary)
        logger.info(f"💾 结果已保存: {csv_path}")
        return summary

    @handle_command_exception("计算界")
    async def run_analysis(self, config: ExperimentConfig) -> str:
        """bounds / speedup：打印表格，只写摘要文件"""
        handler = self.analysis_handler.get_command_handlers()[config.command]
        text, payload = await handler(config)
        csv_path = config.output_path(self.output_dir).resolve()
        summary = {
            "run_id": RunDatabase.new_run_id(),
            "command": config.command,
            "seed": config.seed,
            "config": config.to_dict(),
            "csv_path": None,
            "created_at": time.time(),
            **payload,
        }
        write_summary(summary_path_for(csv_path), summary)
        await self._save_run(csv_path.parent, summary)
        return text

    @handle_command_exception("重放")
    async def replay(self, summary_path: Path):
        return await self.analysis_handler.handle_replay(summary_path)

    @handle_command_exception("查询历史")
    async def history(self, directory: Optional[Path], limit: int, command: Optional[str],
                      run_id: Optional[str] = None) -> str:
        return await self.analysis_handler.handle_history(directory or self.output_dir, limit, command, run_id)


# ==================== 命令行 ====================

def _add_flags(parser: argparse.ArgumentParser, flags, switches=()) -> None:
    for flag, key, help_text in flags:
        parser.add_argument(flag, dest=key, default=argparse.SUPPRESS, metavar="VALUE", help=help_text)
    for flag, key, help_text in switches:
        parser.add_argument(flag, dest=key, action="store_const", const="true",
                            default=argparse.SUPPRESS, help=help_text)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--log-level", default=None, help=f"日志级别，默认取 {LOG_LEVEL_ENV} 或 WARNING")

    configurable = argparse.ArgumentParser(add_help=False, parents=[common])
    configurable.add_argument("--config", type=Path, default=None, help="key=value 配置文件")

    parser = argparse.ArgumentParser(prog="dmb_sim", description="分布式小批量在线预测与随机优化模拟器")
    subparsers = parser.add_subparsers(dest="command", required=True)

    for command in RUN_COMMANDS:
        sub = subparsers.add_parser(command, parents=[configurable], help=f"{command} 实验")
        _add_flags(sub, RUN_FLAGS, RUN_SWITCHES)
    for command in ANALYSIS_COMMANDS:
        sub = subparsers.add_parser(command, parents=[configurable], help=f"{command} 计算")
        _add_flags(sub, ANALYSIS_FLAGS)

    replay = subparsers.add_parser("replay", parents=[common], help="按摘要重放并逐字节比较 CSV")
    replay.add_argument("summary", type=Path)

    history = subparsers.add_parser("history", parents=[common], help="列出运行记录")
    history.add_argument("--dir", type=Path, default=None, help="运行数据库所在目录")
    history.add_argument("--limit", type=int, default=20)
    history.add_argument("--filter", dest="filter_command", default=None, help="只列出该命令")
    history.add_argument("--run", dest="run_id", default=None, help="显示该运行及其重放记录")
    return parser


def _collect_overrides(args: argparse.Namespace) -> Dict[str, str]:
    overrides = {key: value for key, value in vars(args).items() if "." in key}
    if "net.path" in overrides and "net.topology" not in overrides:
        overrides["net.topology"] = "file"
    return overrides


async def _dispatch(app: DMBSimulator, args: argparse.Namespace) -> int:
    if args.command == "replay":
        passed, _, text = await app.replay(args.summary)
        print(text)
        return EXIT_OK if passed else EXIT_FAILURE
    if args.command == "history":
        print(await app.history(args.dir, args.limit, args.filter_command, args.run_id))
        return EXIT_OK

    config = build_config(args.command, args.config, _collect_overrides(args))
    if args.command in ANALYSIS_COMMANDS:
        print(await app.run_analysis(config))
    else:
        summary = await app.run_experiment(config)
        print(app.report_builder.build_run_report(summary))
    return EXIT_OK


def main(argv: Optional[List[str]] = None) -> int:
    """
    命令行入口

    Returns:
        int: 0 成功；1 重放不一致或未预期错误；2 配置错误；3 I/O 错误
    """
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level)
    try:
        return asyncio.run(_dispatch(DMBSimulator(), args))
    except DMBSimError as e:
        print(f"❌ {type(e).__name__}: {e}", file=sys.stderr)
        return exit_code_for(e)
    except (OSError, aiosqlite.Error) as e:
        print(f"❌ I/O 错误: {e}", file=sys.stderr)
        return EXIT_IO
    except Exception as e:
        logger.exception(f"💥 未预期的错误: {e}")
        return EXIT_FAILURE
