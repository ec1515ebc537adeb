"""
工具模块

包含实验配置、运行记录持久化与报告构建。
"""

from .config import ExperimentConfig, build_config
from .data_persistence import RunDatabase
from .report_builder import CurveRow, ReportBuilder

__all__ = ["ExperimentConfig", "build_config", "RunDatabase", "CurveRow", "ReportBuilder"]
