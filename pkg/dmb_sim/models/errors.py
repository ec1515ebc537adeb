"""
模拟器异常定义

所有库内错误都派生自 DMBSimError，命令行入口据此映射退出码。
"""


class DMBSimError(Exception):
    """模拟器错误基类"""


class InputError(DMBSimError, ValueError):
    """输入向量、维度或参数不合法"""


class ScheduleError(DMBSimError, ValueError):
    """步长参数 α 不为正"""


class TopologyError(DMBSimError):
    """网络拓扑不连通或格式错误"""


class ConfigError(DMBSimError):
    """实验配置不合法（批大小、节点数、ρ 范围等）"""


class RunError(DMBSimError):
    """运行期错误，例如有限输入源耗尽、批次数为零"""


class UnsupportedError(DMBSimError):
    """问题缺少所需的闭式解"""


class SolverError(DMBSimError):
    """数值求解失败（二分区间无法括住根等）"""
