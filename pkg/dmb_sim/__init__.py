"""
分布式小批量模拟器

在单机上模拟 k 个节点的分布式小批量（DMB）在线预测与随机优化，
并给出对应的后悔值界、间隙界与加速比计算。

主要功能：
- 串行、串行小批量、DMB、无通信基线与交错实例的在线预测
- DMB 随机优化与最优性间隙
- 树形网络上的向量求和与延迟模拟
- 理论界、批大小选择与加速比
- 可逐字节重放的实验记录
"""

__version__ = "1.0.0"
__description__ = "分布式小批量在线预测与随机优化模拟器"

from .main import DMBSimulator, main

__all__ = ["DMBSimulator", "main"]
