# 命令处理器模块
