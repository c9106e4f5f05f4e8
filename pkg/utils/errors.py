"""
异常定义
每个可对外暴露的异常都带有稳定的进程退出码
"""
from typing import Optional


class ClashError(Exception):
    """流水线异常基类"""

    exit_code: int = 1


class InputError(ClashError):
    """输入参数或输入文件无效"""

    exit_code = 2


class FormatError(InputError):
    """文件格式错误，记录出错的字节偏移"""

    def __init__(self, message: str, offset: int, source: Optional[str] = None):
        self.offset = offset
        self.source = source
        where = f"{source}: " if source else ""
        super().__init__(f"{where}{message} (字节偏移 {offset})")


class ConfigError(InputError):
    """配置项无效，记录出错的键名"""

    def __init__(self, key: str, message: str):
        self.key = key
        super().__init__(message)


class DegenerateFrameError(ClashError):
    """退化帧（无边界像素）"""

    exit_code = 3

    def __init__(self, message: str, frame_index: Optional[int] = None, path: Optional[str] = None):
        self.frame_index = frame_index
        self.path = path
        super().__init__(message)


class EmptyBoundaryError(DegenerateFrameError):
    """边界像素集合为空"""


class NumericError(ClashError):
    """数值异常"""

    exit_code = 4


class NonFiniteLossError(NumericError):
    """损失为非有限值，记录迭代序号与最近一次有效检查点"""

    def __init__(self, iteration: int, phase: str, checkpoint_path: Optional[str] = None):
        self.iteration = iteration
        self.phase = phase
        self.checkpoint_path = checkpoint_path
        super().__init__(
            f"{phase} 阶段第 {iteration} 次迭代损失非有限值"
            + (f"，最近有效检查点: {checkpoint_path}" if checkpoint_path else "")
        )


class OptimizerError(NumericError):
    """优化器收到非有限梯度"""

    def __init__(self, param_name: str):
        self.param_name = param_name
        super().__init__(f"参数 {param_name} 的梯度包含非有限值")


class GradcheckError(ClashError):
    """梯度检查未通过"""

    exit_code = 5

    def __init__(self, failed: list):
        self.failed = failed
        super().__init__(f"梯度检查失败: {', '.join(failed)}")


class ContractError(ValueError):
    """形状或尺寸不满足约定"""


class DomainError(ValueError):
    """输入超出函数定义域"""


class ParameterError(ValueError):
    """生成参数无效"""


class SplitError(ValueError):
    """数据集无法划分"""

    def __init__(self, identity: str, message: str):
        self.identity = identity
        super().__init__(message)


class DataError(ValueError):
    """输入数据无效（例如包含非有限值）"""


class DegenerateInputError(DataError):
    """输入退化，统计量无定义"""
