"""
候选操作基类
"""
from abc import ABC, abstractmethod
from enum import Enum
from typing import Any, Dict

import numpy as np

from services.autodiff import Tensor
from utils.logger import get_logger

logger = get_logger("operations")


class OpKind(Enum):
    """候选操作集合，定义顺序即并列时的优先顺序"""

    DepthwiseSepConv3 = "DepthwiseSepConv3"
    DepthwiseSepConv5 = "DepthwiseSepConv5"
    AtrousConv3Rate2 = "AtrousConv3Rate2"
    AtrousConv5Rate2 = "AtrousConv5Rate2"
    AvgPool3 = "AvgPool3"
    MaxPool3 = "MaxPool3"
    SkipConnect = "SkipConnect"
    Zero = "Zero"
    ChannelAttention = "ChannelAttention"
    SpatialAttention = "SpatialAttention"
    TemporalAttention = "TemporalAttention"
    SelfAttention = "SelfAttention"

    @property
    def index(self) -> int:
        return OP_KINDS.index(self)

    @classmethod
    def parse(cls, name: str) -> "OpKind":
        try:
            return cls(name)
        except ValueError:
            raise ValueError(f"未知的操作: {name}")


OP_KINDS = list(OpKind)


def he_normal(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    """He 正态初始化"""
    return rng.normal(0.0, np.sqrt(2.0 / max(fan_in, 1)), size=shape)


class BaseOperation(ABC):
    """候选操作抽象类：所有操作保持 (B, C, T, H, W) 形状不变"""

    def __init__(self, kind: OpKind, description: str, config: Dict[str, Any]):
        self.kind = kind
        self.name = kind.value
        self.description = description
        self.config = config

    @abstractmethod
    def init_params(
        self,
        channels: int,
        frames: int,
        rng: np.random.Generator
    ) -> Dict[str, np.ndarray]:
        """
        初始化操作参数

        Args:
            channels: 输入/输出通道数
            frames: 时间维长度（时间注意力需要）
            rng: 随机数生成器

        Returns:
            局部参数名 → 初始值，无参数操作返回空字典
        """
        pass

    @abstractmethod
    def forward(self, x: Tensor, params: Dict[str, Tensor]) -> Tensor:
        """
        前向计算

        Args:
            x: (B, C, T, H, W) 输入
            params: 局部参数名 → 参数张量

        Returns:
            与输入同形状的输出
        """
        pass

    def is_parametric(self) -> bool:
        """操作是否带可学习参数"""
        return False

    def get_config(self) -> Dict[str, Any]:
        """获取配置"""
        return self.config

    def __repr__(self):
        return f"<{self.__class__.__name__} {self.name}>"
