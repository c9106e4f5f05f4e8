"""
池化、恒等与零操作
"""
from typing import Dict

import numpy as np

from operations.base import BaseOperation, OpKind
from services.autodiff import Tensor, avgpool3d, maxpool3d


class Pool3(BaseOperation):
    """3³ 窗口、步长 1、same 填充的池化"""

    def __init__(self, kind: OpKind, mode: str):
        super().__init__(
            kind=kind,
            description=f"3³ {mode} 池化",
            config={"mode": mode, "kernel": 3}
        )

    def init_params(self, channels: int, frames: int, rng: np.random.Generator) -> Dict[str, np.ndarray]:
        return {}

    def forward(self, x: Tensor, params: Dict[str, Tensor]) -> Tensor:
        if self.config["mode"] == "max":
            return maxpool3d(x, kernel=3, padding="same")
        return avgpool3d(x, kernel=3, padding="same")


class SkipConnect(BaseOperation):
    """恒等映射"""

    def __init__(self):
        super().__init__(OpKind.SkipConnect, "恒等映射", {})

    def init_params(self, channels: int, frames: int, rng: np.random.Generator) -> Dict[str, np.ndarray]:
        return {}

    def forward(self, x: Tensor, params: Dict[str, Tensor]) -> Tensor:
        return x


class Zero(BaseOperation):
    """零操作：断开该边"""

    def __init__(self):
        super().__init__(OpKind.Zero, "输出全零", {})

    def init_params(self, channels: int, frames: int, rng: np.random.Generator) -> Dict[str, np.ndarray]:
        return {}

    def forward(self, x: Tensor, params: Dict[str, Tensor]) -> Tensor:
        return Tensor(np.zeros(x.shape))


def build_pooling():
    """构建池化、恒等与零操作"""
    return [
        Pool3(OpKind.AvgPool3, "avg"),
        Pool3(OpKind.MaxPool3, "max"),
        SkipConnect(),
        Zero(),
    ]
