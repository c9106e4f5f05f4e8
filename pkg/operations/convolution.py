"""
卷积类候选操作
深度可分离卷积与空洞卷积：逐通道三维卷积 + 1×1×1 逐点卷积
"""
from typing import Dict

import numpy as np

from operations.base import BaseOperation, OpKind, he_normal
from services.autodiff import Tensor, conv3d


class SeparableConv3d(BaseOperation):
    """逐通道卷积（groups = C）后接逐点卷积"""

    def __init__(self, kind: OpKind, kernel: int, dilation: int = 1):
        super().__init__(
            kind=kind,
            description=f"{kernel}³ 逐通道卷积 (膨胀 {dilation}) + 1³ 逐点卷积",
            config={"kernel": kernel, "dilation": dilation}
        )

    def init_params(self, channels: int, frames: int, rng: np.random.Generator) -> Dict[str, np.ndarray]:
        k = self.config["kernel"]
        return {
            "depthwise": he_normal(rng, (channels, 1, k, k, k), fan_in=k ** 3),
            "pointwise": he_normal(rng, (channels, channels, 1, 1, 1), fan_in=channels),
        }

    def forward(self, x: Tensor, params: Dict[str, Tensor]) -> Tensor:
        channels = x.shape[1]
        y = conv3d(x, params["depthwise"], dilation=self.config["dilation"], groups=channels)
        return conv3d(y, params["pointwise"])

    def is_parametric(self) -> bool:
        return True


def build_convolutions():
    """构建四个卷积类候选操作"""
    return [
        SeparableConv3d(OpKind.DepthwiseSepConv3, kernel=3),
        SeparableConv3d(OpKind.DepthwiseSepConv5, kernel=5),
        SeparableConv3d(OpKind.AtrousConv3Rate2, kernel=3, dilation=2),
        SeparableConv3d(OpKind.AtrousConv5Rate2, kernel=5, dilation=2),
    ]
