"""
注意力类候选操作
通道 / 空间 / 时间注意力与自注意力
"""
from typing import Dict

import numpy as np

from operations.base import BaseOperation, OpKind, he_normal
from services.autodiff import (
    Tensor,
    add,
    concat,
    conv3d,
    global_mean,
    matmul,
    max_,
    relu,
    reshape,
    scale,
    sigmoid,
    softmax,
    transpose,
)

REDUCTION = 4


def _bottleneck_params(rng: np.random.Generator, width: int) -> Dict[str, np.ndarray]:
    hidden = max(width // REDUCTION, 1)
    return {
        "fc1": he_normal(rng, (width, hidden), fan_in=width),
        "b1": np.zeros(hidden),
        "fc2": rng.normal(0.0, np.sqrt(1.0 / hidden), size=(hidden, width)),
        "b2": np.zeros(width),
    }


def _bottleneck(s: Tensor, params: Dict[str, Tensor]) -> Tensor:
    """两层瓶颈 + sigmoid 门控"""
    h = relu(add(matmul(s, params["fc1"]), params["b1"]))
    return sigmoid(add(matmul(h, params["fc2"]), params["b2"]))


class ChannelAttention(BaseOperation):
    """按 (T, H, W) 全局平均 → 瓶颈 → sigmoid → 逐通道缩放"""

    def __init__(self):
        super().__init__(OpKind.ChannelAttention, "挤压-激励式通道注意力", {"reduction": REDUCTION})

    def init_params(self, channels: int, frames: int, rng: np.random.Generator) -> Dict[str, np.ndarray]:
        return _bottleneck_params(rng, channels)

    def forward(self, x: Tensor, params: Dict[str, Tensor]) -> Tensor:
        B, C = x.shape[:2]
        s = global_mean(x, axes=(2, 3, 4), keepdims=False)
        gate = _bottleneck(s, params)
        return scale(x, reshape(gate, (B, C, 1, 1, 1)))

    def is_parametric(self) -> bool:
        return True


class SpatialAttention(BaseOperation):
    """通道均值图与最大值图 → 1×7×7 卷积 → sigmoid → 逐位置缩放"""

    def __init__(self):
        super().__init__(OpKind.SpatialAttention, "卷积式空间注意力", {"kernel": (1, 7, 7)})

    def init_params(self, channels: int, frames: int, rng: np.random.Generator) -> Dict[str, np.ndarray]:
        return {
            "conv": he_normal(rng, (1, 2, 1, 7, 7), fan_in=2 * 49),
            "bias": np.zeros((1, 1, 1, 1, 1)),
        }

    def forward(self, x: Tensor, params: Dict[str, Tensor]) -> Tensor:
        pooled = concat([global_mean(x, axes=1), max_(x, axes=1)], axis=1)
        gate = sigmoid(add(conv3d(pooled, params["conv"]), params["bias"]))
        return scale(x, gate)

    def is_parametric(self) -> bool:
        return True


class TemporalAttention(BaseOperation):
    """按 (C, H, W) 全局平均 → 时间维瓶颈 → sigmoid → 逐帧缩放"""

    def __init__(self):
        super().__init__(OpKind.TemporalAttention, "逐帧时间注意力", {"reduction": REDUCTION})

    def init_params(self, channels: int, frames: int, rng: np.random.Generator) -> Dict[str, np.ndarray]:
        return _bottleneck_params(rng, frames)

    def forward(self, x: Tensor, params: Dict[str, Tensor]) -> Tensor:
        B, _, T = x.shape[:3]
        if params["fc1"].shape[0] != T:
            raise ValueError(f"TemporalAttention 按 T={params['fc1'].shape[0]} 初始化，输入 T={T}")
        s = global_mean(x, axes=(1, 3, 4), keepdims=False)
        gate = _bottleneck(s, params)
        return scale(x, reshape(gate, (B, 1, T, 1, 1)))

    def is_parametric(self) -> bool:
        return True


class SelfAttention(BaseOperation):
    """T·H·W 个位置上的单头缩放点积注意力，query/key 通道降为 1/4，残差相加"""

    def __init__(self):
        super().__init__(OpKind.SelfAttention, "单头时空自注意力", {"reduction": REDUCTION})

    def init_params(self, channels: int, frames: int, rng: np.random.Generator) -> Dict[str, np.ndarray]:
        d = max(channels // REDUCTION, 1)
        return {
            "query": he_normal(rng, (d, channels, 1, 1, 1), fan_in=channels),
            "key": he_normal(rng, (d, channels, 1, 1, 1), fan_in=channels),
            "value": rng.normal(0.0, np.sqrt(1.0 / channels), size=(channels, channels, 1, 1, 1)),
        }

    def forward(self, x: Tensor, params: Dict[str, Tensor]) -> Tensor:
        B, C, T, H, W = x.shape
        n = T * H * W
        d = params["query"].shape[0]
        q = transpose(reshape(conv3d(x, params["query"]), (B, d, n)), (0, 2, 1))
        k = reshape(conv3d(x, params["key"]), (B, d, n))
        v = transpose(reshape(conv3d(x, params["value"]), (B, C, n)), (0, 2, 1))
        weights = softmax(scale(matmul(q, k), 1.0 / np.sqrt(d)), axis=-1)
        attended = transpose(matmul(weights, v), (0, 2, 1))
        return add(x, reshape(attended, (B, C, T, H, W)))

    def is_parametric(self) -> bool:
        return True


def build_attention():
    """构建四个注意力类候选操作"""
    return [ChannelAttention(), SpatialAttention(), TemporalAttention(), SelfAttention()]
