"""
优化器与参数检查点
"""
import struct
from collections import OrderedDict
from typing import Dict, Mapping, Tuple, Union

import numpy as np

from services.autodiff import GradientMap, Tensor
from utils.errors import ContractError, FormatError, OptimizerError

CHECKPOINT_MAGIC = b"CKPT"
CHECKPOINT_VERSION = 1


class AdamState:
    """Adam 优化器状态（带偏差修正）"""

    def __init__(
        self,
        lr: float,
        betas: Tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8
    ):
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.first_moment: Dict[str, np.ndarray] = {}
        self.second_moment: Dict[str, np.ndarray] = {}

    def __repr__(self):
        return f"<AdamState lr={self.lr} betas=({self.beta1}, {self.beta2}) step={self.step_count}>"


def adam_step(
    params: Mapping[str, Tensor],
    grads: Union[GradientMap, Mapping[str, np.ndarray]],
    state: AdamState
) -> AdamState:
    """
    执行一步 Adam 更新（原地修改参数数据）

    Args:
        params: 参数名 → 叶子张量
        grads: 梯度表（GradientMap 按张量查找，dict 按名字查找）
        state: 优化器状态

    Returns:
        更新后的状态（step_count 加 1）
    """
    resolved = {}
    for name, param in params.items():
        if isinstance(grads, GradientMap):
            g = grads[param]
        else:
            g = np.asarray(grads.get(name, np.zeros_like(param.data)), dtype=np.float64)
        if g.shape != param.data.shape:
            raise ContractError(f"参数 {name} 梯度形状 {g.shape} 与参数形状 {param.data.shape} 不一致")
        if not np.isfinite(g).all():
            raise OptimizerError(name)
        resolved[name] = g

    state.step_count += 1
    t = state.step_count
    correction1 = 1.0 - state.beta1 ** t
    correction2 = 1.0 - state.beta2 ** t

    for name, param in params.items():
        g = resolved[name]
        m = state.first_moment.get(name)
        v = state.second_moment.get(name)
        if m is None:
            m = np.zeros_like(param.data)
            v = np.zeros_like(param.data)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.first_moment[name] = m
        state.second_moment[name] = v

        m_hat = m / correction1
        v_hat = v / correction2
        param.data = param.data - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)

    return state


def encode_checkpoint(tensors: Mapping[str, np.ndarray]) -> bytes:
    """
    编码参数检查点

    布局：魔数 "CKPT"，版本 u8，数量 u32；名字表（u16 名字长度、名字、u8 维数、各维 u32）；
    随后按名字表顺序排列 64 位小端浮点数据。
    """
    header = [CHECKPOINT_MAGIC, struct.pack("<BI", CHECKPOINT_VERSION, len(tensors))]
    payload = []
    for name, array in tensors.items():
        array = np.asarray(array, dtype=np.float64)
        encoded = name.encode("utf-8")
        header.append(struct.pack("<H", len(encoded)))
        header.append(encoded)
        header.append(struct.pack("<B", array.ndim))
        header.append(struct.pack(f"<{array.ndim}I", *array.shape))
        payload.append(array.astype("<f8").tobytes())
    return b"".join(header + payload)


def decode_checkpoint(data: bytes, source: str = None) -> "OrderedDict[str, np.ndarray]":
    """解码参数检查点"""
    if data[:4] != CHECKPOINT_MAGIC:
        raise FormatError("检查点魔数错误", 0, source)
    pos = 4

    def take(fmt: str):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(data):
            raise FormatError("检查点被截断", pos, source)
        values = struct.unpack_from(fmt, data, pos)
        pos += size
        return values

    version, count = take("<BI")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"不支持的检查点版本 {version}", 4, source)

    table = []
    for _ in range(count):
        (length,) = take("<H")
        if pos + length > len(data):
            raise FormatError("检查点名字表被截断", pos, source)
        name = data[pos:pos + length].decode("utf-8")
        pos += length
        (ndim,) = take("<B")
        shape = take(f"<{ndim}I") if ndim else ()
        table.append((name, tuple(shape)))

    tensors = OrderedDict()
    for name, shape in table:
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        if pos + nbytes > len(data):
            raise FormatError(f"检查点数据被截断: {name}", pos, source)
        tensors[name] = np.frombuffer(data, dtype="<f8", count=nbytes // 8, offset=pos).astype(np.float64).reshape(shape)
        pos += nbytes
    return tensors


def save_checkpoint(path: str, params: Mapping[str, Union[Tensor, np.ndarray]]):
    """保存参数检查点（参数张量或数组）"""
    with open(path, "wb") as f:
        f.write(encode_checkpoint({name: p.data if isinstance(p, Tensor) else p for name, p in params.items()}))


def load_checkpoint(path: str) -> "OrderedDict[str, np.ndarray]":
    """读取参数检查点"""
    with open(path, "rb") as f:
        return decode_checkpoint(f.read(), source=path)
