"""
反向模式自动微分
基于 numpy 的 64 位稠密张量，支持 5 维 (B, C, T, H, W) 特征图所需的全部原语
"""
import itertools
import threading
from contextlib import contextmanager
from functools import lru_cache
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from utils.errors import ContractError, DomainError

ArrayLike = Union[np.ndarray, float, int, Sequence]


class Tape:
    """
    计算记录带：按执行顺序追加节点

    父节点总是先于子节点记录，因此逆序遍历即为拓扑逆序。
    """

    def __init__(self):
        self.nodes: List["Tensor"] = []

    def record(self, tensor: "Tensor") -> int:
        self.nodes.append(tensor)
        return len(self.nodes) - 1

    def __len__(self) -> int:
        return len(self.nodes)

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        _stack().pop()
        return False


_local = threading.local()


def _stack() -> List[Tape]:
    if not hasattr(_local, "stack"):
        _local.stack = []
        _local.grad_enabled = True
    return _local.stack


def active_tape() -> Optional[Tape]:
    """当前线程的活动记录带；没有进入任何 Tape 时为 None（不记录计算）"""
    stack = _stack()
    return stack[-1] if stack else None


def grad_enabled() -> bool:
    _stack()
    return _local.grad_enabled


@contextmanager
def no_grad():
    """在此上下文中不记录计算（推理用）"""
    _stack()
    previous = _local.grad_enabled
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = previous


@contextmanager
def freeze(tensors: Iterable["Tensor"]):
    """在此上下文中把给定叶子视为常量"""
    saved = [(t, t.requires_grad) for t in tensors]
    for t, _ in saved:
        t.requires_grad = False
    try:
        yield
    finally:
        for t, flag in saved:
            t.requires_grad = flag


class Tensor:
    """64 位稠密张量"""

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name
        self.grad: Optional[np.ndarray] = None
        self.ctx: Optional["Function"] = None
        self.node_id: Optional[int] = None
        self.tape: Optional[Tape] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self.ctx is None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        label = f" {self.name}" if self.name else ""
        return f"<Tensor{label} shape={self.shape} requires_grad={self.requires_grad}>"

    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __neg__(self): return mul(self, -1.0)
    def __matmul__(self, other): return matmul(self, other)


def as_tensor(x: Union["Tensor", ArrayLike]) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data: ArrayLike, name: Optional[str] = None) -> Tensor:
    """创建叶子参数（复制数据，参数之间不共享存储）"""
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


class Function:
    """原语基类：forward 计算数值，backward 返回对每个输入的梯度"""

    name = "function"

    def __init__(self, *parents: Tensor):
        self.parents = parents
        # backward 可对不需要梯度的输入返回 None
        self.needs_grad = tuple(p.requires_grad for p in parents)

    @classmethod
    def apply(cls, *inputs, **kwargs) -> Tensor:
        tensors = [as_tensor(x) for x in inputs]
        fn = cls(*tensors)
        out = Tensor(fn.forward(*[t.data for t in tensors], **kwargs))
        tape = active_tape()
        if tape is not None and grad_enabled() and any(fn.needs_grad):
            out.requires_grad = True
            out.ctx = fn
            out.tape = tape
            out.node_id = tape.record(out)
        return out

    def forward(self, *args, **kwargs) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """把广播后的梯度求和回原形状"""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(name: str, a: np.ndarray, b: np.ndarray) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ContractError(f"{name}: 形状不兼容 {a.shape} 与 {b.shape}")


# ---------------------------------------------------------------- 逐元素


class Add(Function):
    name = "add"

    def forward(self, a, b):
        _broadcast_shape(self.name, a, b)
        self.shapes = (a.shape, b.shape)
        return a + b

    def backward(self, grad):
        return _unbroadcast(grad, self.shapes[0]), _unbroadcast(grad, self.shapes[1])


class Sub(Function):
    name = "subtract"

    def forward(self, a, b):
        _broadcast_shape(self.name, a, b)
        self.shapes = (a.shape, b.shape)
        return a - b

    def backward(self, grad):
        return _unbroadcast(grad, self.shapes[0]), _unbroadcast(-grad, self.shapes[1])


class Mul(Function):
    name = "multiply"

    def forward(self, a, b):
        _broadcast_shape(self.name, a, b)
        self.a, self.b = a, b
        return a * b

    def backward(self, grad):
        return _unbroadcast(grad * self.b, self.a.shape), _unbroadcast(grad * self.a, self.b.shape)


class Power(Function):
    """x ** k，k 为可微标量"""

    name = "power"

    def forward(self, x, k):
        if k.size != 1:
            raise ContractError(f"{self.name}: 指数必须是标量，实际形状 {k.shape}")
        if not (x > 0).all():
            raise DomainError(f"{self.name}: 底数必须严格为正")
        self.x, self.k_shape = x, k.shape
        self.k = float(k.reshape(-1)[0])
        self.out = x ** self.k
        return self.out

    def backward(self, grad):
        gx = grad * self.k * self.x ** (self.k - 1.0)
        gk = np.sum(grad * self.out * np.log(self.x)).reshape(self.k_shape)
        return gx, gk


class Sigmoid(Function):
    name = "sigmoid"

    def forward(self, x):
        self.out = 0.5 * (1.0 + np.tanh(0.5 * x))
        return self.out

    def backward(self, grad):
        return (grad * self.out * (1.0 - self.out),)


class LeakyRelu(Function):
    name = "relu"

    def forward(self, x, slope: float = 0.0):
        self.positive = x > 0
        self.slope = slope
        return np.where(self.positive, x, slope * x)

    def backward(self, grad):
        return (np.where(self.positive, grad, self.slope * grad),)


class ClampMin(Function):
    name = "clamp_min"

    def forward(self, x, floor: float = 0.0):
        self.keep = x > floor
        return np.where(self.keep, x, floor)

    def backward(self, grad):
        return (np.where(self.keep, grad, 0.0),)


class Log(Function):
    name = "log"

    def forward(self, x):
        if not (x > 0).all():
            raise DomainError(f"{self.name}: 输入必须严格为正")
        self.x = x
        return np.log(x)

    def backward(self, grad):
        return (grad / self.x,)


class Sqrt(Function):
    name = "sqrt"

    def forward(self, x):
        if (x < 0).any():
            raise DomainError(f"{self.name}: 输入不能为负")
        self.out = np.sqrt(x)
        return self.out

    def backward(self, grad):
        return (grad * 0.5 / self.out,)


# ---------------------------------------------------------------- 归约与形状


def _axes(ndim: int, axes: Optional[Union[int, Iterable[int]]]) -> Tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    return tuple(sorted(a % ndim for a in axes))


class Sum(Function):
    name = "sum"

    def forward(self, x, axes=None, keepdims: bool = False):
        self.shape = x.shape
        self.axes = _axes(x.ndim, axes)
        self.keepdims = keepdims
        return x.sum(axis=self.axes, keepdims=keepdims)

    def backward(self, grad):
        if not self.keepdims:
            grad = np.expand_dims(grad, self.axes)
        return (np.broadcast_to(grad, self.shape).copy(),)


class Mean(Function):
    name = "global_mean"

    def forward(self, x, axes=None, keepdims: bool = True):
        self.shape = x.shape
        self.axes = _axes(x.ndim, axes)
        self.keepdims = keepdims
        self.count = int(np.prod([x.shape[a] for a in self.axes]))
        return x.mean(axis=self.axes, keepdims=keepdims)

    def backward(self, grad):
        if not self.keepdims:
            grad = np.expand_dims(grad, self.axes)
        return (np.broadcast_to(grad / self.count, self.shape).copy(),)


class Max(Function):
    """按轴取最大值，并列时取线性下标最小者"""

    name = "max"

    def forward(self, x, axes=None, keepdims: bool = True):
        self.shape = x.shape
        self.axes = _axes(x.ndim, axes)
        self.keepdims = keepdims
        rest = [a for a in range(x.ndim) if a not in self.axes]
        self.perm = rest + list(self.axes)
        moved = x.transpose(self.perm)
        self.moved_shape = moved.shape
        flat = moved.reshape(moved.shape[:len(rest)] + (-1,))
        self.arg = flat.argmax(axis=-1)
        out = np.take_along_axis(flat, self.arg[..., None], axis=-1)[..., 0]
        kept = [1 if a in self.axes else x.shape[a] for a in range(x.ndim)]
        return out.reshape(kept) if keepdims else out

    def backward(self, grad):
        lead = self.moved_shape[:len(self.perm) - len(self.axes)]
        grad = grad.reshape(lead)
        flat = np.zeros(lead + (int(np.prod(self.moved_shape[len(lead):])),))
        np.put_along_axis(flat, self.arg[..., None], grad[..., None], axis=-1)
        moved = flat.reshape(self.moved_shape)
        return (moved.transpose(np.argsort(self.perm)),)


class Reshape(Function):
    name = "reshape"

    def forward(self, x, shape=()):
        self.shape = x.shape
        try:
            return x.reshape(shape)
        except ValueError:
            raise ContractError(f"{self.name}: 无法把 {x.shape} 变形为 {shape}")

    def backward(self, grad):
        return (grad.reshape(self.shape),)


class Transpose(Function):
    name = "transpose"

    def forward(self, x, axes=()):
        self.axes = tuple(axes)
        return x.transpose(self.axes)

    def backward(self, grad):
        return (grad.transpose(np.argsort(self.axes)),)


class SliceAxis(Function):
    name = "slice"

    def forward(self, x, axis: int = 0, start: int = 0, stop: int = 0):
        self.shape = x.shape
        self.index = [slice(None)] * x.ndim
        self.index[axis] = slice(start, stop)
        self.index = tuple(self.index)
        return x[self.index].copy()

    def backward(self, grad):
        full = np.zeros(self.shape)
        full[self.index] = grad
        return (full,)


class Concat(Function):
    name = "concat"

    def forward(self, *xs, axis: int = 0):
        ref = xs[0].shape
        for x in xs[1:]:
            if x.ndim != len(ref) or any(
                x.shape[a] != ref[a] for a in range(len(ref)) if a != axis % len(ref)
            ):
                raise ContractError(f"{self.name}: 形状不兼容 {ref} 与 {x.shape} (axis={axis})")
        self.axis = axis
        self.splits = np.cumsum([x.shape[axis] for x in xs])[:-1]
        return np.concatenate(xs, axis=axis)

    def backward(self, grad):
        return tuple(np.split(grad, self.splits, axis=self.axis))


# ---------------------------------------------------------------- softmax


class Softmax(Function):
    name = "softmax"

    def forward(self, x, axis: int = -1):
        self.axis = axis
        shifted = np.exp(x - x.max(axis=axis, keepdims=True))
        self.out = shifted / shifted.sum(axis=axis, keepdims=True)
        return self.out

    def backward(self, grad):
        inner = (grad * self.out).sum(axis=self.axis, keepdims=True)
        return (self.out * (grad - inner),)


class LogSoftmax(Function):
    name = "log_softmax"

    def forward(self, x, axis: int = -1):
        self.axis = axis
        shifted = x - x.max(axis=axis, keepdims=True)
        log_norm = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
        out = shifted - log_norm
        self.soft = np.exp(out)
        return out

    def backward(self, grad):
        return (grad - self.soft * grad.sum(axis=self.axis, keepdims=True),)


# ---------------------------------------------------------------- 矩阵乘与卷积


class MatMul(Function):
    """批量矩阵乘，前导维度按广播规则处理"""

    name = "matmul"

    def forward(self, a, b):
        if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
            raise ContractError(f"{self.name}: 形状不兼容 {a.shape} 与 {b.shape}")
        self.a, self.b = a, b
        return np.matmul(a, b)

    def backward(self, grad):
        ga = gb = None
        if self.needs_grad[0]:
            ga = _unbroadcast(np.matmul(grad, np.swapaxes(self.b, -1, -2)), self.a.shape)
        if self.needs_grad[1]:
            gb = _unbroadcast(np.matmul(np.swapaxes(self.a, -1, -2), grad), self.b.shape)
        return ga, gb


def _same_padding(kernel: Tuple[int, int, int], dilation: int) -> Tuple[int, int, int]:
    for k in kernel:
        if k % 2 == 0:
            raise ContractError(f"same 填充要求奇数卷积核，实际 {kernel}")
    return tuple(dilation * (k - 1) // 2 for k in kernel)


def _pad3d(x: np.ndarray, pads: Tuple[int, int, int], value: float = 0.0) -> np.ndarray:
    return np.pad(x, ((0, 0), (0, 0)) + tuple((p, p) for p in pads), constant_values=value)


def _conv_windows(xp: np.ndarray, kernel: Tuple[int, int, int], dilation: int) -> np.ndarray:
    """填充后的输入 -> (B, C, T, H, W, kt, kh, kw) 只读窗口视图"""
    span = tuple(dilation * (k - 1) + 1 for k in kernel)
    view = sliding_window_view(xp, span, axis=(2, 3, 4))
    if dilation > 1:
        view = view[..., ::dilation, ::dilation, ::dilation]
    return view


def _grouped_conv(cols: np.ndarray, w: np.ndarray, groups: int) -> np.ndarray:
    cpg = w.shape[1]
    per_group = w.shape[0] // groups
    outs = [
        np.tensordot(
            cols[:, g * cpg:(g + 1) * cpg], w[g * per_group:(g + 1) * per_group],
            axes=([1, 5, 6, 7], [1, 2, 3, 4])
        )
        for g in range(groups)
    ]
    out = outs[0] if groups == 1 else np.concatenate(outs, axis=-1)
    return np.ascontiguousarray(np.moveaxis(out, -1, 1))


# 逐通道卷积展开成稠密 (C, N, N) 算子的元素上限
_DENSE_DEPTHWISE_LIMIT = 1 << 22


@lru_cache(maxsize=32)
def _depthwise_taps(size: Tuple[int, int, int], kernel: Tuple[int, int, int], dilation: int) -> np.ndarray:
    """
    (N_in, N_out) 抽头表：输入位置对输出位置贡献所用的卷积核线性下标

    不相邻的位置对记为 kt*kh*kw（指向补零的一列）。
    """
    grid = np.indices(size).reshape(3, -1)
    pads = _same_padding(kernel, dilation)
    invalid = int(np.prod(kernel))
    taps = np.zeros((grid.shape[1], grid.shape[1]), dtype=np.intp)
    valid = np.ones(taps.shape, dtype=bool)
    for axis in range(3):
        diff = grid[axis][:, None] - grid[axis][None, :] + pads[axis]
        valid &= (diff >= 0) & (diff <= dilation * (kernel[axis] - 1)) & (diff % dilation == 0)
        taps = taps * kernel[axis] + np.clip(diff // dilation, 0, kernel[axis] - 1)
    taps[~valid] = invalid
    taps.setflags(write=False)
    return taps


class Conv3d(Function):
    """
    三维卷积：步长 1、零填充保持 (T, H, W)、膨胀 d、分组 g

    x: (B, Cin, T, H, W)，w: (Cout, Cin/g, kt, kh, kw)

    一般情形用滑动窗口视图加 tensordot；小尺寸的逐通道卷积展开为稠密矩阵乘。
    """

    name = "conv3d"

    def forward(self, x, w, dilation: int = 1, groups: int = 1):
        if x.ndim != 5 or w.ndim != 5:
            raise ContractError(f"{self.name}: 需要 5 维输入与卷积核，实际 {x.shape} 与 {w.shape}")
        B, cin, T, H, W = x.shape
        cout, cpg, kt, kh, kw = w.shape
        if cin % groups or cout % groups or cin // groups != cpg:
            raise ContractError(
                f"{self.name}: 通道不兼容 输入 {x.shape} 卷积核 {w.shape} groups={groups}"
            )
        self.kernel = (kt, kh, kw)
        self.pads = _same_padding(self.kernel, dilation)
        self.dilation = dilation
        self.groups = groups
        self.x, self.w = x, w

        n = T * H * W
        self.dense = cpg == 1 and cout == cin and cin * n * n <= _DENSE_DEPTHWISE_LIMIT
        if self.dense:
            taps = _depthwise_taps((T, H, W), self.kernel, dilation)
            wpad = np.concatenate([w.reshape(cout, -1), np.zeros((cout, 1))], axis=1)
            self.op = wpad[:, taps]
            self.xc = x.reshape(B, cin, n).transpose(1, 0, 2)
            out = np.matmul(self.xc, self.op)
            return out.transpose(1, 0, 2).reshape(B, cout, T, H, W)

        self.cols = _conv_windows(_pad3d(x, self.pads), self.kernel, dilation)
        return _grouped_conv(self.cols, w, groups)

    def backward(self, grad):
        if self.dense:
            return self._dense_backward(grad)
        gx = gw = None
        if self.needs_grad[1]:
            cpg = self.w.shape[1]
            per_group = self.w.shape[0] // self.groups
            gw = np.concatenate([
                np.tensordot(
                    grad[:, g * per_group:(g + 1) * per_group], self.cols[:, g * cpg:(g + 1) * cpg],
                    axes=([0, 2, 3, 4], [0, 2, 3, 4])
                )
                for g in range(self.groups)
            ], axis=0)
        if self.needs_grad[0]:
            # 转置卷积：翻转卷积核并交换组内输入/输出通道后做同尺寸卷积
            cout, cpg = self.w.shape[:2]
            per_group = cout // self.groups
            flipped = self.w.reshape(self.groups, per_group, cpg, *self.kernel).transpose(0, 2, 1, 3, 4, 5)
            flipped = flipped.reshape(self.groups * cpg, per_group, *self.kernel)[..., ::-1, ::-1, ::-1]
            cols = _conv_windows(_pad3d(grad, self.pads), self.kernel, self.dilation)
            gx = _grouped_conv(cols, flipped, self.groups)
        return gx, gw

    def _dense_backward(self, grad):
        B, C, T, H, W = grad.shape
        gc = grad.reshape(B, C, -1).transpose(1, 0, 2)
        gx = gw = None
        if self.needs_grad[0]:
            gx = np.matmul(gc, self.op.transpose(0, 2, 1)).transpose(1, 0, 2).reshape(self.x.shape)
        if self.needs_grad[1]:
            taps = _depthwise_taps((T, H, W), self.kernel, self.dilation)
            width = int(np.prod(self.kernel)) + 1
            gop = np.matmul(self.xc.transpose(0, 2, 1), gc)
            index = np.arange(C)[:, None, None] * width + taps[None]
            gw = np.bincount(index.ravel(), weights=gop.ravel(), minlength=C * width)
            gw = gw.reshape(C, width)[:, :-1].reshape(self.w.shape)
        return gx, gw


class _Pool3d(Function):
    """三维池化公共部分：滑动窗口视图"""

    pad_value = 0.0

    def _windows(self, x, kernel, stride, padding):
        self.x_shape = x.shape
        self.kernel, self.stride, self.padding = kernel, stride, padding
        xp = _pad3d(x, padding, self.pad_value)
        self.padded_shape = xp.shape
        if any(xp.shape[2 + i] < kernel[i] for i in range(3)):
            raise ContractError(f"{self.name}: 输入 {x.shape} 小于池化窗口 {kernel}")
        st, sh, sw = stride
        view = sliding_window_view(xp, kernel, axis=(2, 3, 4))[:, :, ::st, ::sh, ::sw]
        self.out_shape = view.shape[2:5]
        return view

    def _crop(self, gxp):
        pt, ph, pw = self.padding
        _, _, T, H, W = self.x_shape
        return gxp[:, :, pt:pt + T, ph:ph + H, pw:pw + W]


def _pool_args(kernel, stride, padding):
    kernel = (kernel,) * 3 if isinstance(kernel, int) else tuple(kernel)
    stride = (1, 1, 1) if stride is None else ((stride,) * 3 if isinstance(stride, int) else tuple(stride))
    if padding == "same":
        padding = tuple(k // 2 for k in kernel)
    elif padding is None:
        padding = (0, 0, 0)
    return kernel, stride, tuple(padding)


class MaxPool3d(_Pool3d):
    """最大池化，并列时梯度只回传给窗口内线性下标最小的位置"""

    name = "maxpool3d"
    pad_value = -np.inf

    def forward(self, x, kernel=3, stride=None, padding="same"):
        view = self._windows(x, *_pool_args(kernel, stride, padding))
        flat = view.reshape(view.shape[:5] + (-1,))
        self.arg = flat.argmax(axis=-1)
        return np.take_along_axis(flat, self.arg[..., None], axis=-1)[..., 0]

    def backward(self, grad):
        B, C, To, Ho, Wo = self.arg.shape
        _, _, Tp, Hp, Wp = self.padded_shape
        st, sh, sw = self.stride
        a, b, c = np.unravel_index(self.arg, self.kernel)
        t = np.arange(To)[:, None, None] * st + a
        h = np.arange(Ho)[:, None] * sh + b
        w = np.arange(Wo) * sw + c
        bc = np.arange(B * C).reshape(B, C, 1, 1, 1)
        flat = ((bc * Tp + t) * Hp + h) * Wp + w
        gxp = np.bincount(flat.ravel(), weights=grad.ravel(), minlength=B * C * Tp * Hp * Wp)
        return (self._crop(gxp.reshape(self.padded_shape)),)


class AvgPool3d(_Pool3d):
    """平均池化，只对有效（非填充）元素求平均"""

    name = "avgpool3d"

    def forward(self, x, kernel=3, stride=None, padding="same"):
        args = _pool_args(kernel, stride, padding)
        view = self._windows(x, *args)
        ones = _pad3d(np.ones((1, 1) + x.shape[2:]), args[2])
        st, sh, sw = args[1]
        counts = sliding_window_view(ones, args[0], axis=(2, 3, 4))[:, :, ::st, ::sh, ::sw]
        self.count = counts.sum(axis=(-3, -2, -1))
        return view.sum(axis=(-3, -2, -1)) / self.count

    def backward(self, grad):
        gxp = np.zeros(self.padded_shape)
        share = grad / self.count
        To, Ho, Wo = self.out_shape
        st, sh, sw = self.stride
        for a, b, c in itertools.product(*(range(k) for k in self.kernel)):
            gxp[:, :, a:a + st * (To - 1) + 1:st, b:b + sh * (Ho - 1) + 1:sh, c:c + sw * (Wo - 1) + 1:sw] += share
        return (self._crop(gxp),)


# ---------------------------------------------------------------- 函数式接口


def add(a, b) -> Tensor:
    return Add.apply(a, b)


def sub(a, b) -> Tensor:
    return Sub.apply(a, b)


def mul(a, b) -> Tensor:
    return Mul.apply(a, b)


def scale(x, factor) -> Tensor:
    """广播缩放：x * factor（factor 可为按通道/位置/帧广播的张量）"""
    return Mul.apply(x, factor)


def matmul(a, b) -> Tensor:
    return MatMul.apply(a, b)


def conv3d(x, w, dilation: int = 1, groups: int = 1) -> Tensor:
    return Conv3d.apply(x, w, dilation=dilation, groups=groups)


def avgpool3d(x, kernel=3, stride=None, padding="same") -> Tensor:
    return AvgPool3d.apply(x, kernel=kernel, stride=stride, padding=padding)


def maxpool3d(x, kernel=3, stride=None, padding="same") -> Tensor:
    return MaxPool3d.apply(x, kernel=kernel, stride=stride, padding=padding)


def global_mean(x, axes=None, keepdims: bool = True) -> Tensor:
    return Mean.apply(x, axes=axes, keepdims=keepdims)


def sum_(x, axes=None, keepdims: bool = False) -> Tensor:
    return Sum.apply(x, axes=axes, keepdims=keepdims)


def max_(x, axes=None, keepdims: bool = True) -> Tensor:
    return Max.apply(x, axes=axes, keepdims=keepdims)


def power(x, k) -> Tensor:
    return Power.apply(x, k)


def sigmoid(x) -> Tensor:
    return Sigmoid.apply(x)


def relu(x) -> Tensor:
    return LeakyRelu.apply(x, slope=0.0)


def leaky_relu(x, slope: float) -> Tensor:
    return LeakyRelu.apply(x, slope=slope)


def clamp_min(x, floor: float) -> Tensor:
    return ClampMin.apply(x, floor=floor)


def softmax(x, axis: int = -1) -> Tensor:
    return Softmax.apply(x, axis=axis)


def log_softmax(x, axis: int = -1) -> Tensor:
    return LogSoftmax.apply(x, axis=axis)


def log(x) -> Tensor:
    return Log.apply(x)


def sqrt(x) -> Tensor:
    return Sqrt.apply(x)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    return Concat.apply(*tensors, axis=axis)


def reshape(x, shape: Tuple[int, ...]) -> Tensor:
    return Reshape.apply(x, shape=tuple(shape))


def transpose(x, axes: Tuple[int, ...]) -> Tensor:
    return Transpose.apply(x, axes=tuple(axes))


def slice_axis(x, axis: int, start: int, stop: int) -> Tensor:
    return SliceAxis.apply(x, axis=axis, start=start, stop=stop)


# ---------------------------------------------------------------- 反向传播


class GradientMap:
    """叶子参数的梯度表，不可达的叶子返回全零"""

    def __init__(self):
        self._grads: Dict[int, Tuple[Tensor, np.ndarray]] = {}

    def accumulate(self, leaf: Tensor, grad: np.ndarray):
        key = id(leaf)
        if key in self._grads:
            self._grads[key] = (leaf, self._grads[key][1] + grad)
        else:
            self._grads[key] = (leaf, np.array(grad, dtype=np.float64))

    def __getitem__(self, leaf: Tensor) -> np.ndarray:
        entry = self._grads.get(id(leaf))
        return entry[1] if entry is not None else np.zeros_like(leaf.data)

    def __contains__(self, leaf: Tensor) -> bool:
        return id(leaf) in self._grads

    def __len__(self) -> int:
        return len(self._grads)


def backward(loss: Tensor) -> GradientMap:
    """
    从标量损失反向传播

    Args:
        loss: 记录在活动记录带上的标量张量

    Returns:
        叶子参数梯度表；同时写入每个可达叶子的 .grad
    """
    if loss.size != 1:
        raise ContractError(f"backward: 损失必须是标量，实际形状 {loss.shape}")

    grads = GradientMap()
    if loss.node_id is None and loss.requires_grad:
        grads.accumulate(loss, np.ones_like(loss.data))
        return grads
    tape = active_tape()
    if tape is None:
        raise ContractError("backward: 没有活动的记录带，请在 with Tape() 中计算损失")
    if loss.node_id is None:
        return grads
    if loss.tape is not tape:
        raise ContractError("backward: 损失不在当前活动记录带上")

    pending: Dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
    for node_id in range(loss.node_id, -1, -1):
        g = pending.pop(node_id, None)
        if g is None:
            continue
        node = tape.nodes[node_id]
        for parent, pg in zip(node.ctx.parents, node.ctx.backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent.ctx is None:
                grads.accumulate(parent, pg)
            elif parent.node_id in pending:
                pending[parent.node_id] = pending[parent.node_id] + pg
            else:
                pending[parent.node_id] = pg

    for _, (leaf, g) in grads._grads.items():
        leaf.grad = g
    return grads
