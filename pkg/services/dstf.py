"""
DSTF 变换服务
双向距离变换 (Bi-DT) + 前景/背景符号分离 + 分区域归一化
"""
from concurrent.futures import ThreadPoolExecutor
from typing import List, Optional, Sequence, Tuple

import numpy as np

from services.silhouette import (
    PixelClassMap,
    SilhouetteFrame,
    SilhouetteSequence,
    classify_pixels,
)
from utils.errors import ContractError, EmptyBoundaryError
from utils.logger import get_logger

logger = get_logger("dstf")

DEGENERATE_POLICIES = ("skip", "zero", "error")
NORMALIZATIONS = ("per-frame", "per-seq")


class BiDtFrame:
    """双向距离图：每个像素到最近边界像素的欧氏距离"""

    def __init__(self, squared: np.ndarray):
        self.squared = np.asarray(squared, dtype=np.int64)
        self.dist = np.sqrt(self.squared.astype(np.float64))

    @property
    def height(self) -> int:
        return self.dist.shape[0]

    @property
    def width(self) -> int:
        return self.dist.shape[1]


class DstfFrame:
    """DSTF 帧：前景为正、背景为负、边界为零，取值 [-1, 1]"""

    def __init__(self, field: np.ndarray):
        self.field = np.asarray(field, dtype=np.float64)

    @property
    def height(self) -> int:
        return self.field.shape[0]

    @property
    def width(self) -> int:
        return self.field.shape[1]

    def __repr__(self):
        return f"<DstfFrame {self.width}x{self.height} min={self.field.min():.3f} max={self.field.max():.3f}>"


class DstfSequence:
    """DSTF 序列"""

    def __init__(self, frames: Sequence[DstfFrame], source_indices: Optional[List[int]] = None):
        self.frames = list(frames)
        if self.frames:
            shape = self.frames[0].field.shape
            if any(f.field.shape != shape for f in self.frames):
                raise ContractError("DSTF 序列中各帧尺寸必须一致")
        self.source_indices = source_indices if source_indices is not None else list(range(len(self.frames)))

    def __len__(self) -> int:
        return len(self.frames)

    def to_array(self) -> np.ndarray:
        """转换为 (T, H, W) 的 float64 数组"""
        return np.stack([f.field for f in self.frames])

    @classmethod
    def from_array(cls, fields: np.ndarray) -> "DstfSequence":
        return cls([DstfFrame(f) for f in fields])


def _column_distances(boundary: np.ndarray) -> np.ndarray:
    """
    逐列一维变换：每个像素沿列方向到最近边界像素的整数距离

    没有边界像素的列返回 >= H 的哨兵值。
    """
    H, W = boundary.shape
    sentinel = H + W + 1
    g = np.empty((H, W), dtype=np.int64)
    g[0] = np.where(boundary[0], 0, sentinel)
    for y in range(1, H):
        g[y] = np.where(boundary[y], 0, np.minimum(g[y - 1] + 1, sentinel))
    for y in range(H - 2, -1, -1):
        g[y] = np.minimum(g[y], g[y + 1] + 1)
    return g


def _row_envelope(f_row: List[Optional[int]]) -> List[int]:
    """
    逐行抛物线下包络，整数精确比较

    f_row[q] 为列 q 处的平方距离，None 表示无穷大。
    交点以 (分子, 分母) 表示，分母恒为正；None 表示 -inf。
    """
    v: List[int] = []
    z: List[Optional[Tuple[int, int]]] = []

    for q, fq in enumerate(f_row):
        if fq is None:
            continue
        hq = fq + q * q
        while True:
            if not v:
                s = None
                break
            p = v[-1]
            num = hq - (f_row[p] + p * p)
            den = 2 * (q - p)
            if z[-1] is None:
                s = (num, den)
                break
            zn, zd = z[-1]
            if num * zd <= zn * den:
                v.pop()
                z.pop()
                continue
            s = (num, den)
            break
        v.append(q)
        z.append(s)

    out = []
    k = 0
    for x in range(len(f_row)):
        while k + 1 < len(v) and z[k + 1][0] < x * z[k + 1][1]:
            k += 1
        d = x - v[k]
        out.append(d * d + f_row[v[k]])
    return out


def edt_squared(classes: PixelClassMap) -> np.ndarray:
    """
    精确欧氏距离变换（平方），两遍下包络算法

    Args:
        classes: 像素类别图

    Returns:
        (H, W) int64 数组，每个像素到最近边界像素的平方距离
    """
    boundary = classes.boundary
    if not boundary.any():
        raise EmptyBoundaryError("边界像素集合为空，无法计算距离变换")

    H, W = boundary.shape
    g = _column_distances(boundary)
    finite = g < H

    out = np.empty((H, W), dtype=np.int64)
    for y in range(H):
        row = [int(g[y, x]) ** 2 if finite[y, x] else None for x in range(W)]
        out[y] = _row_envelope(row)
    return out


def bi_dt(frame: SilhouetteFrame, classes: Optional[PixelClassMap] = None) -> BiDtFrame:
    """计算剪影帧的双向距离变换，边界像素为 0"""
    if classes is None:
        classes = classify_pixels(frame)
    return BiDtFrame(edt_squared(classes))


def _region_max(values: np.ndarray, region: np.ndarray) -> float:
    return float(values[region].max()) if region.any() else 0.0


def sign_and_normalize(
    bd: BiDtFrame,
    classes: PixelClassMap,
    fore_max: Optional[float] = None,
    back_max: Optional[float] = None
) -> DstfFrame:
    """
    符号分离 + 分区域归一化

    前景像素 → +dist / 前景最大距离；背景像素 → -dist / 背景最大距离；边界为 0。
    区域为空或最大距离为 0 时该区域置零。

    Args:
        bd: 双向距离图
        classes: 像素类别图
        fore_max, back_max: 外部给定的区域最大距离（按序列归一化时使用）
    """
    if bd.dist.shape != classes.classes.shape:
        raise ContractError(
            f"距离图尺寸 {bd.dist.shape} 与类别图尺寸 {classes.classes.shape} 不一致"
        )

    fore = classes.foreground
    back = classes.background
    if fore_max is None:
        fore_max = _region_max(bd.dist, fore)
    if back_max is None:
        back_max = _region_max(bd.dist, back)

    field = np.zeros_like(bd.dist)
    if fore_max > 0:
        field[fore] = bd.dist[fore] / fore_max
    if back_max > 0:
        field[back] = -bd.dist[back] / back_max
    return DstfFrame(field)


def _unsigned_normalize(bd: BiDtFrame, peak: Optional[float] = None) -> DstfFrame:
    """无符号 Bi-DT，按全局最大距离归一化到 [0, 1]"""
    if peak is None:
        peak = float(bd.dist.max())
    field = bd.dist / peak if peak > 0 else np.zeros_like(bd.dist)
    return DstfFrame(field)


def _frame_bidt(frame: SilhouetteFrame) -> Tuple[PixelClassMap, Optional[BiDtFrame]]:
    classes = classify_pixels(frame)
    if not classes.boundary.any():
        return classes, None
    return classes, BiDtFrame(edt_squared(classes))


def transform_sequence(
    seq: SilhouetteSequence,
    policy: str = "zero",
    normalization: str = "per-frame",
    signed: bool = True,
    threads: int = 1,
    source: Optional[str] = None
) -> DstfSequence:
    """
    将剪影序列变换为 DSTF 序列

    Args:
        seq: 剪影序列
        policy: 退化帧策略 skip | zero | error
        normalization: per-frame（逐帧）或 per-seq（整条序列共用区域最大值）
        signed: False 时输出无符号 Bi-DT（消融对照）
        threads: 逐帧并行线程数，输出顺序与输入一致
        source: 来源名称（用于错误信息）

    Returns:
        DSTF 序列；skip 策略下 source_indices 记录保留的帧序号
    """
    if policy not in DEGENERATE_POLICIES:
        raise ContractError(f"未知的退化帧策略: {policy}")
    if normalization not in NORMALIZATIONS:
        raise ContractError(f"未知的归一化方式: {normalization}")

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_frame_bidt, seq.frames))
    else:
        results = [_frame_bidt(f) for f in seq.frames]

    fore_max = back_max = peak = None
    if normalization == "per-seq":
        valid = [(c, bd) for c, bd in results if bd is not None]
        fore_max = max((_region_max(bd.dist, c.foreground) for c, bd in valid), default=0.0)
        back_max = max((_region_max(bd.dist, c.background) for c, bd in valid), default=0.0)
        peak = max((float(bd.dist.max()) for _, bd in valid), default=0.0)

    frames = []
    indices = []
    for index, (classes, bd) in enumerate(results):
        if bd is None:
            if policy == "error":
                raise EmptyBoundaryError(
                    f"第 {index} 帧没有边界像素" + (f" ({source})" if source else ""),
                    frame_index=index,
                    path=source
                )
            if policy == "skip":
                logger.warning(f"跳过退化帧 #{index}" + (f" ({source})" if source else ""))
                continue
            frames.append(DstfFrame(np.zeros(classes.classes.shape, dtype=np.float64)))
            indices.append(index)
            continue

        if signed:
            frames.append(sign_and_normalize(bd, classes, fore_max, back_max))
        else:
            frames.append(_unsigned_normalize(bd, peak))
        indices.append(index)

    logger.debug(f"DSTF 变换完成: {len(frames)}/{len(seq)} 帧")
    return DstfSequence(frames, source_indices=indices)
