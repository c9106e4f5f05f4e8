"""
剪影序列服务
加载、校验、分类和合成二值剪影序列
"""
import math
import os
import re
from enum import IntEnum
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from utils.errors import ContractError, FormatError, InputError, ParameterError
from utils.helpers import list_frame_files
from utils.logger import get_logger

logger = get_logger("silhouette")


class PixelClass(IntEnum):
    """像素类别"""

    BACKGROUND = 0
    FOREGROUND = 1
    BOUNDARY = 2


class SilhouetteFrame:
    """二值剪影帧，0 为背景，1 为前景"""

    def __init__(self, mask: np.ndarray):
        mask = np.asarray(mask)
        if mask.ndim != 2 or mask.shape[0] < 1 or mask.shape[1] < 1:
            raise ContractError(f"剪影帧必须是非空二维网格，实际形状 {mask.shape}")
        if not np.isin(mask, (0, 1)).all():
            raise ContractError("剪影帧只能包含 0 和 1")
        self.mask = mask.astype(np.uint8, copy=True)
        self.mask.setflags(write=False)

    @property
    def height(self) -> int:
        return self.mask.shape[0]

    @property
    def width(self) -> int:
        return self.mask.shape[1]

    @property
    def foreground_count(self) -> int:
        return int(self.mask.sum())

    def __eq__(self, other) -> bool:
        return isinstance(other, SilhouetteFrame) and np.array_equal(self.mask, other.mask)

    def __repr__(self):
        return f"<SilhouetteFrame {self.width}x{self.height} fore={self.foreground_count}>"


class PixelClassMap:
    """像素划分：边界 / 前景内部 / 背景"""

    def __init__(self, classes: np.ndarray):
        self.classes = np.asarray(classes, dtype=np.int8)
        self.classes.setflags(write=False)

    @property
    def height(self) -> int:
        return self.classes.shape[0]

    @property
    def width(self) -> int:
        return self.classes.shape[1]

    @property
    def boundary(self) -> np.ndarray:
        return self.classes == PixelClass.BOUNDARY

    @property
    def foreground(self) -> np.ndarray:
        return self.classes == PixelClass.FOREGROUND

    @property
    def background(self) -> np.ndarray:
        return self.classes == PixelClass.BACKGROUND

    def counts(self) -> Tuple[int, int, int]:
        """返回 (边界, 前景, 背景) 像素数"""
        return int(self.boundary.sum()), int(self.foreground.sum()), int(self.background.sum())

    def __repr__(self):
        b, f, g = self.counts()
        return f"<PixelClassMap {self.width}x{self.height} B={b} F={f} G={g}>"


class SilhouetteSequence:
    """剪影序列，所有帧尺寸相同"""

    def __init__(
        self,
        frames: Sequence[SilhouetteFrame],
        subject_id: Optional[str] = None,
        view_id: Optional[str] = None
    ):
        frames = list(frames)
        if not frames:
            raise ContractError("剪影序列至少包含一帧")
        shape = frames[0].mask.shape
        for i, frame in enumerate(frames):
            if frame.mask.shape != shape:
                raise ContractError(
                    f"第 {i} 帧尺寸 {frame.mask.shape} 与首帧 {shape} 不一致"
                )
        self.frames = frames
        self.subject_id = subject_id
        self.view_id = view_id

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.frames[0].mask.shape

    def to_array(self) -> np.ndarray:
        """转换为 (T, H, W) 的 uint8 数组"""
        return np.stack([f.mask for f in self.frames])

    @classmethod
    def from_array(
        cls,
        masks: np.ndarray,
        subject_id: Optional[str] = None,
        view_id: Optional[str] = None
    ) -> "SilhouetteSequence":
        return cls([SilhouetteFrame(m) for m in masks], subject_id, view_id)

    def __repr__(self):
        h, w = self.shape
        return f"<SilhouetteSequence {self.subject_id}/{self.view_id} T={len(self)} {w}x{h}>"


class WalkerParams:
    """合成行人参数"""

    def __init__(
        self,
        torso_axes: Tuple[float, float],
        limb_amplitude: float,
        stride_period: int,
        phase: float = 0.0,
        noise_prob: float = 0.0,
        limb_width: float = 2.0
    ):
        if stride_period < 2:
            raise ParameterError(f"stride_period 必须 >= 2，实际 {stride_period}")
        if not 0.0 <= noise_prob <= 1.0:
            raise ParameterError(f"noise_prob 必须在 [0, 1] 内，实际 {noise_prob}")
        if min(torso_axes) <= 0 or limb_amplitude < 0 or limb_width <= 0:
            raise ParameterError("躯干半轴和肢体宽度必须为正，摆幅不能为负")
        self.torso_axes = (float(torso_axes[0]), float(torso_axes[1]))
        self.limb_amplitude = float(limb_amplitude)
        self.stride_period = int(stride_period)
        self.phase = float(phase)
        self.noise_prob = float(noise_prob)
        self.limb_width = float(limb_width)

    def __repr__(self):
        return (
            f"<WalkerParams torso={self.torso_axes} amp={self.limb_amplitude} "
            f"period={self.stride_period} phase={self.phase:.2f} noise={self.noise_prob}>"
        )


# PGM 头部中的空白字符
_PGM_WHITESPACE = b" \t\r\n\v\f"


def _read_pgm_token(data: bytes, pos: int) -> Tuple[bytes, int, int]:
    """读取 PGM 头部的下一个 token，跳过空白和注释"""
    n = len(data)
    while pos < n:
        if data[pos] in _PGM_WHITESPACE:
            pos += 1
        elif data[pos:pos + 1] == b"#":
            while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        else:
            break
    start = pos
    while pos < n and data[pos] not in _PGM_WHITESPACE and data[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise FormatError("PGM 头部被截断", start)
    return data[start:pos], start, pos


def load_pgm(data: bytes, source: Optional[str] = None) -> SilhouetteFrame:
    """
    解析二进制 PGM (P5) 为剪影帧

    Args:
        data: PGM 字节流
        source: 来源名称（用于错误信息）

    Returns:
        像素值 >= 128 为前景的剪影帧
    """
    if data[:2] != b"P5":
        raise FormatError(f"不支持的 PGM 魔数 {data[:2]!r}，仅支持 P5", 0, source)

    pos = 2
    values = []
    for field in ("width", "height", "maxval"):
        token, start, pos = _read_pgm_token(data, pos)
        if not re.fullmatch(rb"\d+", token):
            raise FormatError(f"PGM {field} 不是整数: {token!r}", start, source)
        values.append((int(token), start))

    (width, w_at), (height, h_at), (maxval, m_at) = values
    if width == 0:
        raise FormatError("PGM 宽度为 0", w_at, source)
    if height == 0:
        raise FormatError("PGM 高度为 0", h_at, source)
    if not 0 < maxval <= 255:
        raise FormatError(f"PGM maxval {maxval} 超出 1..255", m_at, source)
    if pos >= len(data) or data[pos] not in _PGM_WHITESPACE:
        raise FormatError("PGM 头部后缺少分隔空白", pos, source)
    pos += 1

    expected = width * height
    payload = data[pos:pos + expected]
    if len(payload) < expected:
        raise FormatError(
            f"PGM 数据被截断: 需要 {expected} 字节，实际 {len(payload)}",
            pos + len(payload),
            source
        )

    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(height, width)
    return SilhouetteFrame((pixels >= 128).astype(np.uint8))


def classify_pixels(frame: SilhouetteFrame) -> PixelClassMap:
    """
    像素分类：前景像素的 4 邻域中存在背景或网格外部时为边界

    Args:
        frame: 剪影帧

    Returns:
        像素类别图
    """
    mask = frame.mask.astype(bool)
    # 网格外部视为背景
    padded = np.pad(mask, 1, mode="constant", constant_values=False)
    interior = (
        padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    )

    classes = np.full(mask.shape, PixelClass.BACKGROUND, dtype=np.int8)
    classes[mask & interior] = PixelClass.FOREGROUND
    classes[mask & ~interior] = PixelClass.BOUNDARY
    return PixelClassMap(classes)


def _segment_distance(
    xs: np.ndarray,
    ys: np.ndarray,
    start: Tuple[float, float],
    end: Tuple[float, float]
) -> np.ndarray:
    """网格点到线段的距离"""
    (x0, y0), (x1, y1) = start, end
    dx, dy = x1 - x0, y1 - y0
    length_sq = dx * dx + dy * dy
    if length_sq == 0:
        return np.hypot(xs - x0, ys - y0)
    t = np.clip(((xs - x0) * dx + (ys - y0) * dy) / length_sq, 0.0, 1.0)
    return np.hypot(xs - (x0 + t * dx), ys - (y0 + t * dy))


def synth_walker(
    params: WalkerParams,
    T: int,
    H: int,
    W: int,
    seed: int,
    subject_id: Optional[str] = None,
    view_id: Optional[str] = None
) -> SilhouetteSequence:
    """
    合成行走剪影序列：椭圆躯干 + 两条摆动的腿

    Args:
        params: 行人参数
        T: 帧数
        H, W: 帧尺寸
        seed: 随机种子（仅影响椒盐噪声）

    Returns:
        剪影序列，对相同输入逐位确定
    """
    if T < 1:
        raise ParameterError(f"帧数必须 >= 1，实际 {T}")

    rx, ry = params.torso_axes
    cx = (W - 1) / 2.0
    cy = round(0.35 * (H - 1))
    hip_y = cy + ry
    foot_y = H - 2
    half_width = params.limb_width / 2.0
    amplitude = params.limb_amplitude

    if cx - rx < 0 or cx + rx > W - 1 or cy - ry < 0:
        raise ParameterError(f"躯干 {params.torso_axes} 超出 {W}x{H} 网格")
    if hip_y >= foot_y:
        raise ParameterError(f"腿部长度不足: 髋部 y={hip_y}，脚部 y={foot_y}")
    if cx - amplitude - half_width < 0 or cx + amplitude + half_width > W - 1:
        raise ParameterError(f"摆幅 {amplitude} 超出 {W} 像素宽度")

    ys, xs = np.mgrid[0:H, 0:W].astype(np.float64)
    torso = ((xs - cx) / rx) ** 2 + ((ys - cy) / ry) ** 2 <= 1.0

    rng = np.random.default_rng(seed)
    noise = rng.random((T, H, W)) < params.noise_prob

    masks = np.empty((T, H, W), dtype=np.uint8)
    for t in range(T):
        # 按相位取模保证严格周期性
        step = t % params.stride_period
        swing = math.sin(2.0 * math.pi * step / params.stride_period + params.phase)
        mask = torso.copy()
        for side in (1.0, -1.0):
            foot_x = cx + side * amplitude * swing
            mask |= _segment_distance(xs, ys, (cx, hip_y), (foot_x, foot_y)) <= half_width
        mask ^= noise[t]
        if not mask.any():
            mask[int(cy), int(round(cx))] = True
        masks[t] = mask

    return SilhouetteSequence.from_array(masks, subject_id=subject_id, view_id=view_id)


def identity_params(identity: int, H: int, W: int, seed: int, noise_prob: float = 0.0) -> WalkerParams:
    """为某个身份生成稳定的体型与步态参数"""
    rng = np.random.default_rng([seed, identity])
    cx = (W - 1) / 2.0
    cy = round(0.35 * (H - 1))
    rx = rng.uniform(0.12, 0.22) * W
    ry = min(rng.uniform(0.12, 0.2) * H, cy, H - 3 - cy - 1)
    max_amp = cx - 1.5
    amplitude = rng.uniform(0.35, 0.9) * max_amp
    period = int(rng.integers(6, 13))
    return WalkerParams(
        torso_axes=(max(rx, 1.0), max(ry, 1.0)),
        limb_amplitude=amplitude,
        stride_period=period,
        noise_prob=noise_prob
    )


def build_corpus(
    num_ids: int,
    seqs_per_id: int,
    T: int,
    H: int,
    W: int,
    seed: int,
    noise_prob: float = 0.0,
    first_sequence: int = 0
) -> List[SilhouetteSequence]:
    """
    合成带标签的语料库

    Args:
        num_ids: 身份数
        seqs_per_id: 每个身份的序列数
        first_sequence: 序列编号起点（用于生成与训练集不重叠的留出序列）

    Returns:
        剪影序列列表，subject_id 为 "idNN"，view_id 为 "seqNN"
    """
    corpus = []
    for identity in range(num_ids):
        base = identity_params(identity, H, W, seed, noise_prob)
        for s in range(first_sequence, first_sequence + seqs_per_id):
            rng = np.random.default_rng([seed, identity, s])
            params = WalkerParams(
                torso_axes=base.torso_axes,
                limb_amplitude=base.limb_amplitude,
                stride_period=base.stride_period,
                phase=float(rng.uniform(0.0, 2.0 * math.pi)),
                noise_prob=noise_prob,
                limb_width=base.limb_width
            )
            corpus.append(synth_walker(
                params, T, H, W,
                seed=int(rng.integers(0, 2 ** 63 - 1)),
                subject_id=f"id{identity:02d}",
                view_id=f"seq{s:02d}"
            ))
    logger.info(f"合成语料: {num_ids} 个身份 × {seqs_per_id} 条序列 × {T} 帧 ({W}x{H})")
    return corpus


def load_sequence_dir(
    directory: str,
    subject_id: Optional[str] = None,
    view_id: Optional[str] = None
) -> SilhouetteSequence:
    """读取按零填充数字文件名排序的 PGM 帧目录"""
    paths = list_frame_files(directory)
    if not paths:
        raise InputError(f"目录中没有 PGM 帧: {directory}")
    frames = []
    for path in paths:
        with open(path, "rb") as f:
            frames.append(load_pgm(f.read(), source=path))
    return SilhouetteSequence(frames, subject_id=subject_id, view_id=view_id)


def load_manifest(manifest_path: str) -> List[Tuple[SilhouetteSequence, str]]:
    """
    读取序列清单 CSV (subject_id, view_id, path)

    Returns:
        (序列, 帧目录) 列表，路径相对于清单所在目录
    """
    try:
        table = pd.read_csv(manifest_path, dtype=str)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise InputError(f"无法读取清单 {manifest_path}: {e}")

    missing = {"subject_id", "view_id", "path"} - set(table.columns)
    if missing:
        raise InputError(f"清单缺少列: {', '.join(sorted(missing))}")

    root = os.path.dirname(os.path.abspath(manifest_path))
    sequences = []
    for row in table.itertuples(index=False):
        directory = os.path.join(root, row.path)
        sequences.append((load_sequence_dir(directory, row.subject_id, row.view_id), directory))
    logger.info(f"从清单加载 {len(sequences)} 条序列: {manifest_path}")
    return sequences


def load_sequences(path: str) -> List[Tuple[SilhouetteSequence, str]]:
    """读取清单文件、含 manifest.csv 的目录或单个帧目录"""
    if os.path.isfile(path):
        return load_manifest(path)
    manifest = os.path.join(path, "manifest.csv")
    if os.path.isfile(manifest):
        return load_manifest(manifest)
    if os.path.isdir(path):
        name = os.path.basename(os.path.normpath(path))
        return [(load_sequence_dir(path, view_id=name), path)]
    raise InputError(f"输入不存在: {path}")
