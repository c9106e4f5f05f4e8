"""
描述子信息密度度量
图像熵、步态熵图 (GEnI)、帧差能量、剪影/DSTF 熵比
"""
from typing import Dict, List, Tuple

import numpy as np
import pandas as pd

from services.dstf import DstfSequence
from services.silhouette import SilhouetteSequence
from utils.errors import ContractError, DataError, DegenerateInputError
from utils.logger import get_logger

logger = get_logger("metrics")

# 各描述子的直方图取值范围（固定范围，保证帧间可比）
SILHOUETTE_RANGE = (0.0, 1.0)
DSTF_RANGE = (-1.0, 1.0)

# 帧差判定阈值
CHANGE_TOLERANCE = 1e-6


class EntropyReport:
    """逐帧图像熵统计"""

    def __init__(self, per_frame_entropy: List[float], bins: int):
        self.per_frame_entropy = list(per_frame_entropy)
        self.bins = bins
        self.mean_entropy = float(np.mean(self.per_frame_entropy)) if self.per_frame_entropy else 0.0

    def __repr__(self):
        return f"<EntropyReport T={len(self.per_frame_entropy)} mean={self.mean_entropy:.3f} bits bins={self.bins}>"


class GeniMap:
    """步态熵图：逐像素的时间二值熵（比特）"""

    def __init__(self, entropy: np.ndarray):
        self.entropy = np.asarray(entropy, dtype=np.float64)

    @property
    def height(self) -> int:
        return self.entropy.shape[0]

    @property
    def width(self) -> int:
        return self.entropy.shape[1]


def image_entropy(frame: np.ndarray, bins: int = 256, value_range: Tuple[float, float] = DSTF_RANGE) -> float:
    """
    图像熵：固定范围均匀分箱直方图的香农熵

    Args:
        frame: 实值网格
        bins: 分箱数 (>= 2)
        value_range: 直方图范围

    Returns:
        熵（比特），位于 [0, log2(bins)]
    """
    if bins < 2:
        raise ContractError(f"分箱数必须 >= 2，实际 {bins}")
    frame = np.asarray(frame, dtype=np.float64)
    if not np.isfinite(frame).all():
        raise DataError("帧中包含非有限值")

    counts, _ = np.histogram(frame, bins=bins, range=value_range)
    total = counts.sum()
    if total == 0:
        return 0.0
    h = counts[counts > 0] / total
    return float(max(0.0, -(h * np.log2(h)).sum()))


def sequence_entropy(frames: np.ndarray, bins: int, value_range: Tuple[float, float]) -> EntropyReport:
    """序列逐帧图像熵"""
    return EntropyReport([image_entropy(f, bins, value_range) for f in frames], bins)


def entropy_ratio(sil: SilhouetteSequence, dstf: DstfSequence, bins: int = 256) -> float:
    """
    DSTF 平均帧熵 ÷ 剪影平均帧熵

    Raises:
        ContractError: 长度不一致
        DegenerateInputError: 剪影熵为 0
    """
    if len(sil) != len(dstf):
        raise ContractError(f"剪影序列长度 {len(sil)} 与 DSTF 序列长度 {len(dstf)} 不一致")

    sil_report = sequence_entropy(sil.to_array(), bins, SILHOUETTE_RANGE)
    dstf_report = sequence_entropy(dstf.to_array(), bins, DSTF_RANGE)
    if sil_report.mean_entropy <= 0:
        raise DegenerateInputError("剪影平均熵为 0（全常数帧），熵比无定义")

    ratio = dstf_report.mean_entropy / sil_report.mean_entropy
    logger.debug(
        f"熵比: DSTF {dstf_report.mean_entropy:.3f} / 剪影 {sil_report.mean_entropy:.3f} = {ratio:.3f}"
    )
    return ratio


def _binary_entropy(p: np.ndarray) -> np.ndarray:
    """二值熵，约定 0·log 0 = 0"""
    p = np.asarray(p, dtype=np.float64)
    out = np.zeros_like(p)
    inner = (p > 0) & (p < 1)
    q = p[inner]
    out[inner] = -q * np.log2(q) - (1 - q) * np.log2(1 - q)
    return out


def geni(seq: SilhouetteSequence) -> GeniMap:
    """步态熵图：对每个像素的时间均值前景概率取二值熵"""
    mean = seq.to_array().astype(np.float64).mean(axis=0)
    return GeniMap(_binary_entropy(mean))


def gei(seq: SilhouetteSequence) -> np.ndarray:
    """步态能量图：剪影的时间均值，取值 [0, 1]"""
    return seq.to_array().astype(np.float64).mean(axis=0)


def frame_difference(frames: np.ndarray, t: int) -> Tuple[np.ndarray, float]:
    """
    帧差：|frame_t - frame_{t-1}| 及变化像素比例

    Args:
        frames: (T, H, W) 实值帧
        t: 帧序号，1 <= t < T

    Returns:
        (差值网格, 差值 > 1e-6 的像素比例)
    """
    frames = np.asarray(frames, dtype=np.float64)
    if not 1 <= t < len(frames):
        raise IndexError(f"帧序号 {t} 超出范围 [1, {len(frames)})")
    diff = np.abs(frames[t] - frames[t - 1])
    return diff, float((diff > CHANGE_TOLERANCE).mean())


def descriptor_report(sil: SilhouetteSequence, dstf: DstfSequence, bins: int = 256) -> Tuple[pd.DataFrame, Dict[str, float]]:
    """
    逐帧描述子报告

    Returns:
        (逐帧表格, 汇总)，表格列为
        index, entropy_sil, entropy_dstf, changed_fraction_sil, changed_fraction_dstf
    """
    if len(sil) != len(dstf):
        raise ContractError(f"剪影序列长度 {len(sil)} 与 DSTF 序列长度 {len(dstf)} 不一致")

    sil_arr = sil.to_array().astype(np.float64)
    dstf_arr = dstf.to_array()
    rows = []
    for t in range(len(sil)):
        changed_sil = frame_difference(sil_arr, t)[1] if t > 0 else np.nan
        changed_dstf = frame_difference(dstf_arr, t)[1] if t > 0 else np.nan
        rows.append({
            "index": t,
            "entropy_sil": image_entropy(sil_arr[t], bins, SILHOUETTE_RANGE),
            "entropy_dstf": image_entropy(dstf_arr[t], bins, DSTF_RANGE),
            "changed_fraction_sil": changed_sil,
            "changed_fraction_dstf": changed_dstf,
        })
    table = pd.DataFrame(rows, columns=[
        "index", "entropy_sil", "entropy_dstf", "changed_fraction_sil", "changed_fraction_dstf"
    ])

    mean_sil = float(table["entropy_sil"].mean())
    mean_dstf = float(table["entropy_dstf"].mean())
    summary = {
        "mean_entropy_sil": mean_sil,
        "mean_entropy_dstf": mean_dstf,
        "ratio": mean_dstf / mean_sil if mean_sil > 0 else float("nan"),
    }
    return table, summary


def sensitivity_fraction(sil: SilhouetteSequence, dstf: DstfSequence) -> float:
    """DSTF 变化像素比例严格大于剪影变化像素比例的相邻帧对占比"""
    sil_arr = sil.to_array().astype(np.float64)
    dstf_arr = dstf.to_array()
    pairs = len(sil) - 1
    if pairs < 1:
        return 0.0
    wins = sum(
        frame_difference(dstf_arr, t)[1] > frame_difference(sil_arr, t)[1]
        for t in range(1, len(sil))
    )
    return wins / pairs
