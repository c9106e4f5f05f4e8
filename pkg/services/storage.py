"""
文件格式服务
PGM 帧、DSTF 原始文件、预览图、CSV 报告、架构导出与运行清单
"""
import json
import os
import struct
from collections import OrderedDict
from typing import Any, Dict, Iterable, List, Optional, Sequence

import numpy as np
import pandas as pd

from config import VERSION
from operations.base import OP_KINDS
from services.dstf import DstfFrame, DstfSequence
from services.silhouette import SilhouetteSequence
from services.supernet import EDGE_NAMES, CellArchitecture
from utils.errors import FormatError, InputError
from utils.helpers import ensure_dir, file_digest
from utils.logger import get_logger

logger = get_logger("storage")

DSTF_MAGIC = b"DSTF"
DSTF_VERSION = 1
_DSTF_HEADER = struct.Struct("<4sBIII")


# ---------------------------------------------------------------- PGM


def encode_pgm(pixels: np.ndarray) -> bytes:
    """编码 8 位二进制 PGM (P5)"""
    pixels = np.asarray(pixels)
    if pixels.ndim != 2:
        raise ValueError(f"PGM 只支持二维图像，实际 {pixels.shape}")
    H, W = pixels.shape
    header = f"P5\n{W} {H}\n255\n".encode("ascii")
    return header + np.clip(pixels, 0, 255).astype(np.uint8).tobytes()


def write_pgm(path: str, pixels: np.ndarray):
    with open(path, "wb") as f:
        f.write(encode_pgm(pixels))


def write_silhouette_dir(seq: SilhouetteSequence, directory: str) -> List[str]:
    """按零填充文件名写出剪影帧（前景 255，背景 0）"""
    ensure_dir(directory)
    paths = []
    for t, frame in enumerate(seq.frames):
        path = os.path.join(directory, f"{t:06d}.pgm")
        write_pgm(path, frame.mask.astype(np.uint8) * 255)
        paths.append(path)
    return paths


def write_corpus(sequences: Sequence[SilhouetteSequence], out_dir: str) -> str:
    """
    写出语料库：每条序列一个帧目录，外加 manifest.csv

    Returns:
        清单路径
    """
    ensure_dir(out_dir)
    rows = []
    for seq in sequences:
        name = f"{seq.subject_id}_{seq.view_id}"
        write_silhouette_dir(seq, os.path.join(out_dir, name))
        rows.append({"subject_id": seq.subject_id, "view_id": seq.view_id, "path": name})
    manifest = os.path.join(out_dir, "manifest.csv")
    pd.DataFrame(rows, columns=["subject_id", "view_id", "path"]).to_csv(manifest, index=False)
    logger.info(f"已写出 {len(rows)} 条序列到 {out_dir}")
    return manifest


def dstf_preview(field: np.ndarray) -> np.ndarray:
    """[-1, 1] 映射到 [0, 255]"""
    return np.rint((np.clip(field, -1.0, 1.0) + 1.0) / 2.0 * 255.0).astype(np.uint8)


def write_preview_dir(seq: DstfSequence, directory: str) -> List[str]:
    ensure_dir(directory)
    paths = []
    for frame, index in zip(seq.frames, seq.source_indices):
        path = os.path.join(directory, f"{index:06d}.pgm")
        write_pgm(path, dstf_preview(frame.field))
        paths.append(path)
    return paths


def write_unit_image(path: str, values: np.ndarray):
    """[0, 1] 取值的图（GEnI、GEI）写为 PGM"""
    write_pgm(path, np.rint(np.clip(values, 0.0, 1.0) * 255.0))


# ---------------------------------------------------------------- DSTF 原始文件


def encode_dstf(seq: DstfSequence) -> bytes:
    """
    编码 DSTF 原始文件

    布局：魔数 "DSTF"，版本 u8，T/H/W 各 u32（小端），随后 T·H·W 个 32 位小端浮点数（行优先）
    """
    fields = seq.to_array()
    T, H, W = fields.shape
    return _DSTF_HEADER.pack(DSTF_MAGIC, DSTF_VERSION, T, H, W) + fields.astype("<f4").tobytes()


def decode_dstf(data: bytes, source: Optional[str] = None) -> DstfSequence:
    """解码 DSTF 原始文件"""
    if len(data) < _DSTF_HEADER.size:
        raise FormatError("DSTF 文件头被截断", len(data), source)
    magic, version, T, H, W = _DSTF_HEADER.unpack_from(data, 0)
    if magic != DSTF_MAGIC:
        raise FormatError("DSTF 魔数错误", 0, source)
    if version != DSTF_VERSION:
        raise FormatError(f"不支持的 DSTF 版本 {version}", 4, source)
    expected = _DSTF_HEADER.size + 4 * T * H * W
    if len(data) != expected:
        raise FormatError(f"DSTF 数据长度 {len(data)} 与头部声明 {expected} 不一致", min(len(data), expected), source)
    fields = np.frombuffer(data, dtype="<f4", offset=_DSTF_HEADER.size).astype(np.float64)
    return DstfSequence([DstfFrame(f) for f in fields.reshape(T, H, W)])


def write_dstf(path: str, seq: DstfSequence):
    with open(path, "wb") as f:
        f.write(encode_dstf(seq))


def read_dstf(path: str) -> DstfSequence:
    if not os.path.isfile(path):
        raise InputError(f"DSTF 文件不存在: {path}")
    with open(path, "rb") as f:
        return decode_dstf(f.read(), source=path)


# ---------------------------------------------------------------- 报告


def write_metrics_report(path: str, tables: Dict[str, pd.DataFrame], summary: Dict[str, float]) -> pd.DataFrame:
    """
    写出度量报告：每条序列的逐帧行，最后一行为汇总（平均熵与熵比）

    Args:
        path: 输出 CSV
        tables: 序列名 → descriptor_report 的逐帧表格
        summary: 全部序列的汇总
    """
    frames = []
    for name, table in tables.items():
        table = table.copy()
        table.insert(0, "sequence", name)
        frames.append(table)
    summary_row = pd.DataFrame([{
        "sequence": "summary",
        "entropy_sil": summary["mean_entropy_sil"],
        "entropy_dstf": summary["mean_entropy_dstf"],
        "ratio": summary["ratio"],
    }])
    report = pd.concat(frames + [summary_row], ignore_index=True)
    report = report[["sequence", "index", "entropy_sil", "entropy_dstf",
                     "changed_fraction_sil", "changed_fraction_dstf", "ratio"]]
    ensure_dir(os.path.dirname(os.path.abspath(path)))
    report.to_csv(path, index=False)
    return report


def alpha_columns() -> List[str]:
    return [f"{edge}:{kind.value}" for edge in EDGE_NAMES for kind in OP_KINDS]


def write_alpha_history(path: str, history: Iterable[np.ndarray]):
    """α 历史 CSV：iteration + 60 个 α 值"""
    rows = [np.asarray(a, dtype=np.float64).reshape(-1) for a in history]
    table = pd.DataFrame(rows, columns=alpha_columns()) if rows else pd.DataFrame(columns=alpha_columns())
    table.insert(0, "iteration", np.arange(1, len(rows) + 1))
    table.to_csv(path, index=False, float_format="%.17g")


def write_loss_history(path: str, train: Sequence[float], val: Sequence[float] = ()):
    """损失历史 CSV：phase, step, loss"""
    rows = [("train", i + 1, v) for i, v in enumerate(train)]
    rows += [("val", i + 1, v) for i, v in enumerate(val)]
    pd.DataFrame(rows, columns=["phase", "step", "loss"]).to_csv(path, index=False, float_format="%.17g")


# ---------------------------------------------------------------- 架构与清单


def write_architecture(path: str, arch: CellArchitecture):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(arch.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")


def read_architecture(path: str) -> CellArchitecture:
    if not os.path.isfile(path):
        raise InputError(f"架构文件不存在: {path}")
    try:
        with open(path, "r", encoding="utf-8") as f:
            doc = json.load(f)
    except json.JSONDecodeError as e:
        raise FormatError(f"架构文件不是有效 JSON: {e.msg}", e.pos, path)
    return CellArchitecture.from_dict(doc)


class RunManifest:
    """运行清单：命令、解析后的配置、输入摘要、版本与种子（不含时间戳）"""

    def __init__(
        self,
        command: str,
        config: Dict[str, Any],
        inputs: Optional[Dict[str, str]] = None,
        seed: Optional[int] = None
    ):
        self.command = command
        self.config = OrderedDict(sorted(config.items()))
        self.inputs = OrderedDict(sorted((inputs or {}).items()))
        self.version = VERSION
        self.seed = seed

    @staticmethod
    def digest_inputs(paths: Iterable[str]) -> Dict[str, str]:
        """输入文件 → sha256（键为文件名）"""
        return {os.path.basename(p): file_digest(p) for p in paths if os.path.isfile(p)}

    def to_dict(self) -> Dict[str, Any]:
        config = {k: list(v) if isinstance(v, tuple) else v for k, v in self.config.items()}
        return {
            "command": self.command,
            "config": config,
            "inputs": dict(self.inputs),
            "version": self.version,
            "seed": self.seed,
        }

    def write(self, directory: str) -> str:
        path = os.path.join(ensure_dir(directory), "manifest.json")
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")
        return path

    def __repr__(self):
        return f"<RunManifest {self.command} seed={self.seed}>"


def write_config_snapshot(directory: str, text: str) -> str:
    path = os.path.join(ensure_dir(directory), "config.txt")
    with open(path, "w", encoding="utf-8") as f:
        f.write(text)
    return path
