"""
辅助工具函数
"""
import hashlib
import os
import re
from typing import Iterable, List, Tuple


def numeric_sort_key(filename: str) -> Tuple[int, str]:
    """
    帧文件排序键：按文件名中的数字排序（零填充文件名）

    Args:
        filename: 文件名

    Returns:
        (数字, 文件名)，无数字的文件排在最后
    """
    stem = os.path.splitext(os.path.basename(filename))[0]
    match = re.search(r"(\d+)$", stem)
    if match is None:
        return (2 ** 62, stem)
    return (int(match.group(1)), stem)


def list_frame_files(directory: str, extension: str = ".pgm") -> List[str]:
    """按帧序列出目录中的帧文件"""
    names = [n for n in os.listdir(directory) if n.lower().endswith(extension)]
    names.sort(key=numeric_sort_key)
    return [os.path.join(directory, n) for n in names]


def file_digest(path: str) -> str:
    """计算文件的 sha256 摘要"""
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def tree_digest(paths: Iterable[str]) -> str:
    """计算多个文件的组合摘要（按路径排序）"""
    digest = hashlib.sha256()
    for path in sorted(paths):
        digest.update(os.path.basename(path).encode("utf-8"))
        digest.update(file_digest(path).encode("ascii"))
    return digest.hexdigest()


def format_percentage(value: float) -> str:
    """格式化百分比显示"""
    return f"{value*100:.1f}%"


def ensure_dir(path: str) -> str:
    """创建目录（已存在则忽略）"""
    os.makedirs(path, exist_ok=True)
    return path
