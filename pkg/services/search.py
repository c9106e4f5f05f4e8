"""
架构搜索服务
数据划分、P×K 采样、一阶双层交替优化、离散化、重训练与 rank-1 评估
"""
import os
from collections import OrderedDict
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from config import SearchConfig
from operations.base import OP_KINDS
from services.autodiff import Tape, Tensor, backward, freeze
from services.dstf import transform_sequence
from services.metrics import gei
from services.optimizer import AdamState, adam_step, save_checkpoint
from services.silhouette import SilhouetteSequence
from services.supernet import CellArchitecture, ClashNetwork, ExtractorConfig, LossStats
from utils.errors import ContractError, InputError, NonFiniteLossError, SplitError
from utils.helpers import ensure_dir, format_percentage
from utils.logger import get_logger

logger = get_logger("search")

# 评估时一次前向的序列数
EVAL_BATCH = 16


class GaitSample:
    """带标签的训练样本：按输入顺序排列的描述子序列，均为 (T, H, W) float64"""

    def __init__(self, subject_id: str, view_id: str, label: int, descriptors: "OrderedDict[str, np.ndarray]"):
        if not descriptors:
            raise ContractError(f"{subject_id}/{view_id}: 样本没有描述子")
        shapes = {name: a.shape for name, a in descriptors.items()}
        if len(set(shapes.values())) != 1:
            raise ContractError(f"{subject_id}/{view_id}: 描述子形状不一致 {shapes}")
        self.subject_id = subject_id
        self.view_id = view_id
        self.label = label
        self.descriptors = OrderedDict(descriptors)

    @property
    def frames(self) -> int:
        return next(iter(self.descriptors.values())).shape[0]

    def clip(self, idx: np.ndarray) -> List[np.ndarray]:
        """按帧下标取片段，每个描述子一个 (L, H, W)"""
        return [a[idx] for a in self.descriptors.values()]

    def __repr__(self):
        names = "+".join(self.descriptors)
        return f"<GaitSample {self.subject_id}/{self.view_id} label={self.label} {names} T={self.frames}>"


def label_map(sequences: Sequence[SilhouetteSequence]) -> Dict[str, int]:
    """身份 → 类别下标（按身份名排序）"""
    return {sid: i for i, sid in enumerate(sorted({s.subject_id for s in sequences}))}


def compute_descriptor(seq: SilhouetteSequence, name: str, threads: int = 1) -> np.ndarray:
    """
    计算一条序列的单个描述子 (T, H, W)

    sil 为原始剪影，dstf 为带符号 DSTF，bidt 为无符号 Bi-DT，
    gei 为步态能量图沿时间复制成的常量序列；退化帧一律置零以保持帧对齐。
    """
    source = f"{seq.subject_id}/{seq.view_id}"
    if name == "sil":
        return seq.to_array().astype(np.float64)
    if name == "dstf":
        return transform_sequence(seq, policy="zero", threads=threads, source=source).to_array()
    if name == "bidt":
        return transform_sequence(seq, policy="zero", signed=False, threads=threads, source=source).to_array()
    if name == "gei":
        return np.repeat(gei(seq)[None], len(seq), axis=0)
    raise ContractError(f"未知的描述子: {name}")


def prepare_samples(
    sequences: Sequence[SilhouetteSequence],
    labels: Dict[str, int],
    descriptors: Sequence[str] = ("sil", "dstf"),
    threads: int = 1
) -> List[GaitSample]:
    """对每条序列计算所选描述子"""
    samples = []
    for seq in sequences:
        if seq.subject_id not in labels:
            raise InputError(f"身份 {seq.subject_id} 不在标签表中")
        samples.append(GaitSample(
            seq.subject_id, seq.view_id, labels[seq.subject_id],
            OrderedDict((name, compute_descriptor(seq, name, threads)) for name in descriptors)
        ))
    logger.debug(f"已准备 {len(samples)} 条样本, 描述子 {'+'.join(descriptors)}")
    return samples


# ---------------------------------------------------------------- 数据划分与采样


def split_dataset(data: Sequence, val_fraction: float, seed: int) -> Tuple[list, list]:
    """
    按身份划分训练/验证集

    每个身份随机选 floor(n·val_fraction) 条进入验证集（至少 1 条、至多 n-1 条），
    其余进入训练集；输出保持输入顺序。

    Args:
        data: 带 subject_id 属性的序列或样本
        val_fraction: 验证集比例
        seed: 随机种子

    Returns:
        (训练集, 验证集)
    """
    if not 0 < val_fraction < 1:
        raise ContractError(f"val_fraction 必须在 (0, 1) 内，实际 {val_fraction}")
    groups: Dict[str, List[int]] = OrderedDict()
    for i, item in enumerate(data):
        groups.setdefault(item.subject_id, []).append(i)

    rng = np.random.default_rng(seed)
    val_indices = set()
    for subject_id in sorted(groups):
        indices = groups[subject_id]
        if len(indices) < 2:
            raise SplitError(subject_id, f"身份 {subject_id} 只有 {len(indices)} 条序列，无法划分")
        n_val = min(max(int(np.floor(len(indices) * val_fraction)), 1), len(indices) - 1)
        chosen = rng.permutation(len(indices))[:n_val]
        val_indices.update(indices[j] for j in chosen)

    train = [item for i, item in enumerate(data) if i not in val_indices]
    val = [item for i, item in enumerate(data) if i in val_indices]
    logger.debug(f"数据划分: 训练 {len(train)} 条, 验证 {len(val)} 条, {len(groups)} 个身份")
    return train, val


def clip_indices(frames: int, clip_length: int, start: int = 0) -> np.ndarray:
    """从 start 开始的连续片段下标，序列不够长时循环取帧"""
    return (start + np.arange(clip_length)) % frames


class PKSampler:
    """P×K 采样：每批 P 个身份、每个身份 K 条序列，每条取随机连续片段"""

    def __init__(self, samples: Sequence[GaitSample], p: int, k: int, clip_length: int, rng: np.random.Generator):
        self.by_identity: Dict[str, List[GaitSample]] = OrderedDict()
        for sample in samples:
            self.by_identity.setdefault(sample.subject_id, []).append(sample)
        self.identities = sorted(self.by_identity)
        if len(self.identities) < p:
            raise ContractError(f"采样需要 {p} 个身份，只有 {len(self.identities)} 个")
        self.p = p
        self.k = k
        self.clip_length = clip_length
        self.rng = rng

    def sample(self) -> Tuple[List[np.ndarray], np.ndarray]:
        """
        Returns:
            (每个描述子一个 (P·K, 1, L, H, W), 标签 (P·K,))
        """
        chosen = self.rng.choice(len(self.identities), size=self.p, replace=False)
        clips, labels = [], []
        for i in chosen:
            pool = self.by_identity[self.identities[i]]
            picks = self.rng.choice(len(pool), size=self.k, replace=len(pool) < self.k)
            for j in picks:
                sample = pool[j]
                if sample.frames >= self.clip_length:
                    start = int(self.rng.integers(0, sample.frames - self.clip_length + 1))
                else:
                    start = 0
                clips.append(sample.clip(clip_indices(sample.frames, self.clip_length, start)))
                labels.append(sample.label)
        inputs = [np.stack(per_descriptor)[:, None] for per_descriptor in zip(*clips)]
        return inputs, np.array(labels)


# ---------------------------------------------------------------- 搜索状态与单步更新


class SearchState:
    """交替优化状态：两个计数器、两个 Adam 状态、随机数生成器与只追加的损失历史"""

    def __init__(self, cfg: SearchConfig):
        self.w_steps = 0
        self.alpha_steps = 0
        self.w_optimizer = AdamState(cfg.lr_w, (cfg.beta1_w, cfg.beta2_w), cfg.adam_eps)
        self.alpha_optimizer = AdamState(cfg.lr_alpha, (cfg.beta1_alpha, cfg.beta2_alpha), cfg.adam_eps)
        self.rng = np.random.default_rng(cfg.seed)
        self.train_history: List[float] = []
        self.val_history: List[float] = []
        self.alpha_history: List[np.ndarray] = []

    def __repr__(self):
        return f"<SearchState w_steps={self.w_steps} alpha_steps={self.alpha_steps}>"


def build_network(
    cfg: SearchConfig,
    num_classes: int,
    arch: Optional[CellArchitecture] = None
) -> ClashNetwork:
    """按配置构建网络（权重由 cfg.seed 决定）"""
    return ClashNetwork(
        ExtractorConfig(cfg.channels, leaky_slope=cfg.leaky_slope),
        clip_length=cfg.clip_length,
        num_classes=num_classes,
        parts=cfg.parts,
        embed_dim=cfg.embed_dim,
        arch=arch,
        fusion=cfg.fusion,
        seed=cfg.seed,
        inputs=len(cfg.descriptor_names)
    )


def _save_last_good(network: ClashNetwork, run_dir: Optional[str]) -> Optional[str]:
    if not run_dir:
        return None
    path = os.path.join(ensure_dir(run_dir), "last_good.ckpt")
    save_checkpoint(path, network.state_dict())
    return path


def optimize_step(
    network: ClashNetwork,
    params: "OrderedDict[str, Tensor]",
    optimizer: AdamState,
    batch: Tuple[List[np.ndarray], np.ndarray],
    margin: float,
    iteration: int,
    phase: str,
    run_dir: Optional[str] = None,
    frozen: Sequence[Tensor] = ()
) -> LossStats:
    """
    在一个批次上计算联合损失并用 Adam 更新给定参数

    frozen 中的参数在本步视为常量，不记录其上游计算（梯度数值不变）。

    Raises:
        NonFiniteLossError: 损失非有限（更新前保存最后一次正常的参数）
    """
    inputs, labels = batch
    with Tape(), freeze(frozen):
        loss, stats = network.loss([Tensor(x) for x in inputs], labels, margin)
        if not np.isfinite(loss.item()):
            path = _save_last_good(network, run_dir)
            logger.error(f"{phase} 第 {iteration} 次迭代损失非有限")
            raise NonFiniteLossError(iteration, phase, path)
        grads = backward(loss)
    adam_step(params, grads, optimizer)
    network.gem.enforce()
    return stats


def _maybe_checkpoint(network: ClashNetwork, cfg: SearchConfig, run_dir: Optional[str], phase: str, iteration: int):
    if run_dir and cfg.checkpoint_every > 0 and iteration % cfg.checkpoint_every == 0:
        path = os.path.join(ensure_dir(os.path.join(run_dir, "checkpoints")), f"{phase}_{iteration:06d}.ckpt")
        save_checkpoint(path, network.state_dict())
        logger.debug(f"已保存检查点: {path}")


# ---------------------------------------------------------------- 搜索 / 离散化 / 重训练


def search(
    cfg: SearchConfig,
    train: Sequence[GaitSample],
    val: Sequence[GaitSample],
    num_classes: int,
    run_dir: Optional[str] = None
) -> Tuple[CellArchitecture, SearchState]:
    """
    一阶双层交替搜索

    每次外循环：先在训练集上做 u 次权重更新，再在验证集上用当前 w 下的 ∇α 更新一次 α。

    Returns:
        (松弛架构 α*, 搜索状态)
    """
    if cfg.fusion != "cell":
        raise ContractError("架构搜索要求 FUSION=cell")
    state = SearchState(cfg)
    arch = CellArchitecture.random(np.random.default_rng([cfg.seed, 1]))
    network = build_network(cfg, num_classes, arch)
    train_sampler = PKSampler(train, cfg.p, cfg.k, cfg.clip_length, state.rng)
    val_sampler = PKSampler(val, cfg.p, cfg.k, cfg.clip_length, state.rng)
    w_params = network.weight_params()
    alpha_params = network.alpha_params()

    logger.info(
        f"开始架构搜索: {cfg.search_iterations} 次 α 更新, u={cfg.u}, "
        f"P×K={cfg.p}×{cfg.k}, 参数量 {network.parameter_count()}"
    )
    for iteration in range(1, cfg.search_iterations + 1):
        for _ in range(cfg.u):
            stats = optimize_step(
                network, w_params, state.w_optimizer, train_sampler.sample(),
                cfg.margin, state.w_steps + 1, "search-w", run_dir, frozen=list(alpha_params.values())
            )
            state.w_steps += 1
            state.train_history.append(stats.total)

        stats = optimize_step(
            network, alpha_params, state.alpha_optimizer, val_sampler.sample(),
            cfg.margin, iteration, "search-alpha", run_dir, frozen=list(w_params.values())
        )
        state.alpha_steps += 1
        state.val_history.append(stats.total)
        state.alpha_history.append(arch.alpha.data.copy())

        if cfg.log_every > 0 and iteration % cfg.log_every == 0:
            logger.info(
                f"搜索 {iteration}/{cfg.search_iterations}: "
                f"train={state.train_history[-1]:.4f} val={stats.total:.4f} "
                f"有效三元组 {format_percentage(stats.active_fraction)}"
            )
        _maybe_checkpoint(network, cfg, run_dir, "search", iteration)

    return arch, state


def discretize(arch: CellArchitecture) -> CellArchitecture:
    """每条边取 argmax α 对应的操作（并列取下标最小者），保留全部 5 条边"""
    alpha = arch.alpha.data.copy()
    chosen = [OP_KINDS[int(np.argmax(row))] for row in alpha]
    logger.info(f"离散化架构: {[k.value for k in chosen]}")
    return CellArchitecture(alpha, discrete=chosen)


def retrain(
    arch: Optional[CellArchitecture],
    train: Sequence[GaitSample],
    cfg: SearchConfig,
    num_classes: int,
    run_dir: Optional[str] = None
) -> Tuple[ClashNetwork, List[float]]:
    """
    以离散架构从头初始化并训练网络

    Args:
        arch: 离散架构（FUSION 不是 cell 时为 None）
        train: 完整训练集

    Returns:
        (训练后的网络, 训练损失历史)
    """
    if cfg.fusion == "cell" and (arch is None or not arch.is_discrete):
        raise ContractError("重训练需要离散架构")
    network = build_network(cfg, num_classes, arch)
    optimizer = AdamState(cfg.lr_w, (cfg.beta1_w, cfg.beta2_w), cfg.adam_eps)
    sampler = PKSampler(train, cfg.p, cfg.k, cfg.clip_length, np.random.default_rng([cfg.seed, 2]))
    params = network.weight_params()
    history: List[float] = []

    logger.info(f"开始重训练: {cfg.retrain_iterations} 次迭代, 参数量 {network.parameter_count()}")
    for iteration in range(1, cfg.retrain_iterations + 1):
        stats = optimize_step(network, params, optimizer, sampler.sample(), cfg.margin, iteration, "retrain", run_dir)
        history.append(stats.total)
        if cfg.log_every > 0 and iteration % cfg.log_every == 0:
            logger.info(f"重训练 {iteration}/{cfg.retrain_iterations}: loss={stats.total:.4f}")
        _maybe_checkpoint(network, cfg, run_dir, "retrain", iteration)
    return network, history


# ---------------------------------------------------------------- 评估


def embed_samples(network: ClashNetwork, samples: Sequence[GaitSample], clip_length: int) -> np.ndarray:
    """每条序列取首帧起的固定片段，返回拼接条带后的嵌入 (N, parts·D)"""
    out = []
    for start in range(0, len(samples), EVAL_BATCH):
        clips = [s.clip(clip_indices(s.frames, clip_length)) for s in samples[start:start + EVAL_BATCH]]
        out.append(network.embed(*[np.stack(per_descriptor)[:, None] for per_descriptor in zip(*clips)]))
    return np.concatenate(out, axis=0)


def evaluate_rank1(
    network: ClashNetwork,
    gallery: Sequence[GaitSample],
    probe: Sequence[GaitSample],
    clip_length: int
) -> float:
    """
    rank-1 识别准确率：每个探针取欧氏距离最近的注册样本的身份

    Returns:
        正确比例
    """
    if not gallery:
        raise InputError("注册集为空")
    if not probe:
        raise InputError("探针集为空")
    missing = {p.subject_id for p in probe} - {g.subject_id for g in gallery}
    if missing:
        raise InputError(f"探针身份不在注册集中: {', '.join(sorted(missing))}")

    g_emb = embed_samples(network, gallery, clip_length)
    p_emb = embed_samples(network, probe, clip_length)
    dist = np.sqrt(((p_emb[:, None, :] - g_emb[None, :, :]) ** 2).sum(axis=2))
    nearest = dist.argmin(axis=1)
    g_labels = np.array([g.subject_id for g in gallery])
    p_labels = np.array([p.subject_id for p in probe])
    accuracy = float((g_labels[nearest] == p_labels).mean())
    logger.info(f"rank-1: {format_percentage(accuracy)} ({len(probe)} 个探针, {len(gallery)} 个注册样本)")
    return accuracy
