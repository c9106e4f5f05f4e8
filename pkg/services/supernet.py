"""
超网络服务
权重共享特征提取器、多描述子 (MD) 单元、GeM 时间聚合、分条带嵌入头与联合损失
"""
from collections import OrderedDict
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from config import FUSIONS, config
from operations.base import OP_KINDS, OpKind, he_normal
from operations.registry import get_operation
from services.autodiff import (
    Tensor,
    add,
    clamp_min,
    concat,
    conv3d,
    global_mean,
    leaky_relu,
    log_softmax,
    matmul,
    max_,
    maxpool3d,
    mul,
    no_grad,
    parameter,
    power,
    relu,
    reshape,
    slice_axis,
    softmax,
    sqrt,
    sub,
    sum_,
    transpose,
)
from utils.errors import ContractError
from utils.logger import get_logger

logger = get_logger("supernet")

# 可搜索边：(起点, 终点)，只有中间节点 n3、n4 接收边
EDGES: List[Tuple[str, str]] = [
    ("sil", "n3"),
    ("dstf", "n3"),
    ("sil", "n4"),
    ("dstf", "n4"),
    ("n3", "n4"),
]
EDGE_NAMES = [f"{src}->{dst}" for src, dst in EDGES]

# GeM 均值的下限，防止大 k 时下溢为 0
_GEM_MEAN_FLOOR = np.finfo(np.float64).tiny

# 成对距离开方前的平滑项
_DIST_EPS = 1e-12


class ExtractorConfig:
    """特征提取器配置"""

    def __init__(
        self,
        channels: Sequence[int] = (8, 16, 32, 32),
        kernel: int = 3,
        leaky_slope: float = 0.01,
        pool_after: Sequence[int] = (1, 2)
    ):
        if len(channels) < 1 or min(channels) <= 0:
            raise ContractError(f"通道配置无效: {channels}")
        self.channels = tuple(int(c) for c in channels)
        self.kernel = kernel
        self.leaky_slope = leaky_slope
        self.pool_after = tuple(pool_after)

    @property
    def out_channels(self) -> int:
        return self.channels[-1]

    def __repr__(self):
        return f"<ExtractorConfig channels={self.channels} pool_after={self.pool_after}>"


class GemParams:
    """GeM 池化参数：可学习指数 k (>= 1) 与截断下限 ε"""

    def __init__(self, k: Tensor, eps: float = config.GEM_EPS):
        self.k = k
        self.eps = eps

    def enforce(self):
        """优化器更新后保证 k >= 1"""
        self.k.data = np.maximum(self.k.data, 1.0)


class CellArchitecture:
    """
    MD 单元架构：两个输入节点、两个中间节点、一个输出节点

    alpha 为 (5, 12) 的架构参数；discrete 为离散化后每条边选中的操作。
    """

    num_nodes = 5

    def __init__(self, alpha: Optional[np.ndarray] = None, discrete: Optional[List[OpKind]] = None):
        if alpha is None:
            alpha = np.zeros((len(EDGES), len(OP_KINDS)))
        alpha = np.asarray(alpha, dtype=np.float64)
        if alpha.shape != (len(EDGES), len(OP_KINDS)):
            raise ContractError(f"alpha 形状必须为 {(len(EDGES), len(OP_KINDS))}，实际 {alpha.shape}")
        if not np.isfinite(alpha).all():
            raise ContractError("alpha 包含非有限值")
        if discrete is not None and len(discrete) != len(EDGES):
            raise ContractError(f"离散架构必须为 {len(EDGES)} 条边各选一个操作")
        self.alpha = parameter(alpha, name="arch.alpha")
        self.discrete = list(discrete) if discrete is not None else None

    @classmethod
    def random(cls, rng: np.random.Generator, scale: float = 1e-3) -> "CellArchitecture":
        """小幅随机初始化的松弛架构"""
        return cls(scale * rng.standard_normal((len(EDGES), len(OP_KINDS))))

    @property
    def is_discrete(self) -> bool:
        return self.discrete is not None

    def edge_weights(self) -> np.ndarray:
        """每条边的 softmax 权重 (5, 12)"""
        a = self.alpha.data
        e = np.exp(a - a.max(axis=1, keepdims=True))
        return e / e.sum(axis=1, keepdims=True)

    def to_dict(self) -> Dict[str, Any]:
        """导出为结构化文档（离散边附带所选操作的配置）"""
        edges = []
        for e, name in enumerate(EDGE_NAMES):
            kind = self.discrete[e] if self.discrete is not None else None
            edges.append({
                "edge": name,
                "alpha": {k.value: float(self.alpha.data[e, i]) for i, k in enumerate(OP_KINDS)},
                "op": kind.value if kind is not None else None,
                "op_config": dict(get_operation(kind).get_config()) if kind is not None else None,
            })
        return {"num_nodes": self.num_nodes, "edges": edges}

    @classmethod
    def from_dict(cls, doc: Dict[str, Any]) -> "CellArchitecture":
        edges = doc.get("edges", [])
        if [e.get("edge") for e in edges] != EDGE_NAMES:
            raise ContractError(f"架构文档的边必须依次为 {EDGE_NAMES}")
        alpha = np.array([[e["alpha"][kind.value] for kind in OP_KINDS] for e in edges])
        ops = [e.get("op") for e in edges]
        discrete = None
        if all(op is not None for op in ops):
            discrete = [OpKind.parse(op) for op in ops]
        elif any(op is not None for op in ops):
            raise ContractError("架构文档只有部分边被离散化")
        return cls(alpha, discrete)

    def __repr__(self):
        if self.discrete is not None:
            return f"<CellArchitecture discrete {[k.value for k in self.discrete]}>"
        return "<CellArchitecture relaxed>"


# ---------------------------------------------------------------- 特征提取器


def init_extractor(cfg: ExtractorConfig, rng: np.random.Generator) -> "OrderedDict[str, np.ndarray]":
    """初始化特征提取器参数（偏置为零）"""
    params = OrderedDict()
    c_in = 1
    k = cfg.kernel
    for i, c_out in enumerate(cfg.channels, start=1):
        params[f"extractor.conv{i}.weight"] = he_normal(rng, (c_out, c_in, k, k, k), fan_in=c_in * k ** 3)
        params[f"extractor.conv{i}.bias"] = np.zeros((1, c_out, 1, 1, 1))
        c_in = c_out
    return params


def feature_extract(x: Tensor, weights: Dict[str, Tensor], cfg: ExtractorConfig) -> Tensor:
    """
    三维卷积特征提取：conv3d + LeakyReLU，第 1、2 层后做 2×2 空间最大池化

    Args:
        x: (B, 1, T, H, W) 输入描述子
        weights: 提取器参数（两个描述子必须传入同一组参数）
        cfg: 提取器配置

    Returns:
        (B, C, T, H', W')，时间维保持不变
    """
    if x.ndim != 5 or x.shape[1] != 1:
        raise ContractError(f"特征提取器输入必须为 (B, 1, T, H, W)，实际 {x.shape}")
    for i, c_out in enumerate(cfg.channels, start=1):
        w = weights[f"extractor.conv{i}.weight"]
        if w.shape[0] != c_out or w.shape[1] != x.shape[1]:
            raise ContractError(
                f"第 {i} 层卷积核 {w.shape} 与配置通道 {c_out} / 输入通道 {x.shape[1]} 不一致"
            )
        x = leaky_relu(add(conv3d(x, w), weights[f"extractor.conv{i}.bias"]), cfg.leaky_slope)
        if i in cfg.pool_after:
            x = maxpool3d(x, kernel=(1, 2, 2), stride=(1, 2, 2), padding=None)
    return x


# ---------------------------------------------------------------- MD 单元


def apply_op(kind: OpKind, x: Tensor, op_weights: Dict[str, Tensor]) -> Tensor:
    """执行单个候选操作"""
    return get_operation(kind).forward(x, op_weights)


def mixed_op(x: Tensor, alpha_edge: Tensor, weights: Dict[OpKind, Dict[str, Tensor]]) -> Tensor:
    """
    混合操作：Σ_o softmax(α)_o · o(x)，按 OpKind 顺序求和

    Args:
        x: (B, C, T, H, W)
        alpha_edge: 该边的 12 个架构参数
        weights: 每个操作的参数
    """
    if not np.isfinite(alpha_edge.data).all():
        raise ContractError("混合操作的 alpha 包含非有限值")
    probs = reshape(softmax(reshape(alpha_edge, (len(OP_KINDS),)), axis=0), (len(OP_KINDS),) + (1,) * x.ndim)
    branches = [
        reshape(apply_op(kind, x, weights.get(kind, {})), (1,) + x.shape)
        for kind in OP_KINDS
    ]
    return sum_(mul(concat(branches, axis=0), probs), axes=0)


def _edge(
    e: int,
    x: Tensor,
    arch: CellArchitecture,
    weights: Dict[int, Dict[OpKind, Dict[str, Tensor]]]
) -> Tensor:
    if arch.is_discrete:
        kind = arch.discrete[e]
        return apply_op(kind, x, weights[e].get(kind, {}))
    return mixed_op(x, slice_axis(arch.alpha, 0, e, e + 1), weights[e])


def md_cell_forward(
    f_sil: Tensor,
    f_dstf: Tensor,
    arch: CellArchitecture,
    weights: Dict[int, Dict[OpKind, Dict[str, Tensor]]]
) -> Tensor:
    """
    MD 单元前向：n3 = ō(n1) + ō(n2)，n4 = ō(n1) + ō(n2) + ō(n3)，输出 n3 + n4

    Args:
        f_sil, f_dstf: 两个描述子的特征（形状相同）
        arch: 单元架构（松弛或离散）
        weights: 边序号 → 操作 → 参数
    """
    if f_sil.shape != f_dstf.shape:
        raise ContractError(f"剪影特征 {f_sil.shape} 与 DSTF 特征 {f_dstf.shape} 形状不一致")
    nodes = {"sil": f_sil, "dstf": f_dstf}
    n3 = add(_edge(0, nodes["sil"], arch, weights), _edge(1, nodes["dstf"], arch, weights))
    nodes["n3"] = n3
    n4 = add(
        add(_edge(2, nodes["sil"], arch, weights), _edge(3, nodes["dstf"], arch, weights)),
        _edge(4, n3, arch, weights)
    )
    return add(n3, n4)


def init_cell(
    arch: Optional[CellArchitecture],
    channels: int,
    frames: int,
    rng: np.random.Generator
) -> "OrderedDict[str, np.ndarray]":
    """初始化单元参数；松弛架构为全部操作建参数，离散架构只为选中操作建参数"""
    params = OrderedDict()
    for e, name in enumerate(EDGE_NAMES):
        kinds = OP_KINDS if arch is None or not arch.is_discrete else [arch.discrete[e]]
        for kind in kinds:
            for local, value in get_operation(kind).init_params(channels, frames, rng).items():
                params[f"cell.{name}.{kind.value}.{local}"] = value
    return params


def cell_weights(params: Dict[str, Tensor]) -> Dict[int, Dict[OpKind, Dict[str, Tensor]]]:
    """把扁平参数名整理为 边 → 操作 → 局部参数"""
    nested: Dict[int, Dict[OpKind, Dict[str, Tensor]]] = {e: {} for e in range(len(EDGES))}
    for full_name, tensor in params.items():
        if not full_name.startswith("cell."):
            continue
        _, edge_name, kind_name, local = full_name.split(".", 3)
        e = EDGE_NAMES.index(edge_name)
        nested[e].setdefault(OpKind(kind_name), {})[local] = tensor
    return nested


# ---------------------------------------------------------------- 聚合与嵌入


def gem_pool(f_md: Tensor, params: GemParams) -> Tensor:
    """
    GeM 时间聚合：(mean_T clamp(F, ε)^k)^(1/k)

    Returns:
        (B, C, 1, H, W)
    """
    if f_md.ndim != 5 or f_md.shape[2] < 1:
        raise ContractError(f"GeM 输入必须为 (B, C, T, H, W)，实际 {f_md.shape}")
    pooled = global_mean(power(clamp_min(f_md, params.eps), params.k), axes=2, keepdims=True)
    inv_k = power(params.k, -1.0)
    return power(clamp_min(pooled, _GEM_MEAN_FLOOR), inv_k)


def strip_bounds(height: int, parts: int) -> List[Tuple[int, int]]:
    """水平条带的行区间，行数不能整除时各条带相差至多一行"""
    if parts < 1:
        raise ContractError(f"条带数必须 >= 1，实际 {parts}")
    if parts > height:
        raise ContractError(f"条带数 {parts} 大于特征高度 {height}")
    return [(p * height // parts, (p + 1) * height // parts) for p in range(parts)]


def init_head(channels: int, parts: int, embed_dim: int, rng: np.random.Generator) -> "OrderedDict[str, np.ndarray]":
    params = OrderedDict()
    for p in range(parts):
        params[f"head.part{p}.weight"] = rng.normal(0.0, np.sqrt(1.0 / channels), size=(channels, embed_dim))
    return params


def embedding_head(f_agg: Tensor, weights: Dict[str, Tensor], parts: int) -> Tensor:
    """
    分条带嵌入：每个水平条带做空间最大+平均池化，再经独立线性层映射到 D 维

    Returns:
        (B, parts, D)
    """
    B = f_agg.shape[0]
    embeddings = []
    for p, (start, stop) in enumerate(strip_bounds(f_agg.shape[3], parts)):
        strip = slice_axis(f_agg, 3, start, stop)
        pooled = add(
            max_(strip, axes=(2, 3, 4), keepdims=False),
            global_mean(strip, axes=(2, 3, 4), keepdims=False)
        )
        w = weights[f"head.part{p}.weight"]
        embeddings.append(reshape(matmul(pooled, w), (B, 1, w.shape[1])))
    return concat(embeddings, axis=1)


# ---------------------------------------------------------------- 损失


class LossStats:
    """一次损失计算的统计"""

    def __init__(self, triplet: float, ce: float, triplet_valid: bool, active_fraction: float):
        self.triplet = triplet
        self.ce = ce
        self.total = triplet + ce
        self.triplet_valid = triplet_valid
        self.active_fraction = active_fraction

    def __repr__(self):
        return f"<LossStats total={self.total:.4f} tri={self.triplet:.4f} ce={self.ce:.4f}>"


def pairwise_distances(embeddings: Tensor) -> Tensor:
    """(P, B, D) → (P, B, B) 欧氏距离"""
    P, B, D = embeddings.shape
    diff = sub(reshape(embeddings, (P, B, 1, D)), reshape(embeddings, (P, 1, B, D)))
    return sqrt(add(sum_(mul(diff, diff), axes=3), _DIST_EPS))


def triplet_mask(labels: np.ndarray) -> np.ndarray:
    """有效三元组 (a, p, n)：label[a] == label[p]、a != p、label[n] != label[a]"""
    labels = np.asarray(labels)
    same = labels[:, None] == labels[None, :]
    positive = same & ~np.eye(len(labels), dtype=bool)
    negative = ~same
    return positive[:, :, None] & negative[:, None, :]


def batch_all_triplet_loss(dist: Tensor, labels: np.ndarray, margin: float) -> Tuple[Tensor, bool, float]:
    """
    batch-all 三元组损失：每个条带对正 hinge 值的三元组求平均，再在条带间平均

    Args:
        dist: (P, B, B) 距离矩阵
        labels: (B,) 身份标签
        margin: 间隔

    Returns:
        (损失, 是否存在有效三元组, 正 hinge 三元组占比)
    """
    parts, B, _ = dist.shape
    mask = triplet_mask(labels)
    if not mask.any():
        return Tensor(0.0), False, 0.0

    hinge = relu(add(sub(reshape(dist, (parts, B, B, 1)), reshape(dist, (parts, B, 1, B))), margin))
    hinge = mul(hinge, mask.astype(np.float64))
    active = (hinge.data > 0).reshape(parts, -1).sum(axis=1)
    weights = 1.0 / (np.maximum(active, 1) * parts)
    loss = sum_(mul(hinge, weights.reshape(parts, 1, 1, 1)))
    return loss, True, float(active.sum()) / (mask.sum() * parts)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """softmax 交叉熵（批平均）"""
    B, classes = logits.shape
    onehot = np.zeros((B, classes))
    onehot[np.arange(B), np.asarray(labels)] = 1.0
    return mul(sum_(mul(log_softmax(logits, axis=1), onehot)), -1.0 / B)


def total_loss(
    f_final: Tensor,
    logits: Tensor,
    labels: np.ndarray,
    margin: float = 0.2
) -> Tuple[Tensor, LossStats]:
    """
    联合损失：batch-all 三元组损失 + 交叉熵，权重均为 1

    Args:
        f_final: (B, parts, D) 嵌入
        logits: (B, classes) 分类输出
        labels: (B,) 身份下标
        margin: 三元组间隔
    """
    labels = np.asarray(labels)
    dist = pairwise_distances(transpose_parts(f_final))
    tri, valid, active = batch_all_triplet_loss(dist, labels, margin)
    if not valid:
        logger.warning("批次中只有一个身份，三元组损失记为 0")
    ce = cross_entropy(logits, labels)
    loss = add(tri, ce)
    return loss, LossStats(tri.item(), ce.item(), valid, active)


def transpose_parts(f_final: Tensor) -> Tensor:
    """(B, parts, D) → (parts, B, D)"""
    return transpose(f_final, (1, 0, 2))


# ---------------------------------------------------------------- 网络


class ClashNetwork:
    """
    完整网络：共享提取器 → 融合 → GeM → 嵌入头 → 分类器

    融合方式：cell（MD 单元）、add（逐元素相加）、concat（通道拼接后 1×1×1 卷积回 C 通道）、
    none（单一描述子直接进入 GeM）。
    参数统一保存在 self.params（名字 → 叶子张量）；松弛架构的 α 单独保存在 self.arch。
    """

    def __init__(
        self,
        extractor: ExtractorConfig,
        clip_length: int,
        num_classes: int,
        parts: int = 4,
        embed_dim: int = 32,
        arch: Optional[CellArchitecture] = None,
        fusion: str = "cell",
        seed: int = 0,
        inputs: int = 2
    ):
        if fusion not in FUSIONS:
            raise ContractError(f"未知的融合方式: {fusion}")
        if inputs not in (1, 2):
            raise ContractError(f"描述子数量必须为 1 或 2，实际 {inputs}")
        if (fusion == "none") != (inputs == 1):
            raise ContractError(f"融合方式 {fusion} 与描述子数量 {inputs} 不匹配")
        if fusion == "cell" and arch is None:
            raise ContractError("cell 融合需要单元架构")
        self.extractor = extractor
        self.clip_length = clip_length
        self.num_classes = num_classes
        self.parts = parts
        self.embed_dim = embed_dim
        self.fusion = fusion
        self.inputs = inputs
        self.arch = arch if fusion == "cell" else None

        rng = np.random.default_rng(seed)
        channels = extractor.out_channels
        init = OrderedDict()
        init.update(init_extractor(extractor, rng))
        if self.fusion == "cell":
            init.update(init_cell(self.arch, channels, clip_length, rng))
        elif self.fusion == "concat":
            init["fusion.concat.weight"] = he_normal(rng, (channels, 2 * channels, 1, 1, 1), fan_in=2 * channels)
            init["fusion.concat.bias"] = np.zeros((1, channels, 1, 1, 1))
        init["gem.k"] = np.ones(1)
        init.update(init_head(channels, parts, embed_dim, rng))
        init["classifier.weight"] = rng.normal(0.0, np.sqrt(1.0 / embed_dim), size=(embed_dim, num_classes))

        self.params: "OrderedDict[str, Tensor]" = OrderedDict(
            (name, parameter(value, name=name)) for name, value in init.items()
        )
        self.gem = GemParams(self.params["gem.k"])
        self._cell = cell_weights(self.params)
        logger.debug(f"网络已初始化: {len(self.params)} 个参数张量, {inputs} 个描述子, 融合方式 {fusion}")

    def weight_params(self) -> "OrderedDict[str, Tensor]":
        """网络权重 w"""
        return self.params

    def alpha_params(self) -> "OrderedDict[str, Tensor]":
        """架构参数 α（离散或非单元融合时为空）"""
        if self.arch is None or self.arch.is_discrete:
            return OrderedDict()
        return OrderedDict([("arch.alpha", self.arch.alpha)])

    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def _fuse(self, f_a: Tensor, f_b: Tensor) -> Tensor:
        if self.fusion == "cell":
            return md_cell_forward(f_a, f_b, self.arch, self._cell)
        if self.fusion == "concat":
            joined = concat([f_a, f_b], axis=1)
            return add(conv3d(joined, self.params["fusion.concat.weight"]), self.params["fusion.concat.bias"])
        return add(f_a, f_b)

    def forward(self, *inputs: Tensor) -> Tuple[Tensor, Tensor]:
        """
        前向计算

        Args:
            inputs: 每个描述子一个 (B, 1, T, H, W)，顺序与配置中的描述子一致

        Returns:
            (嵌入 (B, parts, D), 分类输出 (B, classes))
        """
        if len(inputs) != self.inputs:
            raise ContractError(f"网络需要 {self.inputs} 个描述子输入，实际 {len(inputs)}")
        if self.inputs == 1:
            f_md = feature_extract(inputs[0], self.params, self.extractor)
        else:
            x_a, x_b = inputs
            if x_a.shape != x_b.shape:
                raise ContractError(f"描述子输入形状不一致: {x_a.shape} 与 {x_b.shape}")
            B = x_a.shape[0]
            # 两个描述子拼成一批通过同一组提取器参数
            features = feature_extract(concat([x_a, x_b], axis=0), self.params, self.extractor)
            f_md = self._fuse(slice_axis(features, 0, 0, B), slice_axis(features, 0, B, 2 * B))

        f_agg = gem_pool(f_md, self.gem)
        f_final = embedding_head(f_agg, self.params, self.parts)
        logits = matmul(global_mean(f_final, axes=1, keepdims=False), self.params["classifier.weight"])
        return f_final, logits

    def loss(self, inputs: Sequence[Tensor], labels: np.ndarray, margin: float) -> Tuple[Tensor, LossStats]:
        f_final, logits = self.forward(*inputs)
        return total_loss(f_final, logits, labels, margin)

    def embed(self, *inputs: np.ndarray) -> np.ndarray:
        """推理：返回拼接各条带后的嵌入 (B, parts·D)"""
        with no_grad():
            f_final, _ = self.forward(*[Tensor(x) for x in inputs])
        return f_final.data.reshape(f_final.shape[0], -1)

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        state = OrderedDict((name, p.data.copy()) for name, p in self.params.items())
        if self.arch is not None:
            state["arch.alpha"] = self.arch.alpha.data.copy()
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]):
        """载入参数（名字与形状必须一致）"""
        for name, p in self.params.items():
            if name not in state:
                raise ContractError(f"检查点缺少参数 {name}")
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != p.data.shape:
                raise ContractError(f"参数 {name} 形状 {value.shape} 与网络 {p.data.shape} 不一致")
            p.data = value.copy()
        if self.arch is not None and "arch.alpha" in state:
            self.arch.alpha.data = np.asarray(state["arch.alpha"], dtype=np.float64).copy()
