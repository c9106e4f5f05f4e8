"""
梯度校验服务
用中心差分核对全部自动微分原语、12 个候选操作与超网络组件的解析梯度
"""
from typing import Callable, Dict, List, Sequence, Tuple

import numpy as np
import pandas as pd

from operations.base import OP_KINDS
from operations.registry import get_operation
from services import autodiff as ad
from services.autodiff import Tape, Tensor, backward, no_grad, parameter
from services.supernet import GemParams, batch_all_triplet_loss, embedding_head, gem_pool, mixed_op
from utils.errors import GradcheckError, InputError
from utils.logger import get_logger

logger = get_logger("gradcheck")

EPSILON = 1e-5
TOLERANCE = 1e-4
# 每个输入张量最多抽查的坐标数
COORDINATES_PER_TENSOR = 24
# 逐坐标相对误差的分母下限（两侧梯度都接近零的坐标）
COORDINATE_FLOOR = 1e-6

# 小尺寸测试特征图 (B, C, T, H, W)
_FEATURE_SHAPE = (2, 4, 4, 5, 4)

InputBuilder = Callable[[np.random.Generator], List[np.ndarray]]
Forward = Callable[[List[Tensor]], Tensor]


class GradcheckCase:
    """一个校验对象：随机输入生成器 + 前向函数"""

    def __init__(self, name: str, inputs: InputBuilder, forward: Forward):
        self.name = name
        self.inputs = inputs
        self.forward = forward

    def __repr__(self):
        return f"<GradcheckCase {self.name}>"


class GradcheckResult:
    """
    一个校验对象在全部试验上的误差

    max_error 是按抽查坐标向量范数计的相对误差（通过与否以它为准）；
    coordinate_error 是逐坐标相对误差的最大值，分母下限为 COORDINATE_FLOOR。
    """

    def __init__(self, name: str, max_error: float, trials: int, tolerance: float = TOLERANCE,
                 coordinate_error: float = 0.0):
        self.name = name
        self.max_error = max_error
        self.coordinate_error = coordinate_error
        self.trials = trials
        self.passed = bool(max_error < tolerance)

    def __repr__(self):
        status = "通过" if self.passed else "失败"
        return f"<GradcheckResult {self.name} {self.max_error:.2e}/{self.coordinate_error:.2e} {status}>"


def _normal(*shape):
    return lambda rng: rng.standard_normal(shape)


def _positive(*shape):
    return lambda rng: rng.uniform(0.5, 2.0, size=shape)


def _features(rng: np.random.Generator) -> np.ndarray:
    return rng.standard_normal(_FEATURE_SHAPE)


def _stack(*builders: InputBuilder) -> InputBuilder:
    return lambda rng: [b(rng) for b in builders]


def primitive_cases() -> List[GradcheckCase]:
    """自动微分原语"""
    return [
        GradcheckCase("add", _stack(_normal(3, 4), _normal(4)), lambda t: ad.add(t[0], t[1])),
        GradcheckCase("subtract", _stack(_normal(3, 4), _normal(3, 1)), lambda t: ad.sub(t[0], t[1])),
        GradcheckCase("multiply", _stack(_normal(3, 4), _normal(1, 4)), lambda t: ad.mul(t[0], t[1])),
        GradcheckCase(
            "power",
            _stack(_positive(3, 4), lambda rng: rng.uniform(0.5, 3.0, size=(1,))),
            lambda t: ad.power(t[0], t[1])
        ),
        GradcheckCase("sigmoid", _stack(_normal(3, 4)), lambda t: ad.sigmoid(t[0])),
        GradcheckCase("relu", _stack(_normal(3, 4)), lambda t: ad.leaky_relu(t[0], 0.01)),
        GradcheckCase("clamp_min", _stack(_normal(3, 4)), lambda t: ad.clamp_min(t[0], 0.1)),
        GradcheckCase("log", _stack(_positive(3, 4)), lambda t: ad.log(t[0])),
        GradcheckCase("sqrt", _stack(_positive(3, 4)), lambda t: ad.sqrt(t[0])),
        GradcheckCase("sum", _stack(_normal(2, 3, 4)), lambda t: ad.sum_(t[0], axes=(0, 2))),
        GradcheckCase("global_mean", _stack(_normal(2, 3, 4)), lambda t: ad.global_mean(t[0], axes=1)),
        GradcheckCase("max", _stack(_normal(2, 3, 4)), lambda t: ad.max_(t[0], axes=(1, 2))),
        GradcheckCase("reshape", _stack(_normal(2, 3, 4)), lambda t: ad.reshape(t[0], (6, 4))),
        GradcheckCase("transpose", _stack(_normal(2, 3, 4)), lambda t: ad.transpose(t[0], (2, 0, 1))),
        GradcheckCase("slice", _stack(_normal(2, 5, 3)), lambda t: ad.slice_axis(t[0], 1, 1, 4)),
        GradcheckCase(
            "concat",
            _stack(_normal(2, 3), _normal(2, 2)),
            lambda t: ad.concat([t[0], t[1]], axis=1)
        ),
        GradcheckCase("softmax", _stack(_normal(3, 5)), lambda t: ad.softmax(t[0], axis=1)),
        GradcheckCase("log_softmax", _stack(_normal(3, 5)), lambda t: ad.log_softmax(t[0], axis=1)),
        GradcheckCase("matmul", _stack(_normal(2, 3, 4), _normal(4, 5)), lambda t: ad.matmul(t[0], t[1])),
        GradcheckCase(
            "conv3d",
            _stack(_normal(1, 4, 3, 4, 4), _normal(6, 2, 3, 3, 3)),
            lambda t: ad.conv3d(t[0], t[1], dilation=2, groups=2)
        ),
        GradcheckCase(
            "conv3d_depthwise",
            _stack(_normal(1, 4, 3, 4, 4), _normal(4, 1, 3, 3, 3)),
            lambda t: ad.conv3d(t[0], t[1], groups=4)
        ),
        GradcheckCase("maxpool3d", _stack(_normal(1, 2, 4, 4, 4)), lambda t: ad.maxpool3d(t[0], kernel=3)),
        GradcheckCase(
            "maxpool3d_strided",
            _stack(_normal(1, 2, 2, 4, 4)),
            lambda t: ad.maxpool3d(t[0], kernel=(1, 2, 2), stride=(1, 2, 2), padding=None)
        ),
        GradcheckCase("avgpool3d", _stack(_normal(1, 2, 4, 4, 4)), lambda t: ad.avgpool3d(t[0], kernel=3)),
    ]


def operation_cases() -> List[GradcheckCase]:
    """12 个候选操作（对输入与全部参数求导）"""
    B, C, T, H, W = _FEATURE_SHAPE
    cases = []
    for kind in OP_KINDS:
        op = get_operation(kind)

        def build(rng, op=op):
            params = op.init_params(C, T, rng)
            return [_features(rng)] + [params[name] for name in sorted(params)]

        def forward(t, op=op):
            names = sorted(op.init_params(C, T, np.random.default_rng(0)))
            return op.forward(t[0], dict(zip(names, t[1:])))

        cases.append(GradcheckCase(kind.value, build, forward))
    return cases


def component_cases() -> List[GradcheckCase]:
    """超网络组件：混合操作的 α 梯度、GeM 指数梯度、嵌入头与三元组损失"""
    B, C, T, H, W = _FEATURE_SHAPE

    def mixed_build(rng):
        return [rng.standard_normal((1, len(OP_KINDS))), _features(rng)]

    def mixed_forward(t):
        rng = np.random.default_rng(1)
        weights = {
            kind: {k: Tensor(v) for k, v in get_operation(kind).init_params(C, T, rng).items()}
            for kind in OP_KINDS
        }
        return mixed_op(t[1], t[0], weights)

    def gem_build(rng):
        return [rng.uniform(0.1, 1.0, size=_FEATURE_SHAPE), rng.uniform(1.0, 4.0, size=(1,))]

    def head_build(rng):
        return [rng.standard_normal((B, C, 1, 4, W))] + [rng.standard_normal((C, 3)) for _ in range(2)]

    def head_forward(t):
        return embedding_head(t[0], {"head.part0.weight": t[1], "head.part1.weight": t[2]}, parts=2)

    def triplet_forward(t):
        dist = ad.sqrt(ad.add(ad.mul(t[0], t[0]), 0.1))
        loss, _, _ = batch_all_triplet_loss(dist, np.array([0, 0, 1, 1]), margin=0.2)
        return loss

    return [
        GradcheckCase("mixed_op", mixed_build, mixed_forward),
        GradcheckCase("gem_pool", gem_build, lambda t: gem_pool(t[0], GemParams(t[1], eps=1e-6))),
        GradcheckCase("embedding_head", head_build, head_forward),
        GradcheckCase("batch_all_triplet", _stack(_normal(2, 4, 4)), triplet_forward),
    ]


def all_cases() -> Dict[str, GradcheckCase]:
    return {case.name: case for case in primitive_cases() + operation_cases() + component_cases()}


def select_cases(ops: str) -> List[GradcheckCase]:
    """按 --ops 取值选择校验对象：all 或逗号分隔的名字"""
    cases = all_cases()
    if ops == "all":
        return list(cases.values())
    selected = []
    for name in [n.strip() for n in ops.split(",") if n.strip()]:
        if name not in cases:
            raise InputError(f"未知的校验对象: {name}（可选: {', '.join(cases)}）")
        selected.append(cases[name])
    if not selected:
        raise InputError("未指定校验对象")
    return selected


def _objective(case: GradcheckCase, values: Sequence[np.ndarray], projection: np.ndarray) -> float:
    with no_grad():
        out = case.forward([Tensor(v) for v in values])
    return float(np.sum(out.data * projection))


def check_trial(case: GradcheckCase, rng: np.random.Generator, eps: float = EPSILON) -> Tuple[float, float]:
    """
    单次试验：把输出投影成标量，比较解析梯度与中心差分

    Returns:
        (按抽查坐标范数计的最大相对误差, 逐坐标最大相对误差)，均取各输入张量上的最大值
    """
    values = case.inputs(rng)
    with no_grad():
        out_shape = case.forward([Tensor(v) for v in values]).shape
    projection = rng.standard_normal(out_shape)

    with Tape():
        leaves = [parameter(v) for v in values]
        out = case.forward(leaves)
        grads = backward(ad.sum_(ad.mul(out, projection)))

    worst = coordinate_worst = 0.0
    for i, value in enumerate(values):
        analytic = grads[leaves[i]].reshape(-1)
        count = min(COORDINATES_PER_TENSOR, value.size)
        coords = rng.choice(value.size, size=count, replace=False)
        numeric = np.empty(count)
        for n, c in enumerate(coords):
            plus = [v.copy() for v in values]
            minus = [v.copy() for v in values]
            plus[i].reshape(-1)[c] += eps
            minus[i].reshape(-1)[c] -= eps
            numeric[n] = (_objective(case, plus, projection) - _objective(case, minus, projection)) / (2 * eps)
        a = analytic[coords]
        scale = max(np.linalg.norm(a), np.linalg.norm(numeric), 1e-6)
        worst = max(worst, float(np.linalg.norm(a - numeric) / scale))
        per_coordinate = np.abs(a - numeric) / np.maximum(np.maximum(np.abs(a), np.abs(numeric)), COORDINATE_FLOOR)
        coordinate_worst = max(coordinate_worst, float(per_coordinate.max()))
    return worst, coordinate_worst


def run_gradcheck(ops: str = "all", trials: int = 20, seed: int = 0, tolerance: float = TOLERANCE) -> List[GradcheckResult]:
    """
    对选中的对象逐个做多次随机试验

    Returns:
        每个对象一个结果（不抛出校验失败，由调用方决定）
    """
    if trials < 1:
        raise InputError(f"试验次数必须 >= 1，实际 {trials}")
    results = []
    for case in select_cases(ops):
        rng = np.random.default_rng([seed, sum(case.name.encode("utf-8"))])
        errors = [check_trial(case, rng) for _ in range(trials)]
        result = GradcheckResult(
            case.name, max(e[0] for e in errors), trials, tolerance,
            coordinate_error=max(e[1] for e in errors)
        )
        if not result.passed:
            logger.error(
                f"梯度校验失败: {case.name} 最大相对误差 {result.max_error:.3e}"
                f"（逐坐标 {result.coordinate_error:.3e}）"
            )
        else:
            logger.debug(
                f"梯度校验通过: {case.name} 最大相对误差 {result.max_error:.3e}"
                f"（逐坐标 {result.coordinate_error:.3e}）"
            )
        results.append(result)
    return results


def results_table(results: Sequence[GradcheckResult]) -> pd.DataFrame:
    """max_rel_error 为范数相对误差（判定用），max_coord_rel_error 为逐坐标相对误差最大值"""
    return pd.DataFrame(
        [(r.name, r.max_error, r.coordinate_error, r.trials, "ok" if r.passed else "FAIL") for r in results],
        columns=["name", "max_rel_error", "max_coord_rel_error", "trials", "status"]
    )


def ensure_passed(results: Sequence[GradcheckResult]):
    """
    Raises:
        GradcheckError: 任一对象未通过（错误中列出全部失败名字）
    """
    failed = [r.name for r in results if not r.passed]
    if failed:
        raise GradcheckError(failed)
