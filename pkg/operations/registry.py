"""
候选操作注册表
"""
from typing import Dict

from operations.attention import build_attention
from operations.base import OP_KINDS, BaseOperation, OpKind
from operations.convolution import build_convolutions
from operations.pooling import build_pooling

OPERATIONS: Dict[OpKind, BaseOperation] = {
    op.kind: op for op in build_convolutions() + build_pooling() + build_attention()
}

if set(OPERATIONS) != set(OP_KINDS):
    raise RuntimeError("候选操作注册表与 OpKind 不一致")


def get_operation(kind: OpKind) -> BaseOperation:
    """按类型获取候选操作"""
    return OPERATIONS[kind]
