"""The 17-operator alphabet used by internal tree nodes.

Values are numpy arrays whose trailing axis is the feature axis: a scalar
value has trailing length 1, a vector value has trailing length ``d``. Any
leading axes (usually a batch axis) are carried through untouched.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import IntEnum
from typing import Callable

import numpy as np

STABILIZER = 1e-6


class NonFiniteError(FloatingPointError):
    """Raised when an operator (or a node in a tree) produces inf/nan."""

    def __init__(self, message: str, node: int | None = None):
        super().__init__(message)
        self.node = node


class Op(IntEnum):
    ZERO = 0
    IDEN = 1
    NEG = 2
    ABS = 3
    INV = 4
    SQUARE = 5
    SQRT = 6
    TANH = 7
    SIGMOID = 8
    SOFTPLUS = 9
    SUM = 10
    MEAN = 11
    FFN = 12
    FFN_D = 13
    ADD = 14
    MUL = 15
    CONCAT = 16


N_OPS = len(Op)

# Display names, also the tokens accepted by the formula parser.
OP_NAMES = {
    Op.ZERO: "Zero",
    Op.IDEN: "Iden",
    Op.NEG: "Neg",
    Op.ABS: "Abs",
    Op.INV: "Inv",
    Op.SQUARE: "Square",
    Op.SQRT: "Sqrt",
    Op.TANH: "Tanh",
    Op.SIGMOID: "Sigmoid",
    Op.SOFTPLUS: "Softplus",
    Op.SUM: "Sum",
    Op.MEAN: "Mean",
    Op.FFN: "FFN",
    Op.FFN_D: "FFN_D",
    Op.ADD: "Add",
    Op.MUL: "Mul",
    Op.CONCAT: "Concat",
}
OPS_BY_NAME = {name: op for op, name in OP_NAMES.items()}

# Operators owning a trainable weight, and the weight shape as a function of d.
PARAM_SHAPES: dict[Op, Callable[[int], tuple[int, int]]] = {
    Op.FFN: lambda d: (d, 1),
    Op.FFN_D: lambda d: (d, d),
    Op.CONCAT: lambda d: (2 * d, d),
}


@dataclass(frozen=True)
class OperatorMeta:
    kind: Op
    arity: int
    dim_sensitive: bool
    lipschitz: bool | None
    # Human readable form of the Lipschitz constant; numeric value via lipschitz_bound().
    bound: str


_META = {
    Op.ZERO: OperatorMeta(Op.ZERO, 0, False, None, "n/a"),
    Op.IDEN: OperatorMeta(Op.IDEN, 1, False, True, "1"),
    Op.NEG: OperatorMeta(Op.NEG, 1, False, True, "1"),
    Op.ABS: OperatorMeta(Op.ABS, 1, False, True, "1"),
    Op.INV: OperatorMeta(Op.INV, 1, False, False, "unbounded"),
    Op.SQUARE: OperatorMeta(Op.SQUARE, 1, False, False, "unbounded"),
    Op.SQRT: OperatorMeta(Op.SQRT, 1, False, False, "unbounded"),
    Op.TANH: OperatorMeta(Op.TANH, 1, False, True, "1"),
    Op.SIGMOID: OperatorMeta(Op.SIGMOID, 1, False, True, "1/4"),
    Op.SOFTPLUS: OperatorMeta(Op.SOFTPLUS, 1, False, True, "1"),
    Op.SUM: OperatorMeta(Op.SUM, 1, True, True, "sqrt(d)"),
    Op.MEAN: OperatorMeta(Op.MEAN, 1, True, True, "1/sqrt(d)"),
    Op.FFN: OperatorMeta(Op.FFN, 1, True, True, "||W_ffn||_2"),
    Op.FFN_D: OperatorMeta(Op.FFN_D, 1, True, True, "||W_ffnd||_2"),
    Op.ADD: OperatorMeta(Op.ADD, 2, False, True, "1"),
    Op.MUL: OperatorMeta(Op.MUL, 2, False, False, "unbounded"),
    Op.CONCAT: OperatorMeta(Op.CONCAT, 2, True, True, "sqrt(2)*||W_concat||_2"),
}

UNARY_OPS = frozenset(op for op, m in _META.items() if m.arity == 1)
BINARY_OPS = frozenset(op for op, m in _META.items() if m.arity == 2)
DIM_SENSITIVE_OPS = frozenset(op for op, m in _META.items() if m.dim_sensitive)
# Operators that collapse a vector to a scalar.
REDUCING_OPS = frozenset({Op.SUM, Op.MEAN, Op.FFN})


def op_meta(kind: int) -> OperatorMeta:
    return _META[Op(kind)]


def lipschitz_bound(kind: int, d: int, weight: np.ndarray | None = None) -> float:
    """Numeric Lipschitz constant of ``kind`` in dimension ``d``.

    Parameterised operators need their weight; the bound is the spectral
    norm (times sqrt(2) for Concat). Non-Lipschitz operators return inf.
    """
    kind = Op(kind)
    meta = _META[kind]
    if meta.lipschitz is None:
        raise ValueError("Zero is a placeholder and has no Lipschitz constant")
    if not meta.lipschitz:
        return math.inf
    if kind == Op.SIGMOID:
        return 0.25
    if kind == Op.SUM:
        return math.sqrt(d)
    if kind == Op.MEAN:
        return 1.0 / math.sqrt(d)
    if kind in PARAM_SHAPES:
        if weight is None:
            raise ValueError(f"{OP_NAMES[kind]} bound depends on its weight")
        norm = float(np.linalg.norm(np.asarray(weight, dtype=np.float64), 2))
        return math.sqrt(2.0) * norm if kind == Op.CONCAT else norm
    return 1.0


def sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form is overflow-free and keeps the input dtype (incl. longdouble)
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _check(out: np.ndarray, kind: Op) -> np.ndarray:
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(f"{OP_NAMES[kind]} produced a non-finite value")
    return out


def eval_unary(kind: int, x, weight: np.ndarray | None = None) -> np.ndarray:
    """Apply a unary operator. ``weight`` is required for FFN and FFN_D."""
    kind = Op(kind)
    if kind not in UNARY_OPS:
        raise ValueError(f"{OP_NAMES[kind]} is not unary")
    x = np.asarray(x)
    if not np.issubdtype(x.dtype, np.floating):
        x = x.astype(np.float64)
    with np.errstate(all="ignore"):
        if kind == Op.IDEN:
            out = x.copy()
        elif kind == Op.NEG:
            out = -x
        elif kind == Op.ABS:
            out = np.abs(x)
        elif kind == Op.INV:
            out = 1.0 / (x + STABILIZER)
        elif kind == Op.SQUARE:
            out = x * x
        elif kind == Op.SQRT:
            out = np.sign(x) * np.sqrt(np.abs(x) + STABILIZER)
        elif kind == Op.TANH:
            out = np.tanh(x)
        elif kind == Op.SIGMOID:
            out = sigmoid(x)
        elif kind == Op.SOFTPLUS:
            out = np.logaddexp(0.0, x)
        elif kind == Op.SUM:
            out = x.sum(axis=-1, keepdims=True)
        elif kind == Op.MEAN:
            out = x.mean(axis=-1, keepdims=True)
        else:
            if weight is None:
                raise ValueError(f"{OP_NAMES[kind]} requires a weight")
            out = x @ weight
    return _check(out, kind)


def eval_binary(kind: int, x, y, weight: np.ndarray | None = None) -> np.ndarray:
    """Apply a binary operator.

    Add and Mul broadcast a scalar against a vector. Concat needs two
    vectors of equal length and a ``(2d, d)`` weight.
    """
    kind = Op(kind)
    if kind not in BINARY_OPS:
        raise ValueError(f"{OP_NAMES[kind]} is not binary")
    x = np.asarray(x)
    y = np.asarray(y)
    if x.shape[-1] != 1 and y.shape[-1] != 1 and x.shape[-1] != y.shape[-1]:
        raise ValueError(f"incompatible vector lengths {x.shape[-1]} and {y.shape[-1]}")
    with np.errstate(all="ignore"):
        if kind == Op.ADD:
            out = x + y
        elif kind == Op.MUL:
            out = x * y
        else:
            if x.shape[-1] != y.shape[-1]:
                raise ValueError("Concat needs two vectors of equal length")
            if weight is None or weight.shape[0] != 2 * x.shape[-1]:
                raise ValueError("Concat requires a (2d, d) weight")
            out = np.concatenate([x, y], axis=-1) @ weight
    return _check(out, kind)


def empirical_lipschitz(
    kind: int,
    n_pairs: int,
    domain: tuple[float, float] = (-10.0, 10.0),
    d: int = 8,
    seed: int = 0,
    weight: np.ndarray | None = None,
) -> tuple[float, float]:
    """Largest observed ``||f(x)-f(y)|| / ||x-y||`` over random pairs.

    For binary operators the denominator is ``||x-x'|| + ||y-y'||``.
    Returns ``(estimate, bound)`` where ``bound`` is lipschitz_bound().
    """
    kind = Op(kind)
    low, high = domain
    if n_pairs < 1:
        raise ValueError("n_pairs must be >= 1")
    if not high > low:
        raise ValueError("degenerate domain")
    if kind in PARAM_SHAPES and weight is None:
        raise ValueError(f"{OP_NAMES[kind]} requires a weight")
    rng = np.random.default_rng(seed)
    shape = (n_pairs, d)
    if kind in BINARY_OPS:
        x, y, x2, y2 = (rng.uniform(low, high, shape) for _ in range(4))
        num = np.linalg.norm(eval_binary(kind, x, y, weight) - eval_binary(kind, x2, y2, weight), axis=-1)
        den = np.linalg.norm(x - x2, axis=-1) + np.linalg.norm(y - y2, axis=-1)
    else:
        x, y = rng.uniform(low, high, shape), rng.uniform(low, high, shape)
        num = np.linalg.norm(eval_unary(kind, x, weight) - eval_unary(kind, y, weight), axis=-1)
        den = np.linalg.norm(x - y, axis=-1)
    keep = den > 0
    if not np.any(keep):
        raise ValueError("all sampled pairs coincide")
    estimate = float(np.max(num[keep] / den[keep]))
    bound = lipschitz_bound(kind, d, weight) if _META[kind].lipschitz else math.inf
    return estimate, bound


def pair_ratio(kind: int, x, y, x2=None, y2=None, weight=None) -> float:
    """Lipschitz ratio for one explicit input pair (used for witnesses)."""
    kind = Op(kind)
    x, y = np.atleast_1d(np.asarray(x, dtype=np.float64)), np.atleast_1d(np.asarray(y, dtype=np.float64))
    if kind in BINARY_OPS:
        x2, y2 = np.atleast_1d(np.asarray(x2, dtype=np.float64)), np.atleast_1d(np.asarray(y2, dtype=np.float64))
        num = np.linalg.norm(eval_binary(kind, x, y, weight) - eval_binary(kind, x2, y2, weight))
        den = np.linalg.norm(x - x2) + np.linalg.norm(y - y2)
    else:
        num = np.linalg.norm(eval_unary(kind, x, weight) - eval_unary(kind, y, weight))
        den = np.linalg.norm(x - y)
    return float(num / den)
