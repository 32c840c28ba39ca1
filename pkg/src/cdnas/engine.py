"""Parameter storage, batched forward/backward over decoded trees, and Adam.

Gradients are written by hand for each operator (reverse mode over the
tree). The bank's dtype drives all arithmetic, so the same code path runs in
float32 for training and in long double for finite-difference checks.
"""

from __future__ import annotations

import hashlib
import math
import zlib
from dataclasses import dataclass, field

import numpy as np

from .genome import CHILD, LIFT, ONES, ArchTree, HeadMode, Leaf, Shape
from .operators import (
    OP_NAMES,
    PARAM_SHAPES,
    STABILIZER,
    NonFiniteError,
    Op,
    eval_binary,
    eval_unary,
    sigmoid,
)

CLAMP = 1e-6
HEAD_SIZES = (512, 256)
EMBEDDINGS = ("W_s", "W_e", "W_c")


@dataclass(frozen=True)
class Dims:
    n_students: int
    n_exercises: int
    n_concepts: int
    d: int
    height: int
    concept_mode: str = "project"  # "project": h_c = Q_e W_c ; "raw": h_c = Q_e with d == K
    head_sizes: tuple[int, ...] = HEAD_SIZES

    def __post_init__(self):
        for name in ("n_students", "n_exercises", "n_concepts", "d", "height"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.concept_mode not in ("project", "raw"):
            raise ValueError(f"unknown concept_mode {self.concept_mode!r}")
        if self.concept_mode == "raw" and self.d != self.n_concepts:
            raise ValueError("concept_mode 'raw' needs d equal to the number of concepts")
        object.__setattr__(self, "head_sizes", tuple(int(s) for s in self.head_sizes))

    def to_dict(self) -> dict:
        return {
            "n_students": self.n_students, "n_exercises": self.n_exercises, "n_concepts": self.n_concepts,
            "d": self.d, "height": self.height, "concept_mode": self.concept_mode,
            "head_sizes": list(self.head_sizes),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Dims":
        data = dict(data)
        data["head_sizes"] = tuple(data.get("head_sizes", HEAD_SIZES))
        return cls(**data)


def op_key(node: int, op: Op) -> str:
    return f"{OP_NAMES[Op(op)].lower()}@{node}"


def all_op_keys(height: int) -> list[str]:
    return [op_key(t, op) for t in range(1, 2 ** (height - 1)) for op in sorted(PARAM_SHAPES)]


def _head_shapes(dims: Dims) -> list[tuple[str, tuple[int, ...]]]:
    sizes = (dims.d, *dims.head_sizes, 1)
    out = []
    for i in range(len(sizes) - 1):
        out.append((f"fc{i + 1}.W", (sizes[i], sizes[i + 1])))
        out.append((f"fc{i + 1}.b", (sizes[i + 1],)))
    return out


def _key_shape(key: str, dims: Dims) -> tuple[int, ...]:
    name, _, pos = key.partition("@")
    op = next(op for op in PARAM_SHAPES if OP_NAMES[op].lower() == name)
    return PARAM_SHAPES[op](dims.d)


def _sort_key(key: str):
    # embeddings, head layers, then operator weights by (position, name)
    if key in EMBEDDINGS:
        return (0, EMBEDDINGS.index(key), "")
    if key.startswith("fc"):
        return (1, int(key[2:].split(".")[0]), key)
    name, _, pos = key.partition("@")
    return (2, int(pos), name)


class ParamBank:
    """Named weights plus Adam moments; keys are canonical strings."""

    def __init__(self, dims: Dims, arrays: dict[str, np.ndarray]):
        self.dims = dims
        self.arrays = {k: arrays[k] for k in sorted(arrays, key=_sort_key)}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.steps: dict[str, int] = {}

    @property
    def dtype(self):
        return self.arrays["W_s"].dtype

    def __getitem__(self, key: str) -> np.ndarray:
        return self.arrays[key]

    def __contains__(self, key: str) -> bool:
        return key in self.arrays

    def keys(self) -> list[str]:
        return list(self.arrays)

    def copy(self, dtype=None) -> "ParamBank":
        cast = (lambda a: a.astype(dtype)) if dtype is not None else (lambda a: a.copy())
        out = ParamBank(self.dims, {k: cast(a) for k, a in self.arrays.items()})
        out.m = {k: cast(a) for k, a in self.m.items()}
        out.v = {k: cast(a) for k, a in self.v.items()}
        out.steps = dict(self.steps)
        return out

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for k, a in self.arrays.items():
            h.update(k.encode())
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()

    def n_values(self) -> int:
        return sum(a.size for a in self.arrays.values())


def init_params(dims: Dims, seed: int = 0, op_keys=None, dtype=np.float32) -> ParamBank:
    """Fan-balanced uniform init, biases zero.

    ``op_keys`` restricts the operator weights to the listed keys (or
    ``(node, op)`` pairs); ``None`` allocates every position/operator pair.
    Each key draws from its own stream derived from ``(seed, key)``, so a
    restricted bank matches the corresponding entries of a full one.
    """
    if op_keys is None:
        keys = all_op_keys(dims.height)
    else:
        keys = [k if isinstance(k, str) else op_key(*k) for k in op_keys]
    shapes = [("W_s", (dims.n_students, dims.d)), ("W_e", (dims.n_exercises, dims.d))]
    if dims.concept_mode == "project":
        shapes.append(("W_c", (dims.n_concepts, dims.d)))
    shapes += _head_shapes(dims)
    shapes += [(k, _key_shape(k, dims)) for k in dict.fromkeys(keys)]
    arrays = {}
    for key, shape in shapes:
        if len(shape) == 1:
            arrays[key] = np.zeros(shape, dtype=dtype)
            continue
        ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(zlib.crc32(key.encode()),))
        bound = math.sqrt(6.0 / (shape[0] + shape[1]))
        arrays[key] = np.random.default_rng(ss).uniform(-bound, bound, shape).astype(dtype)
    return ParamBank(dims, arrays)


@dataclass(frozen=True)
class Batch:
    student: np.ndarray
    exercise: np.ndarray
    q: np.ndarray  # effective Q-matrix, M x K

    def __post_init__(self):
        if len(self.student) == 0 or len(self.student) != len(self.exercise):
            raise ValueError("batch must be non-empty with matching index arrays")

    def __len__(self):
        return len(self.student)


# ---------------------------------------------------------------- forward


@dataclass
class _Trace:
    values: dict[int, np.ndarray] = field(default_factory=dict)
    operands: dict[int, list[np.ndarray]] = field(default_factory=dict)
    head: list[np.ndarray] = field(default_factory=list)
    raw: np.ndarray | None = None
    q_rows: np.ndarray | None = None


def _weight(params: ParamBank, node: int, op: Op) -> np.ndarray | None:
    if op not in PARAM_SHAPES:
        return None
    key = op_key(node, op)
    if key not in params.arrays:
        raise KeyError(f"parameter bank has no weight {key!r}")
    return params.arrays[key]


def _leaf_value(leaf: Leaf, batch: Batch, params: ParamBank, trace: _Trace) -> np.ndarray:
    if leaf == Leaf.HS:
        return params["W_s"][batch.student]
    if leaf == Leaf.HE:
        return params["W_e"][batch.exercise]
    if trace.q_rows is None:
        trace.q_rows = np.asarray(batch.q, dtype=params.dtype)[batch.exercise]
    if params.dims.concept_mode == "raw":
        return trace.q_rows
    return trace.q_rows @ params["W_c"]


def _run(tree: ArchTree, batch: Batch, params: ParamBank) -> tuple[np.ndarray, _Trace]:
    trace = _Trace()
    n = len(batch)
    d = params.dims.d
    dtype = params.dtype
    values = trace.values
    for t in tree.active():
        node = tree.nodes[t]
        if node.op is None:
            values[t] = _leaf_value(node.leaf, batch, params, trace)
            continue
        args = []
        for operand in node.inputs:
            if operand.mode == CHILD:
                args.append(values[operand.node])
            elif operand.mode == ONES:
                args.append(np.ones((n, d if operand.shape == Shape.VECTOR else 1), dtype=dtype))
            else:
                args.append(np.concatenate([values[operand.node], np.ones((n, d - 1), dtype=dtype)], axis=1))
        trace.operands[t] = args
        w = _weight(params, t, node.op)
        try:
            if len(args) == 1:
                values[t] = eval_unary(node.op, args[0], w)
            else:
                values[t] = eval_binary(node.op, args[0], args[1], w)
        except NonFiniteError as exc:
            raise NonFiniteError(f"node {t}: {exc}", node=t) from None

    z = values[tree.delivery]
    trace.raw = z
    if tree.head_mode == HeadMode.SCALAR_IDENTITY:
        p = z[:, 0]
    else:
        a = z
        n_layers = len(params.dims.head_sizes) + 1
        with np.errstate(over="ignore"):
            for i in range(1, n_layers + 1):
                a = sigmoid(a @ params[f"fc{i}.W"] + params[f"fc{i}.b"])
                trace.head.append(a)
        p = a[:, 0]
    if not np.all(np.isfinite(p)):
        raise NonFiniteError(f"node {tree.delivery}: non-finite head input", node=tree.delivery)
    return np.clip(p, CLAMP, 1.0 - CLAMP), trace


def forward(tree: ArchTree, batch: Batch, params: ParamBank) -> np.ndarray:
    """Predicted probabilities in [1e-6, 1 - 1e-6]."""
    return _run(tree, batch, params)[0]


def bce_loss(predictions, labels) -> float:
    p = np.asarray(predictions, dtype=np.float64)
    r = np.asarray(labels, dtype=np.float64)
    if p.shape != r.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {r.shape}")
    if p.size == 0:
        raise ValueError("empty input")
    return float(-np.mean(r * np.log(p) + (1.0 - r) * np.log(1.0 - p)))


# ---------------------------------------------------------------- backward


def _reduce_to(g: np.ndarray, like: np.ndarray) -> np.ndarray:
    if like.shape[1] == 1 and g.shape[1] != 1:
        return g.sum(axis=1, keepdims=True)
    return g


def _unary_grad(op: Op, x: np.ndarray, y: np.ndarray, gz: np.ndarray, w):
    """Return (grad wrt x, grad wrt weight or None)."""
    if op == Op.IDEN:
        return gz, None
    if op == Op.NEG:
        return -gz, None
    if op == Op.ABS:
        return np.sign(x) * gz, None
    if op == Op.INV:
        return -(y * y) * gz, None
    if op == Op.SQUARE:
        return 2.0 * x * gz, None
    if op == Op.SQRT:
        return np.where(x != 0, 0.5 / np.sqrt(np.abs(x) + STABILIZER), 0.0).astype(x.dtype) * gz, None
    if op == Op.TANH:
        return (1.0 - y * y) * gz, None
    if op == Op.SIGMOID:
        return y * (1.0 - y) * gz, None
    if op == Op.SOFTPLUS:
        return sigmoid(x) * gz, None
    if op == Op.SUM:
        return np.broadcast_to(gz, x.shape).copy(), None
    if op == Op.MEAN:
        return np.broadcast_to(gz / x.shape[1], x.shape).copy(), None
    # FFN / FFN_D
    return gz @ w.T, x.T @ gz


def backward(tree: ArchTree, batch: Batch, params: ParamBank, labels) -> tuple[float, dict[str, np.ndarray]]:
    """Loss and gradients for every weight the tree touches.

    Weights on inactive paths get no entry; embedding gradients are dense
    over their tables.
    """
    p, trace = _run(tree, batch, params)
    r = np.asarray(labels, dtype=params.dtype)
    if r.shape != p.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {r.shape}")
    loss = bce_loss(p, r)
    n = len(batch)
    dtype = params.dtype
    grads: dict[str, np.ndarray] = {}

    def add(key, g):
        if key in grads:
            grads[key] = grads[key] + g
        else:
            grads[key] = g

    if tree.head_mode == HeadMode.SCALAR_IDENTITY:
        z = trace.raw[:, 0]
        inside = (z > CLAMP) & (z < 1.0 - CLAMP)
        gz = np.where(inside, (p - r) / (p * (1.0 - p)), 0.0) / n
        g_node = gz.astype(dtype)[:, None]
    else:
        acts = trace.head
        out = acts[-1][:, 0]
        inside = (out > CLAMP) & (out < 1.0 - CLAMP)
        gu = (np.where(inside, out - r, 0.0) / n).astype(dtype)[:, None]
        for i in range(len(acts), 0, -1):
            a_in = acts[i - 2] if i >= 2 else trace.raw
            add(f"fc{i}.W", a_in.T @ gu)
            add(f"fc{i}.b", gu.sum(axis=0))
            ga = gu @ params[f"fc{i}.W"].T
            if i >= 2:
                gu = ga * a_in * (1.0 - a_in)
            else:
                g_node = ga

    node_grads: dict[int, np.ndarray] = {tree.delivery: g_node}
    leaf_grads: list[tuple[Leaf, np.ndarray]] = []
    for t in reversed(tree.active()):
        gz = node_grads.pop(t, None)
        if gz is None:
            continue
        node = tree.nodes[t]
        if node.op is None:
            leaf_grads.append((node.leaf, gz))
            continue
        args = trace.operands[t]
        w = _weight(params, t, node.op)
        y = trace.values[t]
        if len(args) == 1:
            gx, gw = _unary_grad(node.op, args[0], y, gz, w)
            arg_grads = [gx]
        elif node.op == Op.ADD:
            arg_grads = [_reduce_to(gz, args[0]), _reduce_to(gz, args[1])]
            gw = None
        elif node.op == Op.MUL:
            arg_grads = [_reduce_to(gz * args[1], args[0]), _reduce_to(gz * args[0], args[1])]
            gw = None
        else:
            cat = np.concatenate(args, axis=1)
            gw = cat.T @ gz
            gc = gz @ w.T
            half = args[0].shape[1]
            arg_grads = [gc[:, :half], gc[:, half:]]
        if gw is not None:
            add(op_key(t, node.op), gw)
        for operand, g in zip(node.inputs, arg_grads):
            if operand.mode == ONES:
                continue
            if operand.mode == LIFT:
                g = g[:, :1]
            prev = node_grads.get(operand.node)
            node_grads[operand.node] = g if prev is None else prev + g

    dims = params.dims
    for leaf, g in leaf_grads:
        if leaf == Leaf.HS:
            acc = np.zeros((dims.n_students, dims.d), dtype=dtype)
            np.add.at(acc, batch.student, g)
            add("W_s", acc)
        elif leaf == Leaf.HE:
            acc = np.zeros((dims.n_exercises, dims.d), dtype=dtype)
            np.add.at(acc, batch.exercise, g)
            add("W_e", acc)
        elif dims.concept_mode == "project":
            add("W_c", trace.q_rows.T @ g)
    return loss, grads


# ---------------------------------------------------------------- optimiser


def adam_step(params: ParamBank, grads: dict[str, np.ndarray], lr: float = 0.001,
              betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8) -> ParamBank:
    """In-place Adam update of the keys present in ``grads``; returns ``params``."""
    b1, b2 = betas
    for key, g in grads.items():
        w = params.arrays[key]
        if g.shape != w.shape:
            raise ValueError(f"gradient shape {g.shape} does not match {key} {w.shape}")
        g = g.astype(w.dtype, copy=False)
        if key not in params.m:
            params.m[key] = np.zeros_like(w)
            params.v[key] = np.zeros_like(w)
            params.steps[key] = 0
        params.steps[key] += 1
        step = params.steps[key]
        m = params.m[key]
        v = params.v[key]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        m_hat = m / (1 - b1**step)
        v_hat = v / (1 - b2**step)
        w -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(w.dtype, copy=False)
    return params


def project_monotone(params: ParamBank) -> None:
    """Clip head weights at zero (optional monotonicity constraint)."""
    for key, a in params.arrays.items():
        if key.startswith("fc") and key.endswith(".W"):
            np.maximum(a, 0, out=a)


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale ``grads`` in place to global L2 norm <= max_norm; returns the pre-clip norm."""
    total = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / total
        for k in grads:
            grads[k] = grads[k] * grads[k].dtype.type(scale)
    return total


# ---------------------------------------------------------------- gradient checking


def _kink_signature(tree: ArchTree, batch: Batch, params: ParamBank) -> tuple:
    """Branch pattern of every piecewise operation (Abs, Sqrt, clamps)."""
    p, trace = _run(tree, batch, params)
    parts = []
    for t, args in sorted(trace.operands.items()):
        if tree.nodes[t].op in (Op.ABS, Op.SQRT):
            parts.append(np.sign(args[0]).tobytes())
    out = trace.raw[:, 0] if tree.head_mode == HeadMode.SCALAR_IDENTITY else trace.head[-1][:, 0]
    parts.append(((out > CLAMP) & (out < 1 - CLAMP)).tobytes())
    return tuple(parts)


def check_preconditions(tree: ArchTree, batch: Batch, params: ParamBank, inv_margin: float = 3e-3,
                        kink_margin: float = 1e-4, max_abs: float = 1e6) -> bool:
    """True when no operator input sits in a singular or non-smooth region."""
    try:
        _, trace = _run(tree, batch, params)
    except NonFiniteError:
        return False
    for t, args in trace.operands.items():
        op = tree.nodes[t].op
        if op == Op.INV and np.any(np.abs(args[0] + STABILIZER) < inv_margin):
            return False
        if op in (Op.SQRT, Op.ABS) and np.any(np.abs(args[0]) < kink_margin):
            return False
        if any(np.any(np.abs(a) > max_abs) for a in args):
            return False
    out = trace.raw[:, 0] if tree.head_mode == HeadMode.SCALAR_IDENTITY else trace.head[-1][:, 0]
    return bool(np.all((out > CLAMP * 10) & (out < 1 - CLAMP * 10)))


def finite_difference_check(tree: ArchTree, batch: Batch, params: ParamBank, labels, epsilon: float = 1e-5,
                            n_coords: int = 50, seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients.

    Runs in long double. Coordinates are sampled from the weights the tree
    touches (rows used by the batch for embeddings); any coordinate whose
    perturbation flips a kink branch is skipped.
    """
    bank = params.copy(np.longdouble)
    labels = np.asarray(labels)
    _, grads = backward(tree, batch, bank, labels)
    rng = np.random.default_rng(seed)
    coords = []
    for key in sorted(grads, key=_sort_key):
        shape = bank[key].shape
        if key == "W_s":
            rows = np.unique(batch.student)
        elif key == "W_e":
            rows = np.unique(batch.exercise)
        else:
            rows = np.arange(shape[0])
        cols = range(shape[1]) if len(shape) == 2 else [None]
        coords += [(key, int(r), c) for r in rows for c in cols]
    if not coords:
        return 0.0
    order = rng.permutation(len(coords))
    base_sig = _kink_signature(tree, batch, bank)
    worst = 0.0
    used = 0
    for i in order:
        if used >= n_coords:
            break
        key, r, c = coords[i]
        arr = bank.arrays[key]
        idx = (r,) if c is None else (r, c)
        orig = arr[idx]
        arr[idx] = orig + epsilon
        sig_plus = _kink_signature(tree, batch, bank)
        f_plus = _loss_ld(tree, batch, bank, labels)
        arr[idx] = orig - epsilon
        sig_minus = _kink_signature(tree, batch, bank)
        f_minus = _loss_ld(tree, batch, bank, labels)
        arr[idx] = orig
        if sig_plus != base_sig or sig_minus != base_sig:
            continue
        numeric = (f_plus - f_minus) / (2 * epsilon)
        analytic = grads[key][idx]
        denom = max(abs(analytic), abs(numeric), 1e-8)
        worst = max(worst, float(abs(analytic - numeric) / denom))
        used += 1
    return worst


def _loss_ld(tree, batch, bank, labels):
    p = forward(tree, batch, bank)
    r = labels.astype(np.longdouble)
    return -np.mean(r * np.log(p) + (1 - r) * np.log(1 - p))
