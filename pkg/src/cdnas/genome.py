"""Fixed-height expression-tree genomes and their decoding into computation trees.

A genome of height ``h`` has ``2**h - 1`` integer genes. The first
``2**(h-1)`` genes are the leaves, left to right, over the input alphabet
{0: Zero, 1: h_s, 2: h_e, 3: h_c}. The remaining genes are the internal
operator nodes (codes 0..16) in bottom-up level order, left to right within
a level, with the root gene last.

Trees use heap indexing: the root is node 1 and the children of node ``t``
are ``2t`` and ``2t + 1``.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from enum import Enum, IntEnum
from typing import NamedTuple, Sequence

import numpy as np

from .operators import (
    BINARY_OPS,
    DIM_SENSITIVE_OPS,
    N_OPS,
    OP_NAMES,
    OPS_BY_NAME,
    PARAM_SHAPES,
    REDUCING_OPS,
    UNARY_OPS,
    Op,
    op_meta,
)

N_LEAF_SYMBOLS = 4


class StructuralCollapse(ValueError):
    """No node of the decoded tree carries a valid computation."""


class Leaf(IntEnum):
    ZERO = 0
    HS = 1
    HE = 2
    HC = 3


LEAF_NAMES = {Leaf.HS: "h_s", Leaf.HE: "h_e", Leaf.HC: "h_c"}
LEAVES_BY_NAME = {v: k for k, v in LEAF_NAMES.items()}


class Shape(IntEnum):
    INVALID = 0
    SCALAR = 1
    VECTOR = 2


class HeadMode(str, Enum):
    SCALAR_IDENTITY = "scalar_identity"
    THREE_LAYER = "three_layer"


# Repair rule tags, in the order they are applied during decoding.
USE_LEFT = "use_left"
USE_RIGHT = "use_right"
PAD_ONES = "pad_ones"
SUBSTITUTE_SIGMOID = "substitute_sigmoid"
LIFT_SCALAR = "lift_scalar"
BROADCAST = "broadcast"
PRUNED = "pruned"
COLLAPSE_FALLBACK = "collapse_fallback"

# Operand modes
CHILD = "child"
ONES = "ones"
LIFT = "lift"  # [scalar || 1^(d-1)]


class Operand(NamedTuple):
    mode: str
    node: int  # heap index of the child; 0 for ONES
    shape: Shape  # shape of the operand as seen by the operator


class Node(NamedTuple):
    index: int
    gene: int
    op: Op | None  # resolved operator; None for leaves
    leaf: Leaf | None
    shape: Shape
    inputs: tuple[Operand, ...]
    rules: tuple[str, ...]

    @property
    def valid(self) -> bool:
        return self.shape != Shape.INVALID


def as_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def genome_length(height: int) -> int:
    return 2**height - 1


def n_leaves(height: int) -> int:
    return 2 ** (height - 1)


def gene_index(node: int, height: int) -> int:
    """Position in the gene string of heap node ``node``."""
    level = node.bit_length() - 1
    if level == height - 1:
        return node - n_leaves(height)
    return 2**height - 2 ** (level + 1) - 2**level + node


@dataclass(frozen=True)
class Genome:
    genes: tuple[int, ...]
    height: int

    def __post_init__(self):
        genes = tuple(int(g) for g in self.genes)
        object.__setattr__(self, "genes", genes)
        if self.height < 2:
            raise ValueError("height must be >= 2")
        if len(genes) != genome_length(self.height):
            raise ValueError(f"height {self.height} needs {genome_length(self.height)} genes, got {len(genes)}")
        n_leaf = n_leaves(self.height)
        for i, g in enumerate(genes):
            limit = N_LEAF_SYMBOLS if i < n_leaf else N_OPS
            if not 0 <= g < limit:
                kind = "leaf" if i < n_leaf else "operator"
                raise ValueError(f"gene {i} = {g} outside the {kind} alphabet 0..{limit - 1}")

    def __len__(self):
        return len(self.genes)

    def key(self) -> bytes:
        return bytes([self.height, *self.genes])

    def to_dict(self) -> dict:
        return {"height": self.height, "genes": list(self.genes)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, data: dict) -> "Genome":
        return cls(tuple(data["genes"]), int(data["height"]))

    @classmethod
    def from_json(cls, text: str) -> "Genome":
        return cls.from_dict(json.loads(text))

    def gene_at(self, node: int) -> int:
        return self.genes[gene_index(node, self.height)]


@dataclass(frozen=True)
class ArchTree:
    genome: Genome
    nodes: tuple[Node | None, ...]  # index 0 unused
    delivery: int
    head_mode: HeadMode

    @property
    def height(self) -> int:
        return self.genome.height

    @property
    def delivery_shape(self) -> Shape:
        return self.nodes[self.delivery].shape

    def active(self) -> list[int]:
        """Heap indices feeding the delivery node, children before parents."""
        order: list[int] = []
        seen = set()

        def visit(t):
            if t in seen:
                return
            seen.add(t)
            for operand in self.nodes[t].inputs:
                if operand.mode != ONES:
                    visit(operand.node)
            order.append(t)

        visit(self.delivery)
        return order

    def active_ops(self) -> list[Node]:
        return [self.nodes[t] for t in self.active() if self.nodes[t].op is not None]

    def param_keys(self) -> list[tuple[int, Op]]:
        return [(n.index, n.op) for n in self.active_ops() if n.op in PARAM_SHAPES]

    def uses_leaf(self, leaf: Leaf) -> bool:
        return any(self.nodes[t].leaf == leaf for t in self.active())

    def to_bytes(self) -> bytes:
        """Canonical serialisation; used to check decode determinism."""
        payload = {
            "genome": self.genome.to_dict(),
            "delivery": self.delivery,
            "head": self.head_mode.value,
            "nodes": [None if n is None else [n.index, n.gene, None if n.op is None else int(n.op),
                                              None if n.leaf is None else int(n.leaf), int(n.shape),
                                              [[o.mode, o.node, int(o.shape)] for o in n.inputs], list(n.rules)]
                      for n in self.nodes],
        }
        return json.dumps(payload, separators=(",", ":")).encode()


@dataclass(frozen=True)
class RepairReport:
    rules: dict[int, tuple[str, ...]]

    @property
    def empty(self) -> bool:
        return not self.rules

    def __bool__(self):
        return bool(self.rules)

    def applied(self) -> set[str]:
        return {r for rules in self.rules.values() for r in rules}


def _resolve_unary(op, t, gene, left, right):
    rules = []
    if left.valid:
        src = left
        if right.valid:
            rules.append(USE_LEFT)
    elif right.valid:
        src = right
        rules.append(USE_RIGHT)
    else:
        return Node(t, gene, op, None, Shape.INVALID, (), (PRUNED,))
    if op in DIM_SENSITIVE_OPS and src.shape == Shape.SCALAR:
        op = Op.SIGMOID
        rules.append(SUBSTITUTE_SIGMOID)
    if op in REDUCING_OPS:
        shape = Shape.SCALAR
    elif op == Op.FFN_D:
        shape = Shape.VECTOR
    else:
        shape = src.shape
    return Node(t, gene, op, None, shape, (Operand(CHILD, src.index, src.shape),), tuple(rules))


def _resolve_binary(op, t, gene, left, right):
    if not left.valid and not right.valid:
        return Node(t, gene, op, None, Shape.INVALID, (), (PRUNED,))
    if left.valid != right.valid:
        present = left if left.valid else right
        mine = Operand(CHILD, present.index, present.shape)
        if present.shape == Shape.SCALAR and op in DIM_SENSITIVE_OPS:
            return Node(t, gene, Op.SIGMOID, None, Shape.SCALAR, (mine,), (SUBSTITUTE_SIGMOID,))
        pad = Operand(ONES, 0, present.shape)
        inputs = (mine, pad) if left.valid else (pad, mine)
        return Node(t, gene, op, None, present.shape, inputs, (PAD_ONES,))
    lhs = Operand(CHILD, left.index, left.shape)
    rhs = Operand(CHILD, right.index, right.shape)
    if op == Op.CONCAT:
        if left.shape == Shape.SCALAR:
            return Node(t, gene, Op.SIGMOID, None, Shape.SCALAR, (lhs,), (SUBSTITUTE_SIGMOID,))
        if right.shape == Shape.SCALAR:
            return Node(t, gene, op, None, Shape.VECTOR, (lhs, Operand(LIFT, right.index, Shape.VECTOR)), (LIFT_SCALAR,))
        return Node(t, gene, op, None, Shape.VECTOR, (lhs, rhs), ())
    if left.shape != right.shape:
        return Node(t, gene, op, None, Shape.VECTOR, (lhs, rhs), (BROADCAST,))
    return Node(t, gene, op, None, left.shape, (lhs, rhs), ())


def decode_and_repair(genome: Genome) -> tuple[ArchTree, RepairReport]:
    """Resolve every node bottom-up, repairing shape conflicts.

    Raises StructuralCollapse when no node (leaf or operator) is valid.
    """
    h = genome.height
    size = genome_length(h)
    first_leaf = n_leaves(h)
    genes = genome.genes
    nodes: list[Node | None] = [None] * (size + 1)
    for t in range(first_leaf, size + 1):
        g = genes[t - first_leaf]
        shape = Shape.VECTOR if g else Shape.INVALID
        nodes[t] = Node(t, g, None, Leaf(g), shape, (), ())
    for t in range(first_leaf - 1, 0, -1):
        g = genes[gene_index(t, h)]
        op = Op(g)
        left, right = nodes[2 * t], nodes[2 * t + 1]
        if op == Op.ZERO:
            nodes[t] = Node(t, g, op, None, Shape.INVALID, (), ())
        elif op in UNARY_OPS:
            nodes[t] = _resolve_unary(op, t, g, left, right)
        else:
            nodes[t] = _resolve_binary(op, t, g, left, right)

    delivery = 1
    if not nodes[1].valid:
        # breadth-first heap order: first hit is the shallowest, leftmost valid node
        delivery = next((t for t in range(2, size + 1) if nodes[t].valid), 0)
        if delivery == 0:
            raise StructuralCollapse("genome has no valid computational node")
        n = nodes[delivery]
        nodes[delivery] = n._replace(rules=n.rules + (COLLAPSE_FALLBACK,))

    head = HeadMode.SCALAR_IDENTITY if nodes[delivery].shape == Shape.SCALAR else HeadMode.THREE_LAYER
    tree = ArchTree(genome, tuple(nodes), delivery, head)
    report = RepairReport({n.index: n.rules for n in nodes[1:] if n.rules})
    return tree, report


def decode(genome: Genome) -> ArchTree:
    return decode_and_repair(genome)[0]


# ---------------------------------------------------------------- sampling


def random_genome(height: int, seed=None) -> Genome:
    if height < 2:
        raise ValueError("height must be >= 2")
    rng = as_rng(seed)
    leaves = rng.integers(0, N_LEAF_SYMBOLS, n_leaves(height))
    ops = rng.integers(0, N_OPS, n_leaves(height) - 1)
    return Genome(tuple(leaves.tolist() + ops.tolist()), height)


def crossover_single_point(p1: Genome, p2: Genome, seed=None, cut: int | None = None) -> tuple[Genome, Genome]:
    """Swap gene suffixes after a cut in ``1..L-1`` (drawn if not given)."""
    if p1.height != p2.height:
        raise ValueError(f"height mismatch: {p1.height} vs {p2.height}")
    n = len(p1)
    if cut is None:
        cut = int(as_rng(seed).integers(1, n))
    if not 1 <= cut <= n - 1:
        raise ValueError(f"cut must lie in 1..{n - 1}")
    a, b = p1.genes, p2.genes
    return Genome(a[:cut] + b[cut:], p1.height), Genome(b[:cut] + a[cut:], p1.height)


def mutate_single_locus(g: Genome, seed=None) -> Genome:
    """Change one uniformly chosen gene to a different symbol of its alphabet."""
    rng = as_rng(seed)
    pos = int(rng.integers(0, len(g)))
    size = N_LEAF_SYMBOLS if pos < n_leaves(g.height) else N_OPS
    new = int(rng.integers(0, size - 1))
    if new >= g.genes[pos]:
        new += 1
    genes = list(g.genes)
    genes[pos] = new
    return Genome(tuple(genes), g.height)


# ---------------------------------------------------------------- rendering

LIFT_TAIL = "1^{d−1}"
VECTOR_ONES = "1^d"


def pretty_print(tree: ArchTree, positions: bool = False, annotate: bool = False) -> str:
    """Render the delivered computation as functional text.

    ``positions`` tags every operator with its heap index (``Concat@16``), which
    makes the text an exact description for position-keyed weights.
    ``annotate`` appends a note when the delivery node is not the root.
    """

    def render(t: int) -> str:
        node = tree.nodes[t]
        if node.op is None:
            return LEAF_NAMES[node.leaf]
        args = []
        for operand in node.inputs:
            if operand.mode == ONES:
                args.append(VECTOR_ONES if operand.shape == Shape.VECTOR else "1")
            elif operand.mode == LIFT:
                args.append(f"[{render(operand.node)} ‖ {LIFT_TAIL}]")
            else:
                args.append(render(operand.node))
        name = OP_NAMES[node.op] + (f"@{t}" if positions else "")
        return f"{name}({', '.join(args)})"

    text = render(tree.delivery)
    if annotate and tree.delivery != 1:
        text += f"  [fallback: delivered from node {tree.delivery}]"
    return text


_TOKEN = re.compile(
    r"\s*(?:(?P<lift>1\^\{d(?:-|−)1\})|(?P<vones>1\^d)|(?P<sones>1)(?![\w^])"
    r"|(?P<name>[A-Za-z_][A-Za-z_0-9]*)(?:@(?P<pos>\d+))?|(?P<bar>‖|\|\|)|(?P<punct>[(),\[\]]))"
)


def _tokenize(text: str) -> list[tuple[str, str, int | None]]:
    tokens = []
    i = 0
    text = text.split("  [fallback")[0].strip()
    while i < len(text):
        m = _TOKEN.match(text, i)
        if not m or m.end() == i:
            raise ValueError(f"cannot parse formula at offset {i}: {text[i:i + 20]!r}")
        i = m.end()
        kind = m.lastgroup if m.lastgroup != "pos" else "name"
        if m.group("name"):
            tokens.append(("name", m.group("name"), int(m.group("pos")) if m.group("pos") else None))
        else:
            kind = next(k for k in ("lift", "vones", "sones", "bar", "punct") if m.group(k))
            tokens.append((kind, m.group(kind), None))
        if text[i:].strip() == "":
            break
    return tokens


class _Parser:
    def __init__(self, tokens):
        self.tokens = tokens
        self.i = 0

    def peek(self):
        return self.tokens[self.i] if self.i < len(self.tokens) else (None, None, None)

    def take(self, kind=None, value=None):
        tok = self.peek()
        if tok[0] is None or (kind and tok[0] != kind) or (value and tok[1] != value):
            raise ValueError(f"unexpected token {tok[1]!r}, expected {value or kind}")
        self.i += 1
        return tok

    def expr(self):
        kind, value, pos = self.peek()
        if kind == "vones":
            self.take()
            return ("ones", Shape.VECTOR)
        if kind == "sones":
            self.take()
            return ("ones", Shape.SCALAR)
        if kind == "punct" and value == "[":
            self.take()
            inner = self.expr()
            self.take("bar")
            self.take("lift")
            self.take("punct", "]")
            return ("lift", inner)
        if kind == "name":
            self.take()
            if value in LEAVES_BY_NAME:
                return ("leaf", LEAVES_BY_NAME[value])
            if value not in OPS_BY_NAME or value == "Zero":
                raise ValueError(f"unknown operator {value!r}")
            self.take("punct", "(")
            args = [self.expr()]
            while self.peek()[1] == ",":
                self.take()
                args.append(self.expr())
            self.take("punct", ")")
            return ("op", OPS_BY_NAME[value], pos, args)
        raise ValueError(f"unexpected token {value!r}")


def _depth(ast) -> int:
    kind = ast[0]
    if kind == "leaf":
        return 0
    if kind == "ones":
        return -1
    if kind == "lift":
        return _depth(ast[1])
    children = [_depth(a) for a in ast[3]]
    nodes = [c for c in children if c >= 0]
    if not nodes:
        raise ValueError("operator without any tree input")
    if len(set(nodes)) != 1:
        raise ValueError("formula leaves sit at different depths; not embeddable in a full tree")
    return nodes[0] + 1


def parse_formula(text: str, height: int) -> Genome:
    """Embed a formula produced by pretty_print back into a genome.

    Operators tagged ``@t`` are placed at heap index ``t``; untagged ones are
    placed canonically (leftmost free slot, left child first).
    """
    parser = _Parser(_tokenize(text))
    ast = parser.expr()
    if parser.peek()[0] is not None:
        raise ValueError(f"trailing input in formula: {parser.peek()[1]!r}")
    depth = _depth(ast)
    level = height - 1 - depth
    if level < 0:
        raise ValueError(f"formula needs height >= {depth + 1}")
    root = ast[2] if ast[0] == "op" and ast[2] is not None else 2**level
    if root.bit_length() - 1 != level:
        raise ValueError(f"node {root} is not on level {level}")
    genes = [0] * genome_length(height)

    def place(node_ast, t):
        kind = node_ast[0]
        if kind == "leaf":
            genes[gene_index(t, height)] = int(node_ast[1])
            return
        if kind == "lift":
            place(node_ast[1], t)
            return
        _, op, pos, args = node_ast
        if pos is not None and pos != t:
            raise ValueError(f"{OP_NAMES[op]}@{pos} cannot sit at node {t}")
        expected = 1 if op in UNARY_OPS else 2
        if len(args) != expected:
            raise ValueError(f"{OP_NAMES[op]} takes {expected} argument(s)")
        genes[gene_index(t, height)] = int(op)
        if expected == 1:
            child = args[0]
            slot = 2 * t
            if child[0] == "op" and child[2] is not None:
                slot = child[2]
            if slot not in (2 * t, 2 * t + 1):
                raise ValueError(f"node {slot} is not a child of {t}")
            place(child, slot)
        else:
            for slot, child in zip((2 * t, 2 * t + 1), args):
                if child[0] != "ones":
                    place(child, slot)

    place(ast, root)
    return Genome(tuple(genes), height)


# ---------------------------------------------------------------- presets

PRESET_FORMULAS = {
    "min": "Concat(h_s, h_e)",
    "irt": "Sigmoid(Add(Sum(Iden(h_s)), Neg(Sum(h_e))))",
    "mirt": "Sigmoid(Sum(Mul(h_s, h_e)))",
    "ncd": "Mul(Add(Iden(h_s), Neg(h_e)), Iden(Iden(h_c)))",
}
PRESET_NAMES = ("irt", "mirt", "ncd", "min", "max")


def _max_preset(height: int) -> Genome:
    half = n_leaves(height) // 2
    left = [Leaf.HS if i % 2 == 0 else Leaf.HE for i in range(half)]
    right = [Leaf.HS if i % 2 == 0 else Leaf.HC for i in range(half)]
    ops = [Op.CONCAT] * (n_leaves(height) - 1)
    return Genome(tuple(int(x) for x in left + right + ops), height)


def preset_genome(name: str, height: int) -> Genome:
    if name == "max":
        return _max_preset(height)
    if name not in PRESET_FORMULAS:
        raise ValueError(f"unknown preset {name!r}; choose from {', '.join(PRESET_NAMES)}")
    try:
        return parse_formula(PRESET_FORMULAS[name], height)
    except ValueError as exc:
        raise ValueError(f"height {height} too small for preset {name!r}") from exc


# ---------------------------------------------------------------- analysis


def lipschitz_fraction(tree: ArchTree) -> float:
    ops = tree.active_ops()
    if not ops:
        return 1.0
    return sum(bool(op_meta(n.op).lipschitz) for n in ops) / len(ops)


def describe_presets(height: int) -> dict[str, list[int]]:
    return {name: list(preset_genome(name, height).genes) for name in PRESET_NAMES}


def genome_from_any(value, height: int) -> Genome:
    """Accept a preset name, a formula, a JSON genome, or a gene sequence."""
    if isinstance(value, Genome):
        return value
    if isinstance(value, str):
        text = value.strip()
        if text in PRESET_NAMES:
            return preset_genome(text, height)
        if text.startswith("{"):
            return Genome.from_json(text)
        if re.fullmatch(r"\d+(\s*,\s*\d+)*", text):
            return Genome(tuple(int(v) for v in text.split(",")), height)
        return parse_formula(text, height)
    if isinstance(value, dict):
        return Genome.from_dict(value)
    return Genome(tuple(value), height)


__all__ = [
    "ArchTree", "BINARY_OPS", "PRESET_FORMULAS", "PRESET_NAMES", "Genome", "HeadMode", "Leaf", "Node", "Operand", "RepairReport", "Shape",
    "StructuralCollapse", "crossover_single_point", "decode", "decode_and_repair", "gene_index",
    "genome_from_any", "genome_length", "lipschitz_fraction", "mutate_single_locus", "parse_formula",
    "preset_genome", "pretty_print", "random_genome",
]
