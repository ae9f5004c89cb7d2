"""The NAS-Bench-201 cell search space.

A cell is a 4-node DAG (node 0 = cell input, node 3 = cell output) whose six
edges each carry one of five operations.  Edges are numbered 1..6 and connect
the node pairs ``(0,1), (0,2), (1,2), (0,3), (1,3), (2,3)``.

Two cells are isomorphic when they compute the same function up to a
relabelling of their trainable weights.  The canonical form used here is the
symbolic expression of the output node: every node is the sorted sum of its
incoming terms, ``skip_connect`` substitutes its source expression, ``none``
contributes the zero marker ``#`` and any edge leaving a node whose expression
is exactly ``#`` is zero as well.  Over all 15625 cells this yields exactly
6466 classes.  The number of ``#`` terms is part of the key, so the classes
refine functional equality (4930 distinct functions) rather than match it.
"""

from __future__ import annotations

import enum
import itertools
import json
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterator, Sequence

import numpy as np

__all__ = [
    "EDGES",
    "NUM_EDGES",
    "SPACE_SIZE",
    "OpKind",
    "Cell",
    "CanonicalGraph",
    "ArchStringError",
    "decode_arch_string",
    "encode_arch_string",
    "enumerate_space",
    "cell_from_id",
    "local_id",
    "canonicalize",
    "term_expressions",
    "reduce_graph",
    "equivalence_classes",
    "canonical_id",
    "canonical_ids",
    "edit_distance",
    "neighbors",
    "kernel_param_count",
    "conv_counts",
    "mutate",
    "export_classes",
]

EDGES: tuple[tuple[int, int], ...] = ((0, 1), (0, 2), (1, 2), (0, 3), (1, 3), (2, 3))
NUM_EDGES = 6
SPACE_SIZE = 5**NUM_EDGES

ZERO = "#"


class OpKind(enum.IntEnum):
    """Edge operations, in enumeration order."""

    NONE = 0
    SKIP_CONNECT = 1
    NOR_CONV_1X1 = 2
    NOR_CONV_3X3 = 3
    AVG_POOL_3X3 = 4

    @property
    def token(self) -> str:
        return _TOKENS[self]

    @classmethod
    def from_token(cls, token: str) -> "OpKind":
        try:
            return _FROM_TOKEN[token]
        except KeyError:
            raise ValueError(f"unknown operation {token!r}") from None

    @property
    def is_conv(self) -> bool:
        return self in (OpKind.NOR_CONV_1X1, OpKind.NOR_CONV_3X3)


_TOKENS = {
    OpKind.NONE: "none",
    OpKind.SKIP_CONNECT: "skip_connect",
    OpKind.NOR_CONV_1X1: "nor_conv_1x1",
    OpKind.NOR_CONV_3X3: "nor_conv_3x3",
    OpKind.AVG_POOL_3X3: "avg_pool_3x3",
}
_FROM_TOKEN = {v: k for k, v in _TOKENS.items()}


@dataclass(frozen=True)
class Cell:
    """Operation assignment for the six cell edges (``ops[0]`` is edge 1)."""

    ops: tuple[OpKind, ...]

    def __post_init__(self):
        ops = tuple(OpKind(o) for o in self.ops)
        if len(ops) != NUM_EDGES:
            raise ValueError(f"a cell has {NUM_EDGES} edges, got {len(ops)}")
        object.__setattr__(self, "ops", ops)

    @classmethod
    def uniform(cls, op: OpKind) -> "Cell":
        return cls((op,) * NUM_EDGES)

    @classmethod
    def from_string(cls, s: str) -> "Cell":
        return decode_arch_string(s)

    def to_string(self) -> str:
        return encode_arch_string(self)

    @property
    def local_id(self) -> int:
        return local_id(self)

    def replace(self, edge: int, op: OpKind) -> "Cell":
        """Return a copy with 0-based ``edge`` set to ``op``."""
        ops = list(self.ops)
        ops[edge] = OpKind(op)
        return Cell(tuple(ops))

    def __iter__(self) -> Iterator[OpKind]:
        return iter(self.ops)

    def __str__(self) -> str:
        return encode_arch_string(self)


class ArchStringError(ValueError):
    pass


def decode_arch_string(s: str) -> Cell:
    """Parse ``|op~0|+|op~0|op~1|+|op~0|op~1|op~2|`` into a :class:`Cell`."""
    groups = s.split("+")
    if len(groups) != 3:
        raise ArchStringError(f"expected 3 '+'-separated groups, got {len(groups)} in {s!r}")
    by_edge: dict[tuple[int, int], OpKind] = {}
    for dst, group in enumerate(groups, start=1):
        if not (group.startswith("|") and group.endswith("|")) or len(group) < 2:
            raise ArchStringError(f"group {dst} is not '|'-delimited: {group!r}")
        tokens = group[1:-1].split("|")
        if len(tokens) != dst:
            raise ArchStringError(f"group {dst} must hold {dst} operations, got {len(tokens)}: {group!r}")
        for src, token in enumerate(tokens):
            name, sep, suffix = token.partition("~")
            if not sep or suffix != str(src):
                raise ArchStringError(f"group {dst}: expected source suffix '~{src}' in {token!r}")
            try:
                by_edge[(src, dst)] = OpKind.from_token(name)
            except ValueError:
                raise ArchStringError(f"group {dst}: unknown operation {name!r}") from None
    return Cell(tuple(by_edge[e] for e in EDGES))


def encode_arch_string(c: Cell) -> str:
    ops = dict(zip(EDGES, c.ops))
    groups = []
    for dst in (1, 2, 3):
        groups.append("|" + "|".join(f"{ops[(src, dst)].token}~{src}" for src in range(dst)) + "|")
    return "+".join(groups)


def cell_from_id(i: int) -> Cell:
    """Base-5 decoding with edge 1 as the most significant digit."""
    if not 0 <= i < SPACE_SIZE:
        raise ValueError(f"local id {i} outside [0, {SPACE_SIZE - 1}]")
    digits = []
    for _ in range(NUM_EDGES):
        i, d = divmod(i, 5)
        digits.append(d)
    return Cell(tuple(reversed(digits)))


def local_id(c: Cell) -> int:
    i = 0
    for op in c.ops:
        i = i * 5 + int(op)
    return i


def enumerate_space() -> list[tuple[int, Cell]]:
    return [(i, Cell(ops)) for i, ops in enumerate(itertools.product(OpKind, repeat=NUM_EDGES))]


# -- canonical form ---------------------------------------------------------


@dataclass(frozen=True)
class CanonicalGraph:
    """Canonical form of a cell; equal forms mean isomorphic cells."""

    expression: str

    @property
    def is_zero(self) -> bool:
        return all(t == ZERO for t in self.expression.split("+"))


def _node_expressions(c: Cell) -> tuple[list[str], list[str]]:
    """Return (node expressions, per-edge term strings)."""
    nodes = ["0"]
    terms = [""] * NUM_EDGES
    for dst in (1, 2, 3):
        node_terms = []
        for e, (src, d) in enumerate(EDGES):
            if d != dst:
                continue
            op = c.ops[e]
            if op == OpKind.NONE or nodes[src] == ZERO:
                t = ZERO
            elif op == OpKind.SKIP_CONNECT:
                t = nodes[src]
            else:
                t = f"({nodes[src]})@{op.token}"
            terms[e] = t
            node_terms.append(t)
        nodes.append("+".join(sorted(node_terms)))
    return nodes, terms


def canonicalize(c: Cell) -> CanonicalGraph:
    return CanonicalGraph(_node_expressions(c)[0][3])


def term_expressions(c: Cell) -> tuple[str, ...]:
    """The canonical term each edge contributes to its destination node.

    Edges whose term strings match compute the same function of the cell
    input whenever their weights match, which is what makes weight seeding by
    term string preserve functional equality across an isomorphism class.
    """
    return tuple(_node_expressions(c)[1])


def reduce_graph(c: Cell) -> tuple[tuple[int, int, int], ...]:
    """Edge-multiset reduction of a cell (structural view, not the class key).

    Drops ``none`` edges, removes intermediate nodes without inputs or without
    a path to the output, merges nodes fed by a single skip edge into their
    predecessor, then relabels the surviving intermediate nodes to the
    lexicographically least sorted edge list.  Equal reductions compute equal
    functions, but the induced partition (7055 classes) is not the one of
    :func:`canonicalize`, which keeps dead edges apart only through the
    multiplicity of zero terms.
    """
    edges = [(s, d, int(o)) for (s, d), o in zip(EDGES, c.ops) if o != OpKind.NONE]
    nodes = {0, 1, 2, 3}

    def reaches_output(n):
        stack, seen = [n], {n}
        while stack:
            x = stack.pop()
            for s, d, _ in edges:
                if s == x and d not in seen:
                    seen.add(d)
                    stack.append(d)
        return 3 in seen

    changed = True
    while changed:
        changed = False
        for n in (1, 2):
            if n in nodes and (not any(d == n for _, d, _ in edges) or not reaches_output(n)):
                nodes.discard(n)
                edges = [e for e in edges if n not in e[:2]]
                changed = True
        for n in (1, 2):
            if n not in nodes:
                continue
            incoming = [e for e in edges if e[1] == n]
            if len(incoming) == 1 and incoming[0][2] == OpKind.SKIP_CONNECT:
                pred = incoming[0][0]
                edges.remove(incoming[0])
                edges = [(pred if s == n else s, d, o) for s, d, o in edges]
                nodes.discard(n)
                changed = True
    inner = sorted(nodes - {0, 3})
    best = None
    for perm in itertools.permutations(range(1, len(inner) + 1)):
        relabel = {0: 0, 3: 3, **dict(zip(inner, perm))}
        key = tuple(sorted((relabel[s], relabel[d], o) for s, d, o in edges))
        if best is None or key < best:
            best = key
    return best


@lru_cache(maxsize=1)
def _class_table() -> tuple[np.ndarray, dict[int, tuple[int, ...]]]:
    rep_of_form: dict[CanonicalGraph, int] = {}
    reps = np.empty(SPACE_SIZE, dtype=np.int64)
    members: dict[int, list[int]] = {}
    for i, c in enumerate_space():
        rep = rep_of_form.setdefault(canonicalize(c), i)
        reps[i] = rep
        members.setdefault(rep, []).append(i)
    reps.flags.writeable = False
    return reps, {k: tuple(v) for k, v in members.items()}


def equivalence_classes() -> dict[int, tuple[int, ...]]:
    """Map each class representative (minimum local id) to its member ids."""
    return dict(_class_table()[1])


def canonical_id(c: Cell | int) -> int:
    i = c if isinstance(c, (int, np.integer)) else local_id(c)
    return int(_class_table()[0][i])


def canonical_ids() -> list[int]:
    """Sorted representative ids, one per isomorphism class."""
    return sorted(_class_table()[1])


def export_classes(path=None) -> str:
    """Serialize the class table as JSON ``{canonical_id: [member ids]}``."""
    text = json.dumps({str(k): list(v) for k, v in sorted(_class_table()[1].items())})
    if path is not None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)
    return text


# -- distances and neighbourhoods -------------------------------------------


def edit_distance(a: Cell, b: Cell) -> int:
    return sum(x != y for x, y in zip(a.ops, b.ops))


def neighbors(c: Cell) -> list[Cell]:
    """All 24 cells at edit distance 1, by edge then by operation order."""
    out = []
    for e in range(NUM_EDGES):
        for op in OpKind:
            if op != c.ops[e]:
                out.append(c.replace(e, op))
    return out


def conv_counts(c: Cell) -> tuple[int, int]:
    """(number of 1x1 convolutions, number of 3x3 convolutions)."""
    return c.ops.count(OpKind.NOR_CONV_1X1), c.ops.count(OpKind.NOR_CONV_3X3)


def kernel_param_count(c: Cell) -> int:
    n1, n3 = conv_counts(c)
    return n1 + 9 * n3


def mutate(c: Cell, rng: np.random.Generator) -> Cell:
    """Uniform single-edge mutation to a different operation."""
    edge = int(rng.integers(NUM_EDGES))
    shift = int(rng.integers(1, 5))
    return c.replace(edge, OpKind((int(c.ops[edge]) + shift) % 5))

