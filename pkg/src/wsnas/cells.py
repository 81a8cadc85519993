"""Cell DAG search space: specs, architecture logits, and mixed forwards.

A cell is a DAG over ``2 + m + 1`` nodes: two inputs (0, 1), ``m``
intermediate nodes (2 .. m+1, four in the standard space), and one output
that concatenates all intermediate nodes along channels.  Every edge (i, j)
into an intermediate node carries a list of admissible candidate ops plus a
logit vector; the edge output is the softmax-weighted sum of all candidates.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Graph, Tensor
from .ops import PRIMITIVES, SKIP_CONNECT, apply_op

__all__ = [
    "CellSpec",
    "Alpha",
    "OpEvalCounter",
    "mixed_edge_forward",
    "cell_forward",
]

_CANON = {op: k for k, op in enumerate(PRIMITIVES)}


def _canon_ops(ops: Iterable[str]) -> tuple:
    ops = tuple(ops)
    for op in ops:
        if op not in _CANON:
            raise ValueError(f"unknown candidate op: {op!r}")
    if len(set(ops)) != len(ops):
        raise ValueError(f"duplicate ops on edge: {ops}")
    return tuple(sorted(ops, key=_CANON.__getitem__))


@dataclass(frozen=True)
class CellSpec:
    """Cell DAG with per-edge admissible candidate ops.

    ``edges`` maps (i, j) to an op tuple kept in canonical candidate order;
    the standard space has 4 intermediate nodes and all 14 (i, j) pairs.
    """

    kind: str
    num_intermediate: int = 4
    edges: tuple = field(default_factory=tuple)

    def __post_init__(self):
        if self.kind not in ("normal", "reduction"):
            raise ValueError(f"cell kind must be normal or reduction, got {self.kind!r}")
        if self.num_intermediate < 1:
            raise ValueError("cell needs at least one intermediate node")
        canon = []
        for (i, j), ops in self.edges:
            if not (0 <= i < j and 2 <= j < 2 + self.num_intermediate):
                raise ValueError(f"invalid edge ({i}, {j}) for {self.num_intermediate} intermediates")
            ops = _canon_ops(ops)
            if not ops:
                raise ValueError(f"edge ({i}, {j}) has an empty admissible set")
            canon.append(((i, j), ops))
        canon.sort(key=lambda item: (item[0][1], item[0][0]))
        object.__setattr__(self, "edges", tuple(canon))

    @classmethod
    def full(cls, kind: str, num_intermediate: int = 4, ops: Sequence[str] = PRIMITIVES) -> "CellSpec":
        edges = [
            ((i, j), tuple(ops))
            for j in range(2, 2 + num_intermediate)
            for i in range(j)
        ]
        return cls(kind=kind, num_intermediate=num_intermediate, edges=tuple(edges))

    @property
    def num_nodes(self) -> int:
        return self.num_intermediate + 3

    def edge_keys(self) -> list:
        return [key for key, _ in self.edges]

    def ops_at(self, i: int, j: int) -> tuple:
        for key, ops in self.edges:
            if key == (i, j):
                return ops
        raise KeyError(f"no edge ({i}, {j}) in spec")

    def edge_widths(self) -> list:
        return [len(ops) for _, ops in self.edges]

    def total_ops(self) -> int:
        return sum(self.edge_widths())

    def with_edges(self, edges: Mapping) -> "CellSpec":
        return CellSpec(
            kind=self.kind,
            num_intermediate=self.num_intermediate,
            edges=tuple(edges.items()) if isinstance(edges, dict) else tuple(edges),
        )


class Alpha:
    """Architecture logits for one cell kind: one vector per edge.

    A single Alpha is shared by every cell of its kind in the network.
    """

    def __init__(self, tensors: Sequence[Tensor]):
        self.tensors = list(tensors)

    @classmethod
    def zeros(cls, spec: CellSpec) -> "Alpha":
        return cls([ad.parameter(np.zeros(len(ops))) for _, ops in spec.edges])

    @classmethod
    def noise(cls, spec: CellSpec, rng: np.random.Generator, scale: float = 1e-3) -> "Alpha":
        return cls([ad.parameter(rng.normal(0.0, scale, size=len(ops))) for _, ops in spec.edges])

    @classmethod
    def from_arrays(cls, arrays: Sequence[np.ndarray]) -> "Alpha":
        return cls([ad.parameter(np.asarray(a, dtype=np.float64)) for a in arrays])

    def matches(self, spec: CellSpec) -> bool:
        widths = spec.edge_widths()
        return len(widths) == len(self.tensors) and all(
            t.data.shape == (wd,) for t, wd in zip(self.tensors, widths)
        )

    def arrays(self) -> list:
        return [t.data.copy() for t in self.tensors]

    def clone(self) -> "Alpha":
        return Alpha.from_arrays(self.arrays())

    def checksum(self) -> int:
        crc = 0
        for t in self.tensors:
            crc = zlib.crc32(np.ascontiguousarray(t.data).tobytes(), crc)
        return crc


class OpEvalCounter:
    """Counts candidate-op forward applications (the search-cost unit)."""

    def __init__(self):
        self.count = 0

    def add(self, n: int) -> None:
        self.count += n


def mixed_edge_forward(
    g: Graph,
    x: Tensor,
    ops: Sequence[str],
    alpha_edge: Tensor,
    weights: Mapping,
    stride: int = 1,
    dropout: float = 0.0,
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
    counter: Optional[OpEvalCounter] = None,
) -> Tensor:
    """Softmax-weighted sum of every candidate op applied to ``x``.

    During training the skip-connect branch is zeroed with probability
    ``dropout`` and scaled by 1/(1-dropout) when kept (inverted dropout);
    evaluation mode ignores dropout entirely.
    """
    if alpha_edge.data.shape != (len(ops),):
        raise ad.ShapeError(
            f"mixed edge: {len(ops)} ops but logits of shape {alpha_edge.data.shape}"
        )
    if not 0.0 <= dropout < 1.0:
        raise ValueError(f"dropout must be in [0, 1), got {dropout}")
    if counter is not None:
        counter.add(len(ops))
    mix = ad.softmax(g, alpha_edge)
    terms = []
    for op in ops:
        out = apply_op(g, op, x, weights.get(op, {}), stride=stride)
        if op == SKIP_CONNECT and training and dropout > 0.0:
            if rng is None:
                raise ValueError("training-mode dropout requires an rng")
            if rng.random() < dropout:
                out = ad.zero_output(g, out)
            else:
                out = ad.scalar_mul(g, out, 1.0 / (1.0 - dropout))
        terms.append(out)
    return ad.weighted_sum(g, mix, terms)


def cell_forward(
    g: Graph,
    s0: Tensor,
    s1: Tensor,
    spec: CellSpec,
    alpha: Alpha,
    weights: Sequence[Mapping],
    dropout: float = 0.0,
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
    counter: Optional[OpEvalCounter] = None,
) -> Tensor:
    """One cell: nodes sum their incoming mixed edges, output concatenates nodes.

    ``s0`` and ``s1`` must already be preprocessed to the cell's channel
    width, and to matching spatial extents.  Reduction cells apply stride 2
    on edges leaving the two input nodes.
    """
    if s0.data.shape != s1.data.shape:
        raise ad.ShapeError(f"cell inputs differ: {s0.data.shape} vs {s1.data.shape}")
    if not alpha.matches(spec):
        raise ad.ShapeError("alpha does not match cell spec edge widths")
    states = [s0, s1]
    edge_pos = {key: e for e, (key, _) in enumerate(spec.edges)}
    for j in range(2, 2 + spec.num_intermediate):
        node = None
        for i in range(j):
            if (i, j) not in edge_pos:
                continue
            e = edge_pos[(i, j)]
            stride = 2 if (spec.kind == "reduction" and i < 2) else 1
            out = mixed_edge_forward(
                g,
                states[i],
                spec.edges[e][1],
                alpha.tensors[e],
                weights[e],
                stride=stride,
                dropout=dropout,
                training=training,
                rng=rng,
                counter=counter,
            )
            node = out if node is None else ad.add(g, node, out)
        if node is None:
            raise ad.ShapeError(f"intermediate node {j} has no incoming edges")
        states.append(node)
    return ad.concat(g, states[2:], axis=1)
