"""Discrete architectures: derivation from logits, refinement, JSON and DOT.

Discretization replaces every mixed edge by its strongest non-zero candidate
and keeps, per intermediate node, the two incoming edges with the largest
softmax weight.  The zero candidate marks a lack of connection, so it is
excluded both from the per-edge argmax and from edge-strength ranking.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .cells import Alpha, CellSpec
from .ops import PRIMITIVES, SKIP_CONNECT, ZERO

__all__ = [
    "Genotype",
    "discretize_cell",
    "discretize_cell_nodes",
    "discretize",
    "refine_skip_connects",
    "derive_genotype",
    "genotype_to_cellspec",
    "is_subgraph_of",
    "export_dot",
    "export_space_dot",
    "parse_dot_edges",
]

NEG_INF_LOGIT = -1e9


@dataclass(frozen=True)
class Genotype:
    """Final architecture: per intermediate node, 2 (predecessor, op) pairs.

    Pairs are stored flat, grouped by node in ascending node order; the
    standard 4-intermediate-node cell therefore has 8 pairs per kind.
    """

    normal: tuple
    reduce: tuple
    concat: tuple = (2, 3, 4, 5)

    def to_json_dict(self) -> dict:
        return {
            "normal": [[int(p), op] for p, op in self.normal],
            "reduce": [[int(p), op] for p, op in self.reduce],
            "concat": [int(c) for c in self.concat],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json_dict(cls, payload: dict) -> "Genotype":
        for key in ("normal", "reduce", "concat"):
            if key not in payload:
                raise ValueError(f"genotype JSON is missing key {key!r}")
        for key in ("normal", "reduce"):
            for pair in payload[key]:
                if len(pair) != 2 or pair[1] not in PRIMITIVES:
                    raise ValueError(f"bad genotype entry in {key!r}: {pair}")
        return cls(
            normal=tuple((int(p), op) for p, op in payload["normal"]),
            reduce=tuple((int(p), op) for p, op in payload["reduce"]),
            concat=tuple(int(c) for c in payload["concat"]),
        )

    @classmethod
    def from_json(cls, text: str) -> "Genotype":
        return cls.from_json_dict(json.loads(text))

    def cell_pairs(self, kind: str) -> tuple:
        return self.normal if kind == "normal" else self.reduce

    def num_intermediate(self) -> int:
        return len(self.concat)


def _softmax(v: np.ndarray) -> np.ndarray:
    e = np.exp(v - v.max())
    return e / e.sum()


def _alpha_arrays(alpha) -> list:
    if isinstance(alpha, Alpha):
        return [t.data for t in alpha.tensors]
    return [np.asarray(a, dtype=np.float64) for a in alpha]


def discretize_cell_nodes(spec: CellSpec, alpha) -> dict:
    """Node -> retained [(pred, op, weight)] after argmax and top-2 selection."""
    arrays = _alpha_arrays(alpha)
    if len(arrays) != len(spec.edges):
        raise ValueError(f"alpha has {len(arrays)} edges, spec has {len(spec.edges)}")
    for logits in arrays:
        if not np.isfinite(logits).all():
            raise ValueError("cannot discretize non-finite architecture logits")
    per_node: dict[int, list] = {j: [] for j in range(2, 2 + spec.num_intermediate)}
    for ((i, j), ops_list), logits in zip(spec.edges, arrays):
        mix = _softmax(logits)
        best_op, best_w = None, -1.0
        for k, op in enumerate(ops_list):
            if op == ZERO:
                continue
            if mix[k] > best_w:
                best_op, best_w = op, mix[k]
        if best_op is None:
            continue
        per_node[j].append((i, best_op, best_w))
    retained = {}
    for j in sorted(per_node):
        ranked = sorted(per_node[j], key=lambda item: (-item[2], item[0]))
        retained[j] = sorted(ranked[:2], key=lambda item: item[0])
    return retained


def discretize_cell(spec: CellSpec, alpha) -> tuple:
    """Flat (predecessor, op) pairs for one cell kind, grouped by node."""
    retained = discretize_cell_nodes(spec, alpha)
    return tuple((i, op) for j in sorted(retained) for i, op, _ in retained[j])


def discretize(
    normal_spec: CellSpec,
    alpha_normal,
    reduce_spec: CellSpec,
    alpha_reduce,
) -> Genotype:
    return Genotype(
        normal=discretize_cell(normal_spec, alpha_normal),
        reduce=discretize_cell(reduce_spec, alpha_reduce),
        concat=tuple(range(2, 2 + normal_spec.num_intermediate)),
    )


def refine_skip_connects(spec: CellSpec, alpha, max_skips: int) -> tuple:
    """Cap the number of retained skip-connects in a cell at ``max_skips``.

    While more than ``max_skips`` skip-connects survive derivation, the
    weakest ones have their skip logit forced to -inf and the cell is
    re-derived; other skip-connects may surface, so the process repeats.
    Terminates with a count <= ``max_skips`` (exactly ``max_skips`` is
    unreachable when fewer survive naturally).
    """
    if max_skips < 0:
        raise ValueError(f"max_skips must be non-negative, got {max_skips}")
    arrays = [a.copy() for a in _alpha_arrays(alpha)]
    edge_pos = {key: e for e, (key, _) in enumerate(spec.edges)}
    for _ in range(len(spec.edges) + 1):
        retained = discretize_cell_nodes(spec, arrays)
        skips = [
            ((i, j), weight)
            for j, node_pairs in retained.items()
            for i, op, weight in node_pairs
            if op == SKIP_CONNECT
        ]
        if len(skips) <= max_skips:
            return tuple((i, op) for j in sorted(retained) for i, op, _ in retained[j])
        skips.sort(key=lambda item: (-item[1], item[0]))
        for (i, j), _ in skips[max_skips:]:
            e = edge_pos[(i, j)]
            k = spec.edges[e][1].index(SKIP_CONNECT)
            arrays[e][k] = NEG_INF_LOGIT
    raise RuntimeError("skip-connect refinement did not converge")


def derive_genotype(
    normal_spec: CellSpec,
    alpha_normal,
    reduce_spec: CellSpec,
    alpha_reduce,
    max_skips: Optional[int] = None,
) -> Genotype:
    """Discretize both kinds; optionally cap normal-cell skip-connects at ``max_skips``."""
    if max_skips is None:
        normal_pairs = discretize_cell(normal_spec, alpha_normal)
    else:
        normal_pairs = refine_skip_connects(normal_spec, alpha_normal, max_skips)
    return Genotype(
        normal=normal_pairs,
        reduce=discretize_cell(reduce_spec, alpha_reduce),
        concat=tuple(range(2, 2 + normal_spec.num_intermediate)),
    )


def _group_pairs(pairs: Sequence, num_intermediate: int) -> dict:
    """Node -> pairs, inverting the flat layout (two pairs per node in order).

    Exact when the genotype is full; shorter lists fall back to a greedy
    fill that respects predecessor-before-node ordering.
    """
    grouped: dict[int, list] = {j: [] for j in range(2, 2 + num_intermediate)}
    flat = list(pairs)
    if len(flat) == 2 * num_intermediate:
        for idx, j in enumerate(sorted(grouped)):
            grouped[j] = flat[2 * idx : 2 * idx + 2]
        return grouped
    for j in sorted(grouped):
        while flat and len(grouped[j]) < 2 and flat[0][0] < j:
            grouped[j].append(flat.pop(0))
    return grouped


def genotype_to_cellspec(genotype: Genotype, kind: str) -> CellSpec:
    """Single-op CellSpec for retraining a discrete architecture."""
    m = genotype.num_intermediate()
    grouped = _group_pairs(genotype.cell_pairs(kind), m)
    edges = []
    for j, node_pairs in grouped.items():
        for i, op in node_pairs:
            edges.append(((i, j), (op,)))
    return CellSpec(
        kind="normal" if kind == "normal" else "reduction",
        num_intermediate=m,
        edges=tuple(edges),
    )


def is_subgraph_of(genotype: Genotype, normal_spec: CellSpec, reduce_spec: CellSpec) -> bool:
    """True when every retained (edge, op) pair is admissible in the given specs."""
    for kind, spec in (("normal", normal_spec), ("reduce", reduce_spec)):
        pairs = genotype.cell_pairs(kind)
        grouped = _group_pairs(pairs, spec.num_intermediate)
        if sum(len(v) for v in grouped.values()) != len(pairs):
            return False
        for j, node_pairs in grouped.items():
            for i, op in node_pairs:
                try:
                    ops_list = spec.ops_at(i, j)
                except KeyError:
                    return False
                if op not in ops_list:
                    return False
    return True


# -- DOT rendering ----------------------------------------------------------


def _node_label(index: int) -> str:
    if index == 0:
        return "c_{k-2}"
    if index == 1:
        return "c_{k-1}"
    return str(index - 2)


def _dot_lines(name: str, num_intermediate: int, op_edges: list) -> str:
    lines = [
        f"digraph {name} {{",
        "  rankdir=LR;",
        "  node [shape=box, style=rounded];",
        '  "c_{k-2}";',
        '  "c_{k-1}";',
    ]
    lines.extend(f'  "{j}";' for j in range(num_intermediate))
    lines.append('  "c_{k}";')
    for i, j, op in op_edges:
        lines.append(f'  "{_node_label(i)}" -> "{j - 2}" [label="{op}"];')
    for j in range(num_intermediate):
        lines.append(f'  "{j}" -> "c_{{k}}";')
    lines.append("}")
    return "\n".join(lines) + "\n"


def export_dot(genotype: Genotype, kind: str = "normal") -> str:
    """Graphviz DOT text for one cell of a genotype; deterministic ordering."""
    m = genotype.num_intermediate()
    grouped = _group_pairs(genotype.cell_pairs(kind), m)
    op_edges = [(i, j, op) for j in sorted(grouped) for i, op in grouped[j]]
    return _dot_lines(f"{kind}_cell", m, op_edges)


def export_space_dot(spec: CellSpec) -> str:
    """DOT text for a (possibly restricted) search space; one edge per op."""
    op_edges = [(i, j, op) for (i, j), ops_list in spec.edges for op in ops_list]
    return _dot_lines(f"{spec.kind}_space", spec.num_intermediate, op_edges)


_EDGE_RE = re.compile(r'"(?P<src>[^"]+)"\s*->\s*"(?P<dst>[^"]+)"\s*\[label="(?P<op>[^"]+)"\]')


def parse_dot_edges(text: str) -> list:
    """Recover (predecessor, node, op) triples from emitted DOT text."""
    triples = []
    for match in _EDGE_RE.finditer(text):
        src, dst, op = match.group("src"), match.group("dst"), match.group("op")
        if src == "c_{k-2}":
            pred = 0
        elif src == "c_{k-1}":
            pred = 1
        else:
            pred = int(src) + 2
        triples.append((pred, int(dst) + 2, op))
    return triples
