"""Stacked-cell networks: weight construction, forward pass, state transfer.

Cells are stacked with reduction cells at 1/3 and 2/3 depth; each cell takes
the outputs of the previous two cells as its inputs, preprocessed by fixed
(non-searched) relu / 1x1 conv / affine blocks.  The classifier is a global
average pool followed by a linear layer.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Graph, Tensor
from .cells import Alpha, CellSpec, OpEvalCounter, cell_forward
from .ops import init_param, op_param_shapes

__all__ = ["NetworkSpec", "SearchNetwork", "conv_weight_count", "HEAD_NAMES"]

HEAD_NAMES = ("head.w", "head.b")


@dataclass(frozen=True)
class NetworkSpec:
    num_cells: int
    init_channels: int
    num_classes: int
    in_channels: int = 3
    reduction_cells: Optional[tuple] = None

    def __post_init__(self):
        if self.num_cells < 1 or self.init_channels < 1 or self.num_classes < 2:
            raise ValueError(
                f"invalid network spec: cells={self.num_cells}, "
                f"channels={self.init_channels}, classes={self.num_classes}"
            )

    def reduction_positions(self) -> tuple:
        if self.reduction_cells is not None:
            return tuple(sorted(set(self.reduction_cells)))
        return tuple(sorted({self.num_cells // 3, (2 * self.num_cells) // 3}))


def conv_weight_count(net: NetworkSpec, normal: CellSpec, reduce_: CellSpec) -> int:
    """Exact number of conv kernel elements in a search network.

    Covers the stem, the per-cell 1x1 preprocessing convs, and the
    candidate-op kernels; affine gains/biases and the linear head are not
    conv weights and are excluded.
    """
    count = net.init_channels * net.in_channels * 9  # stem 3x3
    positions = set(net.reduction_positions())
    c_pp = c_p = net.init_channels
    c_curr = net.init_channels
    for ci in range(net.num_cells):
        reduction = ci in positions
        spec = reduce_ if reduction else normal
        if reduction:
            c_curr *= 2
        count += c_curr * c_pp  # pre0 1x1
        count += c_curr * c_p  # pre1 1x1
        for _, ops in spec.edges:
            for op in ops:
                for _, shape in op_param_shapes(op, c_curr).items():
                    if len(shape) == 4:
                        count += int(np.prod(shape))
        c_pp, c_p = c_p, spec.num_intermediate * c_curr
    return count


class SearchNetwork:
    """A stacked-cell network with one shared Alpha per cell kind.

    Weights live in a flat name -> Tensor map so they can be checksummed,
    serialized, and transferred between runs.
    """

    def __init__(
        self,
        net: NetworkSpec,
        normal: CellSpec,
        reduce_: CellSpec,
        rng: np.random.Generator,
    ):
        self.spec = net
        self.normal = normal
        self.reduce = reduce_
        self.weights: dict[str, Tensor] = {}
        self._cells = []

        def make(name: str, shape: tuple) -> Tensor:
            t = ad.parameter(init_param(name.rsplit(".", 1)[-1], shape, rng))
            self.weights[name] = t
            return t

        make("stem.conv.w", (net.init_channels, net.in_channels, 3, 3))
        make("stem.aff.g", (net.init_channels, 1, 1))
        make("stem.aff.b", (net.init_channels, 1, 1))

        positions = set(net.reduction_positions())
        c_pp = c_p = net.init_channels
        c_curr = net.init_channels
        prev_reduction = False
        for ci in range(net.num_cells):
            reduction = ci in positions
            spec = reduce_ if reduction else normal
            if reduction:
                c_curr *= 2
            prefix = f"cell{ci}"
            make(f"{prefix}.pre0.w", (c_curr, c_pp, 1, 1))
            make(f"{prefix}.pre0.g", (c_curr, 1, 1))
            make(f"{prefix}.pre0.b", (c_curr, 1, 1))
            make(f"{prefix}.pre1.w", (c_curr, c_p, 1, 1))
            make(f"{prefix}.pre1.g", (c_curr, 1, 1))
            make(f"{prefix}.pre1.b", (c_curr, 1, 1))
            edge_weights = []
            for e, ((i, j), ops_list) in enumerate(spec.edges):
                per_op = {}
                for op in ops_list:
                    shapes = op_param_shapes(op, c_curr)
                    per_op[op] = {
                        pname: make(f"{prefix}.edge{e}.{op}.{pname}", shape)
                        for pname, shape in shapes.items()
                    }
                edge_weights.append(per_op)
            self._cells.append(
                {
                    "spec": spec,
                    "reduction": reduction,
                    "edge_weights": edge_weights,
                    "pre0_stride": 2 if prev_reduction else 1,
                    "prefix": prefix,
                }
            )
            prev_reduction = reduction
            c_pp, c_p = c_p, spec.num_intermediate * c_curr

        self.feature_channels = c_p
        make("head.w", (c_p, net.num_classes))
        self.weights["head.b"] = ad.parameter(np.zeros(net.num_classes))

    # -- parameter plumbing -------------------------------------------------

    def parameters(self) -> list:
        return list(self.weights.values())

    def zero_grad(self) -> None:
        for t in self.weights.values():
            t.grad = None

    def state_arrays(self) -> dict:
        return {name: t.data.copy() for name, t in self.weights.items()}

    def load_state(self, state: Mapping[str, np.ndarray], skip: Sequence[str] = ()) -> None:
        skip = set(skip)
        missing = [n for n in self.weights if n not in state and n not in skip]
        if missing:
            raise ValueError(f"state is missing weights: {missing[:3]}{'...' if len(missing) > 3 else ''}")
        for name, t in self.weights.items():
            if name in skip:
                continue
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != t.data.shape:
                raise ValueError(
                    f"weight {name}: shape {arr.shape} does not match {t.data.shape}"
                )
            t.data = arr.copy()

    def reinit_head(self, rng: np.random.Generator) -> None:
        self.weights["head.w"].data = init_param(
            "w", (self.feature_channels, self.spec.num_classes), rng
        )
        self.weights["head.b"].data = np.zeros(self.spec.num_classes)

    def checksum(self, names: Optional[Sequence[str]] = None) -> int:
        crc = 0
        for name in sorted(names if names is not None else self.weights):
            crc = zlib.crc32(name.encode(), crc)
            crc = zlib.crc32(np.ascontiguousarray(self.weights[name].data).tobytes(), crc)
        return crc

    # -- forward ------------------------------------------------------------

    def _preprocess(self, g: Graph, x: Tensor, prefix: str, which: str, stride: int) -> Tensor:
        y = ad.relu(g, x)
        y = ad.conv2d(g, y, self.weights[f"{prefix}.{which}.w"], stride=stride)
        y = ad.mul(g, y, self.weights[f"{prefix}.{which}.g"])
        return ad.add(g, y, self.weights[f"{prefix}.{which}.b"])

    def forward(
        self,
        g: Graph,
        batch: np.ndarray,
        alphas: tuple,
        dropout: float = 0.0,
        training: bool = False,
        rng: Optional[np.random.Generator] = None,
        counter: Optional[OpEvalCounter] = None,
    ) -> Tensor:
        """Logits for a float batch of shape (n, in_channels, h, w)."""
        batch = np.asarray(batch, dtype=np.float64)
        if batch.ndim != 4 or batch.shape[1] != self.spec.in_channels:
            raise ad.ShapeError(
                f"network input must be (n, {self.spec.in_channels}, h, w), got {batch.shape}"
            )
        alpha_normal, alpha_reduce = alphas
        if not alpha_normal.matches(self.normal) or not alpha_reduce.matches(self.reduce):
            raise ad.ShapeError("alpha pair does not match the network's cell specs")
        x = Tensor(batch)
        stem = ad.conv2d(g, x, self.weights["stem.conv.w"])
        stem = ad.mul(g, stem, self.weights["stem.aff.g"])
        stem = ad.add(g, stem, self.weights["stem.aff.b"])
        s0 = s1 = stem
        for cell in self._cells:
            prefix = cell["prefix"]
            p0 = self._preprocess(g, s0, prefix, "pre0", cell["pre0_stride"])
            p1 = self._preprocess(g, s1, prefix, "pre1", 1)
            alpha = alpha_reduce if cell["reduction"] else alpha_normal
            out = cell_forward(
                g,
                p0,
                p1,
                cell["spec"],
                alpha,
                cell["edge_weights"],
                dropout=dropout,
                training=training,
                rng=rng,
                counter=counter,
            )
            s0, s1 = s1, out
        pooled = ad.mean(g, s1, axis=(2, 3))
        logits = ad.matmul(g, pooled, self.weights["head.w"])
        return ad.add(g, logits, self.weights["head.b"])
