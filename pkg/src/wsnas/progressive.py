"""Progressive multi-stage search producing transfer architectures.

Each stage stacks more cells than the last while the per-edge candidate set
shrinks: entering a stage the space is pruned to the stage's width using the
logits learned in the previous stage, network weights are re-initialized,
and the restricted logits reset to zeros.  After the final stage there is no
discretization; the product is the restricted DAG itself (a transfer
architecture), optionally bundled with the final stage's weights and logits
(a trained transfer architecture).

Multi-task (meta) search shares trunk weights and logits across tasks with
one classifier head per task; within every stage the tasks run as
consecutive blocks ordered from the smallest to the largest task.  A
single-task run is literally the one-block special case of the same loop.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator

from . import autodiff as ad
from .autodiff import Graph
from .cells import Alpha, CellSpec, OpEvalCounter
from .container import read_container, write_container
from .network import HEAD_NAMES, NetworkSpec, SearchNetwork
from .ops import init_param
from .optim import Adam, AdamConfig, Sgd, SgdConfig, clip_grad_norm
from .search import SearchReport, SplitData, evaluate_accuracy
from .validation import check_image_task

__all__ = [
    "Stage",
    "StagePlan",
    "TransferArchitecture",
    "TasResult",
    "prune_ops",
    "tas_single",
    "tas_meta",
    "TransferArchitectureSearch",
]

TRANSFER_MAGIC = b"WSTA"
GRAD_CLIP = 5.0


@dataclass(frozen=True)
class Stage:
    cells: int
    ops: int
    epochs: int
    warmup: int = 0

    def __post_init__(self):
        if self.cells < 1 or self.ops < 1:
            raise ValueError(f"stage needs cells >= 1 and ops >= 1, got {self}")
        if self.epochs < 0 or not 0 <= self.warmup <= max(self.epochs, 1):
            raise ValueError(f"invalid epochs/warmup in stage {self}")


@dataclass(frozen=True)
class StagePlan:
    stages: tuple

    def __post_init__(self):
        stages = tuple(self.stages)
        if not stages:
            raise ValueError("a stage plan needs at least one stage")
        for a, b in zip(stages, stages[1:]):
            if b.cells <= a.cells:
                raise ValueError(f"cell counts must strictly increase: {a.cells} -> {b.cells}")
            if b.ops >= a.ops:
                raise ValueError(f"op widths must strictly decrease: {a.ops} -> {b.ops}")
        object.__setattr__(self, "stages", stages)

    @property
    def final_ops(self) -> int:
        return self.stages[-1].ops

    @property
    def final_cells(self) -> int:
        return self.stages[-1].cells

    @classmethod
    def desk_default(cls) -> "StagePlan":
        return cls(
            stages=(
                Stage(cells=2, ops=8, epochs=8, warmup=3),
                Stage(cells=4, ops=5, epochs=8, warmup=3),
                Stage(cells=6, ops=3, epochs=8, warmup=3),
            )
        )

    @classmethod
    def parse(cls, text: str) -> "StagePlan":
        """Parse "cells:ops:epochs[:warmup]" stage descriptors joined by commas."""
        stages = []
        for part in text.split(","):
            fields = part.strip().split(":")
            if len(fields) not in (3, 4):
                raise ValueError(f"bad stage descriptor {part!r}, expected L:O:E[:W]")
            cells, ops, epochs = (int(v) for v in fields[:3])
            warmup = int(fields[3]) if len(fields) == 4 else 0
            stages.append(Stage(cells=cells, ops=ops, epochs=epochs, warmup=warmup))
        return cls(stages=tuple(stages))

    def to_json_list(self) -> list:
        return [[s.cells, s.ops, s.epochs, s.warmup] for s in self.stages]


def prune_ops(spec: CellSpec, alpha, keep: int):
    """Keep the ``keep`` strongest candidates per edge; ties break to the
    lower canonical op index.  The returned logits are reset to zeros."""
    arrays = [t.data for t in alpha.tensors] if isinstance(alpha, Alpha) else [
        np.asarray(a, dtype=np.float64) for a in alpha
    ]
    if len(arrays) != len(spec.edges):
        raise ValueError("alpha does not match spec edges")
    if keep < 1:
        raise ValueError(f"keep must be >= 1, got {keep}")
    new_edges = []
    for ((i, j), ops_list), logits in zip(spec.edges, arrays):
        if keep > len(ops_list):
            raise ValueError(
                f"cannot keep {keep} ops on edge ({i}, {j}) of width {len(ops_list)}"
            )
        e = np.exp(logits - logits.max())
        mix = e / e.sum()
        # ops sit in canonical order, so a stable sort on -weight resolves
        # ties toward the lower canonical index
        order = sorted(range(len(ops_list)), key=lambda k: (-mix[k], k))
        survivors = tuple(ops_list[k] for k in sorted(order[:keep]))
        new_edges.append(((i, j), survivors))
    new_spec = CellSpec(
        kind=spec.kind, num_intermediate=spec.num_intermediate, edges=tuple(new_edges)
    )
    return new_spec, Alpha.zeros(new_spec)


@dataclass
class TransferArchitecture:
    """Pruned cell DAG, optionally with the weights and logits that found it."""

    normal: CellSpec
    reduce: CellSpec
    provenance: dict = field(default_factory=dict)
    alpha_normal: Optional[list] = None
    alpha_reduce: Optional[list] = None
    weights: Optional[dict] = None

    def __post_init__(self):
        has_alpha = self.alpha_normal is not None and self.alpha_reduce is not None
        if (self.weights is not None) != has_alpha:
            raise ValueError("weights and alpha must be present together or absent together")

    @property
    def has_params(self) -> bool:
        return self.weights is not None

    def edge_width(self) -> int:
        widths = set(self.normal.edge_widths()) | set(self.reduce.edge_widths())
        if len(widths) != 1:
            raise ValueError(f"inconsistent edge widths: {sorted(widths)}")
        return widths.pop()

    def structure_only(self) -> "TransferArchitecture":
        return TransferArchitecture(
            normal=self.normal, reduce=self.reduce, provenance=dict(self.provenance)
        )

    # -- persistence ---------------------------------------------------------

    @staticmethod
    def _spec_payload(spec: CellSpec) -> dict:
        return {
            "kind": spec.kind,
            "num_intermediate": spec.num_intermediate,
            "edges": [[[i, j], list(ops)] for (i, j), ops in spec.edges],
        }

    @staticmethod
    def _spec_from_payload(payload: dict) -> CellSpec:
        return CellSpec(
            kind=payload["kind"],
            num_intermediate=payload["num_intermediate"],
            edges=tuple(((int(i), int(j)), tuple(ops)) for (i, j), ops in payload["edges"]),
        )

    def save(self, path):
        header = {
            "kind": "transfer_architecture",
            "normal": self._spec_payload(self.normal),
            "reduce": self._spec_payload(self.reduce),
            "provenance": self.provenance,
            "has_params": self.has_params,
        }
        arrays = {}
        if self.has_params:
            for k, arr in enumerate(self.alpha_normal):
                arrays[f"alpha_normal/{k}"] = arr
            for k, arr in enumerate(self.alpha_reduce):
                arrays[f"alpha_reduce/{k}"] = arr
            for name in sorted(self.weights):
                arrays[f"w/{name}"] = self.weights[name]
        return write_container(path, TRANSFER_MAGIC, header, arrays)

    @classmethod
    def load(cls, path) -> "TransferArchitecture":
        header, arrays = read_container(path, TRANSFER_MAGIC)
        normal = cls._spec_from_payload(header["normal"])
        reduce_ = cls._spec_from_payload(header["reduce"])
        alpha_normal = alpha_reduce = weights = None
        if header.get("has_params"):
            alpha_normal = [arrays[f"alpha_normal/{k}"] for k in range(len(normal.edges))]
            alpha_reduce = [arrays[f"alpha_reduce/{k}"] for k in range(len(reduce_.edges))]
            weights = {name[2:]: arr for name, arr in arrays.items() if name.startswith("w/")}
        return cls(
            normal=normal,
            reduce=reduce_,
            provenance=header.get("provenance", {}),
            alpha_normal=alpha_normal,
            alpha_reduce=alpha_reduce,
            weights=weights,
        )


@dataclass
class TasResult:
    transfer: TransferArchitecture
    trained: TransferArchitecture
    stage_reports: list

    @property
    def total_op_evals(self) -> int:
        return sum(r.op_evals for r in self.stage_reports)

    @property
    def total_wall_seconds(self) -> float:
        return sum(r.wall_seconds for r in self.stage_reports)

    def report_json_dict(self) -> dict:
        return {
            "stages": [r.to_json_dict() for r in self.stage_reports],
            "total_op_evals": self.total_op_evals,
            "total_wall_seconds": self.total_wall_seconds,
        }


@dataclass
class _MetaTask:
    task_id: str
    data: SplitData
    num_classes: int


def _shared_stage_loop(
    tasks: Sequence[_MetaTask],
    normal: CellSpec,
    reduce_: CellSpec,
    net: NetworkSpec,
    stage: Stage,
    w_opt: SgdConfig,
    alpha_opt: AdamConfig,
    dropout0: float,
    batch_size: int,
    seed: int,
    stage_index: int,
):
    """One stage over consecutive task blocks with shared trunk and logits.

    Returns the trained network (head = last block's), the shared alpha pair,
    and a cost report.  The epoch counter, warm-up cut and dropout schedule
    are global across blocks, so running the same task twice is identical to
    one run with doubled epochs.
    """
    started = time.perf_counter()
    rng_init = np.random.default_rng(np.random.SeedSequence([seed, 11, stage_index]))
    rng_order = np.random.default_rng(np.random.SeedSequence([seed, 13, stage_index]))
    rng_drop = np.random.default_rng(np.random.SeedSequence([seed, 17, stage_index]))
    rng_heads = np.random.default_rng(np.random.SeedSequence([seed, 19, stage_index]))

    network = SearchNetwork(net, normal, reduce_, rng_init)
    alpha_normal, alpha_reduce = Alpha.zeros(normal), Alpha.zeros(reduce_)
    positions = set(net.reduction_positions())
    n_reduction = sum(1 for ci in range(net.num_cells) if ci in positions)
    alpha_params = []
    if n_reduction < net.num_cells:
        alpha_params += alpha_normal.tensors
    if n_reduction > 0:
        alpha_params += alpha_reduce.tensors

    trunk = [t for name, t in network.weights.items() if name not in HEAD_NAMES]
    trunk_sgd = Sgd(trunk, w_opt)
    adam = Adam(alpha_params, alpha_opt)

    # the network's own head serves the first task; other tasks get their own
    heads = {tasks[0].task_id: (network.weights["head.w"], network.weights["head.b"])}
    head_sgds = {tasks[0].task_id: Sgd(list(heads[tasks[0].task_id]), w_opt)}

    def head_for(task: _MetaTask):
        if task.task_id not in heads:
            w = ad.parameter(
                init_param("w", (network.feature_channels, task.num_classes), rng_heads)
            )
            b = ad.parameter(np.zeros(task.num_classes))
            heads[task.task_id] = (w, b)
            head_sgds[task.task_id] = Sgd([w, b], w_opt)
        return heads[task.task_id], head_sgds[task.task_id]

    counter = OpEvalCounter()
    alphas = (alpha_normal, alpha_reduce)
    total_epochs = stage.epochs * len(tasks)
    final_train_loss = float("nan")
    global_epoch = 0
    for task in tasks:
        (head_w, head_b), head_sgd = head_for(task)
        network.weights["head.w"] = head_w
        network.weights["head.b"] = head_b
        data = task.data
        head_tensors = (head_w, head_b)

        def zero_all():
            for t in trunk:
                t.grad = None
            for t in head_tensors:
                t.grad = None
            for t in alpha_params:
                t.grad = None

        for _ in range(stage.epochs):
            p_drop = dropout0 * (1.0 - global_epoch / total_epochs) if total_epochs else 0.0
            w_order = rng_order.permutation(len(data.y_w))
            a_order = rng_order.permutation(len(data.y_alpha))
            w_batches = [w_order[s : s + batch_size] for s in range(0, len(w_order), batch_size)]
            a_batches = [a_order[s : s + batch_size] for s in range(0, len(a_order), batch_size)]
            for w_idx, a_idx in zip(w_batches, a_batches):
                if global_epoch >= stage.warmup:
                    g = Graph()
                    logits = network.forward(
                        g, data.x_alpha[a_idx], alphas,
                        dropout=p_drop, training=True, rng=rng_drop, counter=counter,
                    )
                    loss = ad.cross_entropy_with_logits(g, logits, data.y_alpha[a_idx])
                    zero_all()
                    g.backward(loss)
                    adam.step()
                g = Graph()
                logits = network.forward(
                    g, data.x_w[w_idx], alphas,
                    dropout=p_drop, training=True, rng=rng_drop, counter=counter,
                )
                loss = ad.cross_entropy_with_logits(g, logits, data.y_w[w_idx])
                zero_all()
                g.backward(loss)
                clip_grad_norm(trunk + list(head_tensors), GRAD_CLIP)
                trunk_sgd.step()
                head_sgd.step()
                final_train_loss = float(loss.data)
            global_epoch += 1

    accs = []
    for task in tasks:
        head_w, head_b = heads[task.task_id]
        network.weights["head.w"] = head_w
        network.weights["head.b"] = head_b
        accs.append(evaluate_accuracy(network, alphas, task.data.x_val, task.data.y_val))
    report = SearchReport(
        epochs=total_epochs,
        op_evals=counter.count,
        wall_seconds=time.perf_counter() - started,
        final_train_loss=final_train_loss,
        final_val_acc=float(np.mean(accs)),
    )
    return network, alphas, report


def _current_width(normal: CellSpec, reduce_: CellSpec) -> int:
    widths = set(normal.edge_widths()) | set(reduce_.edge_widths())
    if len(widths) != 1:
        raise ValueError(f"edge widths diverged: {sorted(widths)}")
    return widths.pop()


def _run_tas(
    tasks: Sequence[_MetaTask],
    plan: StagePlan,
    init_channels: int,
    batch_size: int,
    w_opt: SgdConfig,
    alpha_opt: AdamConfig,
    dropout0: float,
    seed: int,
    initial_normal: Optional[CellSpec],
    initial_reduce: Optional[CellSpec],
) -> TasResult:
    normal = initial_normal or CellSpec.full("normal")
    reduce_ = initial_reduce or CellSpec.full("reduction")
    shapes = {task.data.x_w.shape[1:] for task in tasks}
    if len(shapes) != 1:
        raise ValueError(f"tasks have incompatible input shapes: {sorted(shapes)}")
    tasks = sorted(
        tasks, key=lambda t: len(t.data.y_w) + len(t.data.y_alpha) + len(t.data.y_val)
    )

    prev_alphas = (Alpha.zeros(normal), Alpha.zeros(reduce_))
    reports: list[SearchReport] = []
    network = None
    for k, stage in enumerate(plan.stages):
        width = _current_width(normal, reduce_)
        if stage.ops > width:
            raise ValueError(
                f"stage {k}: cannot widen the space from {width} to {stage.ops} ops"
            )
        if stage.ops < width:
            normal, _ = prune_ops(normal, prev_alphas[0], stage.ops)
            reduce_, _ = prune_ops(reduce_, prev_alphas[1], stage.ops)
        net = NetworkSpec(
            num_cells=stage.cells,
            init_channels=init_channels,
            num_classes=tasks[0].num_classes,
            in_channels=int(tasks[0].data.x_w.shape[1]),
        )
        network, prev_alphas, report = _shared_stage_loop(
            tasks, normal, reduce_, net, stage,
            w_opt, alpha_opt, dropout0, batch_size, seed, k,
        )
        reports.append(report)

    provenance = {
        "source_tasks": [t.task_id for t in tasks],
        "stage_plan": plan.to_json_list(),
        "seed": seed,
        "init_channels": init_channels,
        "num_cells": plan.final_cells,
        "num_classes": tasks[0].num_classes,
        "in_channels": int(tasks[0].data.x_w.shape[1]),
        "image_size": int(tasks[0].data.x_w.shape[2]),
    }
    transfer = TransferArchitecture(
        normal=normal, reduce=reduce_, provenance=dict(provenance)
    )
    trained = TransferArchitecture(
        normal=normal,
        reduce=reduce_,
        provenance=dict(provenance),
        alpha_normal=[t.data.copy() for t in prev_alphas[0].tensors],
        alpha_reduce=[t.data.copy() for t in prev_alphas[1].tensors],
        weights=network.state_arrays(),
    )
    return TasResult(transfer=transfer, trained=trained, stage_reports=reports)


def _meta_task(task_id: str, x, y, val_fraction: float, seed: int) -> _MetaTask:
    x, y = check_image_task(x, y, in_channels=np.asarray(x).shape[1])
    data = SplitData.from_arrays(x, y, val_fraction, seed)
    return _MetaTask(task_id=task_id, data=data, num_classes=int(y.max()) + 1)


def tas_single(
    x,
    y,
    plan: StagePlan,
    task_id: str = "task",
    init_channels: int = 8,
    batch_size: int = 16,
    w_opt: Optional[SgdConfig] = None,
    alpha_opt: Optional[AdamConfig] = None,
    dropout0: float = 0.0,
    seed: int = 0,
    val_fraction: float = 1 / 3,
    initial_normal: Optional[CellSpec] = None,
    initial_reduce: Optional[CellSpec] = None,
) -> TasResult:
    """Transfer architecture search over a single task."""
    return _run_tas(
        [_meta_task(task_id, x, y, val_fraction, seed)],
        plan,
        init_channels,
        batch_size,
        w_opt or SgdConfig(),
        alpha_opt or AdamConfig(),
        dropout0,
        seed,
        initial_normal,
        initial_reduce,
    )


def tas_meta(
    tasks: Sequence[tuple],
    plan: StagePlan,
    init_channels: int = 8,
    batch_size: int = 16,
    w_opt: Optional[SgdConfig] = None,
    alpha_opt: Optional[AdamConfig] = None,
    dropout0: float = 0.0,
    seed: int = 0,
    val_fraction: float = 1 / 3,
    initial_normal: Optional[CellSpec] = None,
    initial_reduce: Optional[CellSpec] = None,
) -> TasResult:
    """Meta search: one shared architecture over ``(task_id, x, y)`` tasks.

    Tasks run smallest first within every stage; a single-task list reduces
    exactly to :func:`tas_single`.
    """
    if not tasks:
        raise ValueError("tas_meta needs at least one task")
    meta_tasks = [_meta_task(tid, x, y, val_fraction, seed) for tid, x, y in tasks]
    return _run_tas(
        meta_tasks,
        plan,
        init_channels,
        batch_size,
        w_opt or SgdConfig(),
        alpha_opt or AdamConfig(),
        dropout0,
        seed,
        initial_normal,
        initial_reduce,
    )


class TransferArchitectureSearch(BaseEstimator):
    """Progressive search as an estimator: ``fit(X, y)`` learns a transfer
    architecture for one task.

    After fitting, ``transfer_architecture_`` holds the pruned DAG and
    ``trained_architecture_`` additionally carries the final stage's weights
    and logits.
    """

    def __init__(
        self,
        stages: str = "2:8:8:3,4:5:8:3,6:3:8:3",
        init_channels: int = 8,
        batch_size: int = 16,
        lr_w: float = 0.025,
        momentum: float = 0.9,
        weight_decay: float = 3e-4,
        lr_alpha: float = 6e-4,
        alpha_weight_decay: float = 1e-3,
        dropout0: float = 0.0,
        val_fraction: float = 1 / 3,
        seed: int = 0,
    ):
        self.stages = stages
        self.init_channels = init_channels
        self.batch_size = batch_size
        self.lr_w = lr_w
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.lr_alpha = lr_alpha
        self.alpha_weight_decay = alpha_weight_decay
        self.dropout0 = dropout0
        self.val_fraction = val_fraction
        self.seed = seed

    def fit(self, X, y):
        result = tas_single(
            X,
            y,
            StagePlan.parse(self.stages) if isinstance(self.stages, str) else self.stages,
            init_channels=self.init_channels,
            batch_size=self.batch_size,
            w_opt=SgdConfig(lr=self.lr_w, momentum=self.momentum, weight_decay=self.weight_decay),
            alpha_opt=AdamConfig(lr=self.lr_alpha, weight_decay=self.alpha_weight_decay),
            dropout0=self.dropout0,
            seed=self.seed,
            val_fraction=self.val_fraction,
        )
        self.transfer_architecture_ = result.transfer
        self.trained_architecture_ = result.trained
        self.stage_reports_ = result.stage_reports
        return self
