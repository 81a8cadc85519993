"""Warm-started search: select a transfer architecture, adapt it to a task.

The pipeline embeds the new task, picks the archive entry whose embedding is
closest under the symmetric cosine distance, and runs the search loop over
that entry's restricted space at final-stage depth.  Mode ``lambda`` starts
from fresh weights and logits; mode ``lambda_hat`` additionally loads the
stored weights and logits, re-initializing only the classifier head (no
layers are frozen).  Mode ``meta`` consumes a jointly-learned architecture
directly and behaves like ``lambda`` structurally.

Every emitted genotype is checked against the sub-graph invariant: it may
only use (edge, op) pairs admissible in the transfer architecture.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .cells import Alpha
from .evaluation import retrain_genotype
from .fim import TaskEmbedding
from .genotype import Genotype, derive_genotype, is_subgraph_of
from .network import NetworkSpec, SearchNetwork
from .progressive import TransferArchitecture
from .search import DartsConfig, SearchReport, SplitData, evaluate_accuracy, search
from .distance import SimilarityMatrix, d_sym
from .validation import check_image_task

__all__ = [
    "ArchiveEntry",
    "WarmStartConfig",
    "WarmStartResult",
    "SweepOutcome",
    "select_transfer",
    "select_most_similar",
    "warm_start_search",
    "dropout_sweep",
    "report_savings",
    "max_threads",
]


def max_threads() -> int:
    """Parallelism cap from WSNAS_THREADS; defaults to sequential."""
    raw = os.environ.get("WSNAS_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


@dataclass
class ArchiveEntry:
    task_id: str
    embedding: TaskEmbedding
    lambda_path: Optional[Path] = None
    lambda_hat_path: Optional[Path] = None

    def load_transfer(self, trained: bool = False) -> TransferArchitecture:
        path = self.lambda_hat_path if trained else self.lambda_path
        if path is None:
            kind = "trained transfer" if trained else "transfer"
            raise ValueError(f"archive entry {self.task_id!r} has no {kind} architecture")
        return TransferArchitecture.load(path)


@dataclass(frozen=True)
class WarmStartConfig:
    mode: str = "lambda"
    darts: DartsConfig = field(default_factory=DartsConfig)
    max_skips: int = 2
    dropout_sweep: tuple = (0.0,)
    apply_refinement: bool = True
    expected_width: Optional[int] = 3
    num_cells: Optional[int] = None
    init_channels: Optional[int] = None

    def __post_init__(self):
        if self.mode not in ("lambda", "lambda_hat", "meta"):
            raise ValueError(f"unknown warm-start mode {self.mode!r}")
        if self.max_skips < 0:
            raise ValueError("max_skips must be non-negative")
        if not self.dropout_sweep:
            raise ValueError("dropout_sweep must not be empty")
        for value in self.dropout_sweep:
            if not 0.0 <= value < 1.0:
                raise ValueError(f"dropout_sweep values must be in [0, 1), got {value}")


@dataclass
class WarmStartResult:
    genotype: Genotype
    report: SearchReport
    transfer: TransferArchitecture
    dropout0: float
    network: SearchNetwork
    alphas: tuple


@dataclass
class SweepOutcome:
    best_dropout0: float
    best_genotype: Genotype
    accuracies: list  # (dropout0, retrain accuracy, report) per branch


def select_transfer(archive: Sequence[ArchiveEntry], new_embedding: TaskEmbedding) -> ArchiveEntry:
    """Archive entry minimizing the distance to the new task's embedding.

    Ties resolve to the lexicographically smallest task id.  All entries
    must share the new embedding's probe.
    """
    if not archive:
        raise ValueError("archive is empty")
    for entry in archive:
        if entry.embedding.probe_checksum != new_embedding.probe_checksum:
            raise ValueError(
                f"archive entry {entry.task_id!r} was embedded with probe "
                f"{entry.embedding.probe_checksum}, expected {new_embedding.probe_checksum}"
            )
    scored = [(d_sym(entry.embedding, new_embedding), entry.task_id, entry) for entry in archive]
    scored.sort(key=lambda item: (item[0], item[1]))
    return scored[0][2]


def select_most_similar(matrix: SimilarityMatrix, task_id: str) -> tuple:
    """CSV-replay selection: closest other task in a stored similarity matrix."""
    return matrix.most_similar(task_id)


def _network_dims(transfer: TransferArchitecture, cfg: WarmStartConfig, num_classes: int,
                  in_channels: int) -> NetworkSpec:
    prov = transfer.provenance
    num_cells = cfg.num_cells if cfg.num_cells is not None else prov.get("num_cells")
    init_channels = (
        cfg.init_channels if cfg.init_channels is not None else prov.get("init_channels")
    )
    if num_cells is None or init_channels is None:
        raise ValueError(
            "transfer architecture provenance lacks network dimensions; "
            "pass num_cells and init_channels explicitly"
        )
    return NetworkSpec(
        num_cells=int(num_cells),
        init_channels=int(init_channels),
        num_classes=num_classes,
        in_channels=in_channels,
    )


def warm_start_search(
    x,
    y,
    transfer: TransferArchitecture,
    cfg: WarmStartConfig,
    dropout0: Optional[float] = None,
) -> WarmStartResult:
    """Adapt a transfer architecture to a task and derive the final genotype."""
    x, y = check_image_task(x, y, in_channels=np.asarray(x).shape[1])
    if cfg.expected_width is not None and transfer.edge_width() != cfg.expected_width:
        raise ValueError(
            f"transfer architecture has {transfer.edge_width()} ops per edge, "
            f"expected {cfg.expected_width}"
        )
    prov = transfer.provenance
    if prov.get("image_size") is not None and int(prov["image_size"]) != x.shape[2]:
        raise ValueError(
            f"task images are {x.shape[2]}x{x.shape[3]} but the transfer architecture "
            f"was searched at {prov['image_size']}x{prov['image_size']}"
        )
    effective_dropout = cfg.darts.dropout0 if dropout0 is None else dropout0
    darts_cfg = replace(cfg.darts, dropout0=effective_dropout)
    num_classes = int(y.max()) + 1
    net = _network_dims(transfer, cfg, num_classes, int(x.shape[1]))
    data = SplitData.from_arrays(x, y, seed=darts_cfg.seed)

    network = None
    alphas = None
    if cfg.mode == "lambda_hat":
        if not transfer.has_params:
            raise ValueError("mode lambda_hat requires a trained transfer architecture")
        rng_init = np.random.default_rng(np.random.SeedSequence([darts_cfg.seed, 11]))
        network = SearchNetwork(net, transfer.normal, transfer.reduce, rng_init)
        try:
            network.load_state(transfer.weights, skip=("head.w", "head.b"))
        except ValueError as exc:
            raise ValueError(f"trained transfer architecture does not fit this network: {exc}")
        network.reinit_head(np.random.default_rng(np.random.SeedSequence([darts_cfg.seed, 71])))
        alphas = (
            Alpha.from_arrays(transfer.alpha_normal),
            Alpha.from_arrays(transfer.alpha_reduce),
        )

    result = search(
        transfer.normal, transfer.reduce, net, data, darts_cfg,
        network=network, alphas=alphas,
    )
    genotype = derive_genotype(
        transfer.normal,
        result.alpha_normal,
        transfer.reduce,
        result.alpha_reduce,
        max_skips=cfg.max_skips if cfg.apply_refinement else None,
    )
    if not is_subgraph_of(genotype, transfer.normal, transfer.reduce):
        raise RuntimeError(
            "sub-graph invariant violated: derived genotype uses ops outside "
            "the transfer architecture"
        )
    return WarmStartResult(
        genotype=genotype, report=result.report, transfer=transfer,
        dropout0=effective_dropout, network=result.network,
        alphas=(result.alpha_normal, result.alpha_reduce),
    )


def dropout_sweep(
    x,
    y,
    transfer: TransferArchitecture,
    cfg: WarmStartConfig,
    retrain_epochs: int = 10,
    retrain_cells: Optional[int] = None,
    retrain_channels: Optional[int] = None,
) -> SweepOutcome:
    """Warm start once per sweep value, short-retrain each genotype from
    scratch, and keep the best by held-out-training accuracy.

    The retrain fits the genotype on the weight half of the training split
    and scores it on the architecture half, so the real validation third
    stays untouched.  Ties resolve to the smaller dropout value.  Branches
    share the config seed, so equal dropout values give identical branches.
    """
    x, y = check_image_task(x, y, in_channels=np.asarray(x).shape[1])
    data = SplitData.from_arrays(x, y, seed=cfg.darts.seed)
    net_defaults = _network_dims(transfer, cfg, int(y.max()) + 1, int(x.shape[1]))
    cells = retrain_cells if retrain_cells is not None else net_defaults.num_cells
    channels = retrain_channels if retrain_channels is not None else net_defaults.init_channels

    def run_branch(dropout0: float):
        ws = warm_start_search(x, y, transfer, cfg, dropout0=dropout0)
        trained = retrain_genotype(
            ws.genotype, data.x_w, data.y_w,
            num_cells=cells, init_channels=channels,
            epochs=retrain_epochs, batch_size=cfg.darts.batch_size,
            seed=cfg.darts.seed, num_classes=int(y.max()) + 1,
        )
        acc = evaluate_accuracy(trained.network, trained.alphas, data.x_alpha, data.y_alpha)
        return ws, acc

    workers = min(max_threads(), len(cfg.dropout_sweep))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(run_branch, cfg.dropout_sweep))
    else:
        outcomes = [run_branch(d0) for d0 in cfg.dropout_sweep]

    entries = [
        (d0, acc, ws.report) for d0, (ws, acc) in zip(cfg.dropout_sweep, outcomes)
    ]
    best_idx = min(
        range(len(outcomes)),
        key=lambda k: (-outcomes[k][1], cfg.dropout_sweep[k], k),
    )
    return SweepOutcome(
        best_dropout0=cfg.dropout_sweep[best_idx],
        best_genotype=outcomes[best_idx][0].genotype,
        accuracies=entries,
    )


def report_savings(ws: SearchReport, baseline: SearchReport) -> dict:
    """Relative cost reduction of a warm start against a from-scratch baseline."""
    if baseline.op_evals == 0 or baseline.wall_seconds == 0.0:
        raise ValueError("baseline report has zero cost; cannot compute savings")
    return {
        "op_eval_reduction": 1.0 - ws.op_evals / baseline.op_evals,
        "wall_reduction": 1.0 - ws.wall_seconds / baseline.wall_seconds,
    }
