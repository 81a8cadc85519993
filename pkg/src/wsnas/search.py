"""First-order bilevel architecture search.

Each epoch walks paired minibatches from the two training halves: past the
warm-up epochs an architecture step (Adam on the edge logits, loss taken on
the alpha half) runs first, then a weight step (momentum SGD on the network
weights, loss on the w half).  The inner learning rate is fixed at zero, so
current weights stand in for the inner optimum; the unrolled second-order
step is deliberately out of scope.

Search cost is accounted in op-evaluations: one unit per candidate op per
edge per cell per training forward pass.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator

from . import autodiff as ad
from .autodiff import Graph
from .cells import Alpha, CellSpec, OpEvalCounter
from .genotype import Genotype, derive_genotype
from .network import NetworkSpec, SearchNetwork
from .ops import PRIMITIVES
from .optim import Adam, AdamConfig, Sgd, SgdConfig, clip_grad_norm
from .taskgen import stratified_indices
from .validation import check_image_task

__all__ = [
    "DartsConfig",
    "SplitData",
    "SearchReport",
    "SearchResult",
    "dropout_at",
    "init_alpha",
    "init_alpha_pair",
    "op_evals_per_epoch",
    "search",
    "DartsSearch",
]


@dataclass(frozen=True)
class DartsConfig:
    epochs: int = 8
    warmup_epochs: int = 3
    batch_size: int = 16
    w_opt: SgdConfig = field(default_factory=SgdConfig)
    alpha_opt: AdamConfig = field(default_factory=AdamConfig)
    xi: float = 0.0
    dropout0: float = 0.0
    dropout_decay: str = "linear"
    grad_clip: float = 5.0
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if not 0 <= self.warmup_epochs <= self.epochs:
            raise ValueError(
                f"warmup_epochs must lie in [0, epochs], got {self.warmup_epochs}/{self.epochs}"
            )
        if not 0.0 <= self.dropout0 < 1.0:
            raise ValueError(f"dropout0 must be in [0, 1), got {self.dropout0}")
        if self.xi != 0.0:
            raise ValueError("only the first-order scheme is supported: xi must be 0")
        if self.dropout_decay != "linear":
            raise ValueError(f"unknown dropout_decay schedule {self.dropout_decay!r}")


@dataclass
class SplitData:
    """Disjoint task partitions: two equal training halves plus validation."""

    x_w: np.ndarray
    y_w: np.ndarray
    x_alpha: np.ndarray
    y_alpha: np.ndarray
    x_val: np.ndarray
    y_val: np.ndarray

    def __post_init__(self):
        for name in ("w", "alpha", "val"):
            x = getattr(self, f"x_{name}")
            y = getattr(self, f"y_{name}")
            if len(x) == 0:
                raise ValueError(f"empty data partition: {name}")
            if len(x) != len(y):
                raise ValueError(f"partition {name}: {len(x)} images vs {len(y)} labels")

    @classmethod
    def from_arrays(cls, x, y, val_fraction: float = 1 / 3, seed: int = 0) -> "SplitData":
        x, y = check_image_task(x, y)
        split = stratified_indices(y, val_fraction, seed)
        return cls(
            x_w=x[split.train_w],
            y_w=y[split.train_w],
            x_alpha=x[split.train_alpha],
            y_alpha=y[split.train_alpha],
            x_val=x[split.validation],
            y_val=y[split.validation],
        )


@dataclass
class SearchReport:
    epochs: int
    op_evals: int
    wall_seconds: float
    final_train_loss: float
    final_val_acc: float

    def to_json_dict(self) -> dict:
        return {
            "epochs": self.epochs,
            "op_evals": self.op_evals,
            "wall_seconds": self.wall_seconds,
            "final_train_loss": self.final_train_loss,
            "final_val_acc": self.final_val_acc,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), indent=2, sort_keys=True) + "\n"


@dataclass
class SearchResult:
    alpha_normal: Alpha
    alpha_reduce: Alpha
    network: SearchNetwork
    report: SearchReport


def dropout_at(cfg: DartsConfig, epoch: int) -> float:
    """Skip-connect drop probability at a given epoch: linear decay to zero."""
    if not 0 <= epoch < max(cfg.epochs, 1):
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs})")
    return cfg.dropout0 * (1.0 - epoch / cfg.epochs)


def init_alpha(spec: CellSpec, mode: str = "zeros", seed: int = 0) -> Alpha:
    if mode == "zeros":
        return Alpha.zeros(spec)
    if mode == "noise":
        rng = np.random.default_rng(np.random.SeedSequence([555, seed]))
        return Alpha.noise(spec, rng)
    raise ValueError(f"unknown alpha init mode {mode!r}")


def init_alpha_pair(normal: CellSpec, reduce_: CellSpec, mode: str = "zeros", seed: int = 0):
    return init_alpha(normal, mode, seed), init_alpha(reduce_, mode, seed + 1)


def op_evals_per_epoch(
    net: NetworkSpec,
    normal: CellSpec,
    reduce_: CellSpec,
    n_batches: int,
    forwards_per_step: int,
) -> int:
    """Exact candidate-op applications per epoch of the training loop."""
    positions = set(net.reduction_positions())
    per_forward = sum(
        (reduce_ if ci in positions else normal).total_ops() for ci in range(net.num_cells)
    )
    return n_batches * per_forward * forwards_per_step


def _batches(order: np.ndarray, batch_size: int):
    for start in range(0, len(order), batch_size):
        yield order[start : start + batch_size]


def evaluate_accuracy(network: SearchNetwork, alphas, x, y, batch_size: int = 64) -> float:
    hits = 0
    for start in range(0, len(y), batch_size):
        logits = network.forward(Graph(), x[start : start + batch_size], alphas)
        hits += int((logits.data.argmax(axis=1) == y[start : start + batch_size]).sum())
    return hits / len(y)


def search(
    normal: CellSpec,
    reduce_: CellSpec,
    net: NetworkSpec,
    data: SplitData,
    cfg: DartsConfig,
    network: Optional[SearchNetwork] = None,
    alphas: Optional[tuple] = None,
    alpha_init: str = "zeros",
    counter: Optional[OpEvalCounter] = None,
) -> SearchResult:
    """Run the alternating search loop and return final logits, weights, report.

    ``network`` and ``alphas`` may be supplied pre-initialized (warm starts);
    otherwise both are freshly built from the config seed.
    """
    started = time.perf_counter()
    rng_init = np.random.default_rng(np.random.SeedSequence([cfg.seed, 11]))
    rng_order = np.random.default_rng(np.random.SeedSequence([cfg.seed, 13]))
    rng_drop = np.random.default_rng(np.random.SeedSequence([cfg.seed, 17]))
    if network is None:
        network = SearchNetwork(net, normal, reduce_, rng_init)
    if alphas is None:
        alphas = init_alpha_pair(normal, reduce_, alpha_init, cfg.seed)
    alpha_normal, alpha_reduce = alphas
    # only logits that actually participate in the forward can receive grads
    positions = set(net.reduction_positions())
    n_reduction = sum(1 for ci in range(net.num_cells) if ci in positions)
    alpha_params = []
    if n_reduction < net.num_cells:
        alpha_params += alpha_normal.tensors
    if n_reduction > 0:
        alpha_params += alpha_reduce.tensors
    w_params = network.parameters()
    sgd = Sgd(w_params, cfg.w_opt)
    adam = Adam(alpha_params, cfg.alpha_opt)
    counter = counter if counter is not None else OpEvalCounter()

    def zero_all():
        for p in w_params:
            p.grad = None
        for p in alpha_params:
            p.grad = None

    final_train_loss = float("nan")
    for epoch in range(cfg.epochs):
        p_drop = dropout_at(cfg, epoch)
        w_order = rng_order.permutation(len(data.y_w))
        a_order = rng_order.permutation(len(data.y_alpha))
        w_batches = list(_batches(w_order, cfg.batch_size))
        a_batches = list(_batches(a_order, cfg.batch_size))
        for w_idx, a_idx in zip(w_batches, a_batches):
            if epoch >= cfg.warmup_epochs:
                g = Graph()
                logits = network.forward(
                    g, data.x_alpha[a_idx], (alpha_normal, alpha_reduce),
                    dropout=p_drop, training=True, rng=rng_drop, counter=counter,
                )
                loss = ad.cross_entropy_with_logits(g, logits, data.y_alpha[a_idx])
                zero_all()
                g.backward(loss)
                adam.step()
            g = Graph()
            logits = network.forward(
                g, data.x_w[w_idx], (alpha_normal, alpha_reduce),
                dropout=p_drop, training=True, rng=rng_drop, counter=counter,
            )
            loss = ad.cross_entropy_with_logits(g, logits, data.y_w[w_idx])
            zero_all()
            g.backward(loss)
            clip_grad_norm(w_params, cfg.grad_clip)
            sgd.step()
            final_train_loss = float(loss.data)

    val_acc = evaluate_accuracy(network, (alpha_normal, alpha_reduce), data.x_val, data.y_val)
    report = SearchReport(
        epochs=cfg.epochs,
        op_evals=counter.count,
        wall_seconds=time.perf_counter() - started,
        final_train_loss=final_train_loss,
        final_val_acc=val_acc,
    )
    return SearchResult(alpha_normal, alpha_reduce, network, report)


class DartsSearch(BaseEstimator):
    """Cell search as an estimator: ``fit(X, y)`` learns logits and weights.

    ``X`` is an (n, 3, h, w) float image array, ``y`` integer labels.  The
    training data is split internally into two equal halves (weights /
    architecture) plus a held-out validation third.  After fitting, the
    derived discrete architecture is available as ``genotype_``.
    """

    def __init__(
        self,
        normal_spec=None,
        reduce_spec=None,
        num_cells: int = 4,
        init_channels: int = 8,
        epochs: int = 8,
        warmup_epochs: int = 3,
        batch_size: int = 16,
        lr_w: float = 0.025,
        momentum: float = 0.9,
        weight_decay: float = 3e-4,
        lr_alpha: float = 6e-4,
        alpha_weight_decay: float = 1e-3,
        dropout0: float = 0.0,
        max_skips: Optional[int] = None,
        val_fraction: float = 1 / 3,
        alpha_init: str = "zeros",
        seed: int = 0,
    ):
        self.normal_spec = normal_spec
        self.reduce_spec = reduce_spec
        self.num_cells = num_cells
        self.init_channels = init_channels
        self.epochs = epochs
        self.warmup_epochs = warmup_epochs
        self.batch_size = batch_size
        self.lr_w = lr_w
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.lr_alpha = lr_alpha
        self.alpha_weight_decay = alpha_weight_decay
        self.dropout0 = dropout0
        self.max_skips = max_skips
        self.val_fraction = val_fraction
        self.alpha_init = alpha_init
        self.seed = seed

    def _config(self) -> DartsConfig:
        return DartsConfig(
            epochs=self.epochs,
            warmup_epochs=self.warmup_epochs,
            batch_size=self.batch_size,
            w_opt=SgdConfig(lr=self.lr_w, momentum=self.momentum, weight_decay=self.weight_decay),
            alpha_opt=AdamConfig(lr=self.lr_alpha, weight_decay=self.alpha_weight_decay),
            dropout0=self.dropout0,
            seed=self.seed,
        )

    def fit(self, X, y):
        X, y = check_image_task(X, y)
        normal = self.normal_spec or CellSpec.full("normal", ops=PRIMITIVES)
        reduce_ = self.reduce_spec or CellSpec.full("reduction", ops=PRIMITIVES)
        num_classes = int(y.max()) + 1
        net = NetworkSpec(
            num_cells=self.num_cells,
            init_channels=self.init_channels,
            num_classes=num_classes,
        )
        data = SplitData.from_arrays(X, y, self.val_fraction, self.seed)
        result = search(normal, reduce_, net, data, self._config(), alpha_init=self.alpha_init)
        self.alpha_normal_ = result.alpha_normal
        self.alpha_reduce_ = result.alpha_reduce
        self.network_ = result.network
        self.report_ = result.report
        self.genotype_ = derive_genotype(
            normal, result.alpha_normal, reduce_, result.alpha_reduce, max_skips=self.max_skips
        )
        return self

    def export_genotype(self) -> Genotype:
        if not hasattr(self, "genotype_"):
            raise RuntimeError("DartsSearch is not fitted yet")
        return self.genotype_
