"""Diagonal Fisher information task embeddings.

The empirical estimator draws labels from the model's own predictive
distribution (not the dataset labels) and averages squared per-weight
gradients of the log likelihood.  Per input, the gradient takes one
distinct value per class, so the Monte-Carlo draws reduce to one
multinomial count vector per input: exactly the same sampling law at a
fraction of the cost.

The robust estimator fits a diagonal Gaussian weight perturbation by
minimizing the expected task loss plus a scaled KL penalty to an isotropic
prior, then reads the Fisher diagonal off the stationarity condition

    F = beta/(2N) * Lambda^-1 - beta*lambda^2/(2N) * I   (clamped at 0).

For this to be the exact stationary point of the optimized objective, the
KL penalty is scaled by beta/(2N) and lambda^2 acts as the prior precision:
the beta -> infinity limit then drives Lambda to the prior variance
1/lambda^2 and the reported embedding to zero.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator

from . import autodiff as ad
from .autodiff import Graph, Tensor
from .probe import ProbeNetwork, fit_head, head_logits
from .validation import check_image_task

__all__ = [
    "FimEstimatorConfig",
    "TaskEmbedding",
    "RobustFimError",
    "fim_diag_empirical",
    "fim_diag_robust",
    "empirical_fim_diag",
    "robust_fim_diag",
    "TaskEmbedder",
]


@dataclass(frozen=True)
class FimEstimatorConfig:
    beta: float = 0.01
    lambda_sq: float = 1.0
    n: Optional[int] = None  # defaults to the dataset size
    mc_draws: int = 1
    max_iters: int = 800
    lr: float = 0.1
    pairs: int = 8
    drift_tol: float = 0.05

    def __post_init__(self):
        if self.beta <= 0 or self.lambda_sq <= 0:
            raise ValueError("beta and lambda_sq must be positive")
        if self.n is not None and self.n < 1:
            raise ValueError("n must be >= 1")
        if self.mc_draws < 1 or self.pairs < 1 or self.max_iters < 1:
            raise ValueError("mc_draws, pairs and max_iters must be >= 1")


class RobustFimError(RuntimeError):
    """Robust estimation failed to converge; carries the objective trace."""

    def __init__(self, message: str, trace):
        super().__init__(message)
        self.trace = list(trace)


@dataclass
class TaskEmbedding:
    """Non-negative vector with one entry per probe extractor weight."""

    values: np.ndarray
    task_id: str
    estimator: str
    probe_checksum: str
    n: int

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1:
            raise ValueError("embedding values must be a flat vector")
        if not np.isfinite(self.values).all() or (self.values < 0).any():
            raise ValueError("embedding values must be finite and non-negative")

    def save(self, path) -> Path:
        path = Path(path)
        path.write_bytes(self.values.astype("<f8").tobytes())
        sidecar = {
            "task_id": self.task_id,
            "estimator": self.estimator,
            "probe_checksum": self.probe_checksum,
            "n": self.n,
        }
        Path(str(path) + ".meta.json").write_text(
            json.dumps(sidecar, indent=2, sort_keys=True) + "\n"
        )
        return path

    @classmethod
    def load(cls, path) -> "TaskEmbedding":
        path = Path(path)
        values = np.frombuffer(path.read_bytes(), dtype="<f8").copy()
        sidecar_path = Path(str(path) + ".meta.json")
        if not sidecar_path.exists():
            raise ValueError(f"{path}: missing embedding sidecar {sidecar_path.name}")
        meta = json.loads(sidecar_path.read_text())
        for key in ("task_id", "estimator", "probe_checksum", "n"):
            if key not in meta:
                raise ValueError(f"{sidecar_path}: sidecar is missing field {key!r}")
        return cls(
            values=values,
            task_id=meta["task_id"],
            estimator=meta["estimator"],
            probe_checksum=meta["probe_checksum"],
            n=meta["n"],
        )


def _flat_grads(params: Sequence[Tensor]) -> np.ndarray:
    return np.concatenate(
        [
            (p.grad if p.grad is not None else np.zeros_like(p.data)).reshape(-1)
            for p in params
        ]
    )


def fim_diag_empirical(
    forward_logits: Callable[[Graph, np.ndarray], Tensor],
    params: Sequence[Tensor],
    xs: np.ndarray,
    mc_draws: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Diagonal FIM of any model: squared log-likelihood gradients averaged
    over inputs and over labels drawn from the model's predictive."""
    if len(xs) == 0:
        raise ValueError("empirical FIM needs a non-empty task")
    dim = sum(p.data.size for p in params)
    acc = np.zeros(dim)
    for i in range(len(xs)):
        sample = xs[i : i + 1]
        g = Graph()
        logits = forward_logits(g, sample)
        probs = np.exp(logits.data[0] - logits.data[0].max())
        probs /= probs.sum()
        counts = rng.multinomial(mc_draws, probs)
        for cls, count in enumerate(counts):
            if count == 0:
                continue
            g = Graph()
            logits = forward_logits(g, sample)
            loss = ad.cross_entropy_with_logits(g, logits, np.array([cls]))
            for p in params:
                p.grad = None
            g.backward(loss)
            # grad of log p = -grad of the NLL; the square kills the sign
            acc += count * _flat_grads(params) ** 2
    return acc / (len(xs) * mc_draws)


def fim_diag_robust(
    loss_fn: Callable[[Graph], Tensor],
    params: Sequence[Tensor],
    cfg: FimEstimatorConfig,
    rng: np.random.Generator,
    n_samples: int,
) -> np.ndarray:
    """Diagonal FIM via a fitted Gaussian weight perturbation.

    ``loss_fn`` evaluates the mean task loss at the parameters' current
    values.  Optimization runs on log-variances with a fixed standardized
    antithetic noise set, so the surrogate objective is deterministic and
    short-memory Adam can converge tightly.
    """
    n = cfg.n if cfg.n is not None else n_samples
    originals = [p.data.copy() for p in params]
    shapes = [p.data.shape for p in params]
    sizes = [p.data.size for p in params]
    dim = sum(sizes)

    eps = rng.standard_normal((cfg.pairs, dim))
    eps /= np.sqrt(np.mean(eps**2, axis=0, keepdims=True))

    rho = np.full(dim, -np.log(cfg.lambda_sq))  # start at the prior variance
    m = np.zeros(dim)
    v = np.zeros(dim)
    beta1, beta2 = 0.5, 0.9
    trace = []
    tail: list[np.ndarray] = []
    tail_len = max(10, cfg.max_iters // 10)

    def set_params(flat: np.ndarray) -> None:
        offset = 0
        for p, shape, size in zip(params, shapes, sizes):
            p.data = flat[offset : offset + size].reshape(shape)
            offset += size

    def grad_at(flat: np.ndarray) -> tuple:
        set_params(flat)
        g = Graph()
        loss = loss_fn(g)
        for p in params:
            p.grad = None
        g.backward(loss)
        return _flat_grads(params), float(loss.data)

    base = np.concatenate([arr.reshape(-1) for arr in originals])
    try:
        for it in range(cfg.max_iters):
            sigma = np.exp(rho / 2)
            grad_rho = np.zeros(dim)
            data_obj = 0.0
            for k in range(cfg.pairs):
                g_plus, l_plus = grad_at(base + sigma * eps[k])
                g_minus, l_minus = grad_at(base - sigma * eps[k])
                # antithetic pair: mean of g(w+)*eps and g(w-)*(-eps), chained
                # through dw/drho = eps * sigma / 2
                grad_rho += 0.25 * (g_plus - g_minus) * eps[k] * sigma
                data_obj += 0.5 * (l_plus + l_minus)
            grad_rho /= cfg.pairs
            data_obj /= cfg.pairs
            lam_term = cfg.lambda_sq * np.exp(rho)
            penalty = (cfg.beta / (4 * n)) * np.sum(lam_term - 1 - np.log(lam_term))
            grad_rho += (cfg.beta / (4 * n)) * (lam_term - 1)
            trace.append(data_obj + penalty)
            t = it + 1
            m = beta1 * m + (1 - beta1) * grad_rho
            v = beta2 * v + (1 - beta2) * grad_rho**2
            step = (m / (1 - beta1**t)) / (np.sqrt(v / (1 - beta2**t)) + 1e-12)
            rho -= cfg.lr * (1 - it / cfg.max_iters) * step
            tail.append(rho.copy())
            if len(tail) > tail_len:
                tail.pop(0)
    finally:
        set_params(base)
        for p, arr in zip(params, originals):
            p.data = arr

    if not np.isfinite(trace[-1]) or not np.isfinite(rho).all():
        raise RobustFimError("robust FIM optimization diverged", trace)
    drift = np.max(np.abs(tail[-1] - tail[0]))
    if drift > cfg.drift_tol:
        raise RobustFimError(
            f"robust FIM optimization did not settle (tail drift {drift:.4f})", trace
        )
    lam = np.exp(rho)
    estimate = cfg.beta / (2 * n) * (1.0 / lam) - cfg.beta * cfg.lambda_sq / (2 * n)
    return np.maximum(estimate, 0.0)


# -- probe-network wrappers ---------------------------------------------------


def empirical_fim_diag(
    probe: ProbeNetwork,
    head,
    x,
    mc_draws: int = 1,
    seed: int = 0,
    task_id: str = "task",
) -> TaskEmbedding:
    """Embed a task as the empirical Fisher diagonal of the probe extractor."""
    x = probe.check_input(np.asarray(x))
    before = probe.checksum()
    rng = np.random.default_rng(np.random.SeedSequence([seed, 61]))
    values = fim_diag_empirical(
        lambda g, batch: head_logits(g, probe, head, batch),
        probe.extractor_params(),
        x,
        mc_draws,
        rng,
    )
    assert probe.checksum() == before, "probe extractor changed during embedding"
    return TaskEmbedding(
        values=values,
        task_id=task_id,
        estimator="empirical",
        probe_checksum=before,
        n=len(x),
    )


def robust_fim_diag(
    probe: ProbeNetwork,
    head,
    x,
    y,
    cfg: Optional[FimEstimatorConfig] = None,
    seed: int = 0,
    task_id: str = "task",
) -> TaskEmbedding:
    """Embed a task via the robust perturbation-based Fisher estimate."""
    cfg = cfg or FimEstimatorConfig()
    x = probe.check_input(np.asarray(x))
    y = np.asarray(y)
    before = probe.checksum()
    rng = np.random.default_rng(np.random.SeedSequence([seed, 67]))

    def loss_fn(g: Graph) -> Tensor:
        logits = head_logits(g, probe, head, x)
        return ad.cross_entropy_with_logits(g, logits, y)

    values = fim_diag_robust(loss_fn, probe.extractor_params(), cfg, rng, len(x))
    assert probe.checksum() == before, "probe extractor changed during embedding"
    return TaskEmbedding(
        values=values,
        task_id=task_id,
        estimator="robust",
        probe_checksum=before,
        n=cfg.n if cfg.n is not None else len(x),
    )


class TaskEmbedder(BaseEstimator):
    """Estimator facade: ``fit(X, y)`` trains the head and computes ``embedding_``."""

    def __init__(
        self,
        probe: Optional[ProbeNetwork] = None,
        estimator: str = "empirical",
        mc_draws: int = 1,
        head_epochs: int = 50,
        beta: float = 0.01,
        lambda_sq: float = 1.0,
        task_id: str = "task",
        seed: int = 0,
    ):
        self.probe = probe
        self.estimator = estimator
        self.mc_draws = mc_draws
        self.head_epochs = head_epochs
        self.beta = beta
        self.lambda_sq = lambda_sq
        self.task_id = task_id
        self.seed = seed

    def fit(self, X, y):
        if self.probe is None:
            raise ValueError("TaskEmbedder requires a trained probe")
        if self.estimator not in ("empirical", "robust"):
            raise ValueError(f"unknown estimator {self.estimator!r}")
        X, y = check_image_task(X, y, in_channels=np.asarray(X).shape[1])
        head = fit_head(self.probe, X, y, epochs=self.head_epochs, seed=self.seed)
        self.head_ = head
        if self.estimator == "empirical":
            self.embedding_ = empirical_fim_diag(
                self.probe, head, X, mc_draws=self.mc_draws,
                seed=self.seed, task_id=self.task_id,
            )
        else:
            cfg = FimEstimatorConfig(beta=self.beta, lambda_sq=self.lambda_sq)
            self.embedding_ = robust_fim_diag(
                self.probe, head, X, y, cfg=cfg, seed=self.seed, task_id=self.task_id,
            )
        return self

    def transform(self, X=None, y=None):
        if not hasattr(self, "embedding_"):
            raise RuntimeError("TaskEmbedder is not fitted yet")
        return self.embedding_.values[None, :]
