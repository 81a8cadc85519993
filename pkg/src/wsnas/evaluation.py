"""From-scratch retraining of discrete architectures.

A discrete architecture is just a cell spec whose edges carry a single
candidate each, so the search network runs it unchanged: the one-entry
softmax pins every mixture weight to 1.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin

from . import autodiff as ad
from .autodiff import Graph
from .cells import Alpha, CellSpec
from .genotype import Genotype, genotype_to_cellspec
from .network import NetworkSpec, SearchNetwork
from .optim import Sgd, SgdConfig, clip_grad_norm
from .search import evaluate_accuracy
from .validation import check_image_task

__all__ = ["TrainedNetwork", "train_cell_network", "retrain_genotype", "GenotypeClassifier"]


@dataclass
class TrainedNetwork:
    network: SearchNetwork
    alphas: tuple
    train_losses: list


def train_cell_network(
    normal: CellSpec,
    reduce_: CellSpec,
    net: NetworkSpec,
    x: np.ndarray,
    y: np.ndarray,
    epochs: int,
    batch_size: int = 16,
    sgd: Optional[SgdConfig] = None,
    seed: int = 0,
) -> TrainedNetwork:
    """Plain supervised training of a (restricted) cell network with SGD."""
    sgd = sgd or SgdConfig()
    rng_init = np.random.default_rng(np.random.SeedSequence([seed, 23]))
    rng_order = np.random.default_rng(np.random.SeedSequence([seed, 29]))
    network = SearchNetwork(net, normal, reduce_, rng_init)
    alphas = (Alpha.zeros(normal), Alpha.zeros(reduce_))
    opt = Sgd(network.parameters(), sgd)
    losses = []
    for _ in range(epochs):
        order = rng_order.permutation(len(y))
        epoch_loss = 0.0
        batches = 0
        for start in range(0, len(order), batch_size):
            idx = order[start : start + batch_size]
            g = Graph()
            logits = network.forward(g, x[idx], alphas)
            loss = ad.cross_entropy_with_logits(g, logits, y[idx])
            network.zero_grad()
            g.backward(loss)
            clip_grad_norm(network.parameters(), 5.0)
            opt.step()
            epoch_loss += float(loss.data)
            batches += 1
        losses.append(epoch_loss / max(batches, 1))
    return TrainedNetwork(network=network, alphas=alphas, train_losses=losses)


def retrain_genotype(
    genotype: Genotype,
    x: np.ndarray,
    y: np.ndarray,
    num_cells: int = 4,
    init_channels: int = 8,
    epochs: int = 10,
    batch_size: int = 16,
    sgd: Optional[SgdConfig] = None,
    seed: int = 0,
    num_classes: Optional[int] = None,
) -> TrainedNetwork:
    x, y = check_image_task(x, y)
    normal = genotype_to_cellspec(genotype, "normal")
    reduce_ = genotype_to_cellspec(genotype, "reduce")
    net = NetworkSpec(
        num_cells=num_cells,
        init_channels=init_channels,
        num_classes=num_classes or int(y.max()) + 1,
    )
    return train_cell_network(normal, reduce_, net, x, y, epochs, batch_size, sgd, seed)


class GenotypeClassifier(BaseEstimator, ClassifierMixin):
    """Retrains a discrete architecture from scratch and classifies with it."""

    def __init__(
        self,
        genotype=None,
        num_cells: int = 4,
        init_channels: int = 8,
        epochs: int = 20,
        batch_size: int = 16,
        lr: float = 0.025,
        momentum: float = 0.9,
        weight_decay: float = 3e-4,
        seed: int = 0,
    ):
        self.genotype = genotype
        self.num_cells = num_cells
        self.init_channels = init_channels
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.seed = seed

    def fit(self, X, y):
        if self.genotype is None:
            raise ValueError("GenotypeClassifier requires a genotype")
        X, y = check_image_task(X, y)
        self.classes_ = np.unique(y)
        trained = retrain_genotype(
            self.genotype,
            X,
            y,
            num_cells=self.num_cells,
            init_channels=self.init_channels,
            epochs=self.epochs,
            batch_size=self.batch_size,
            sgd=SgdConfig(lr=self.lr, momentum=self.momentum, weight_decay=self.weight_decay),
            seed=self.seed,
            num_classes=int(np.max(y)) + 1,
        )
        self.network_ = trained.network
        self.alphas_ = trained.alphas
        self.train_losses_ = trained.train_losses
        return self

    def decision_function(self, X):
        if not hasattr(self, "network_"):
            raise RuntimeError("GenotypeClassifier is not fitted yet")
        X = check_image_task(X, np.zeros(len(X), dtype=np.int64))[0]
        chunks = []
        for start in range(0, len(X), 64):
            logits = self.network_.forward(Graph(), X[start : start + 64], self.alphas_)
            chunks.append(logits.data)
        return np.concatenate(chunks)

    def predict(self, X):
        return self.decision_function(X).argmax(axis=1)

    def score_accuracy(self, X, y) -> float:
        return evaluate_accuracy(self.network_, self.alphas_, *check_image_task(X, y))
