"""Fixed probe network for task embeddings.

The probe is a small two-block CNN trained once on a designated reference
task.  Afterwards the feature extractor is frozen and checksum-pinned:
every embedding in a study must be computed against byte-identical
extractor weights.  Only the linear classifier head is retrained per task.
"""

from __future__ import annotations

import zlib

import numpy as np

from . import autodiff as ad
from .autodiff import Graph, Tensor
from .container import read_container, write_container
from .ops import init_param
from .optim import Sgd, SgdConfig, clip_grad_norm
from .validation import check_image_task

__all__ = ["ProbeNetwork", "fit_head", "head_logits", "head_accuracy"]

PROBE_MAGIC = b"WSPB"

EXTRACTOR_NAMES = (
    "conv1.w",
    "aff1.g",
    "aff1.b",
    "conv2.w",
    "aff2.g",
    "aff2.b",
)


class ProbeNetwork:
    """Two conv blocks and a global average pool; frozen after training."""

    def __init__(self, weights: dict, input_shape: tuple):
        missing = [n for n in EXTRACTOR_NAMES if n not in weights]
        if missing:
            raise ValueError(f"probe weights missing {missing}")
        self.weights = {name: weights[name] for name in EXTRACTOR_NAMES}
        self.input_shape = tuple(int(v) for v in input_shape)
        self.channels = self.weights["conv1.w"].data.shape[0]

    @classmethod
    def build(cls, rng: np.random.Generator, channels: int = 8, input_shape=(3, 16, 16)):
        in_ch = input_shape[0]
        shapes = {
            "conv1.w": (channels, in_ch, 3, 3),
            "aff1.g": (channels, 1, 1),
            "aff1.b": (channels, 1, 1),
            "conv2.w": (channels, channels, 3, 3),
            "aff2.g": (channels, 1, 1),
            "aff2.b": (channels, 1, 1),
        }
        weights = {
            name: ad.parameter(init_param(name.rsplit(".", 1)[-1], shape, rng))
            for name, shape in shapes.items()
        }
        return cls(weights, input_shape)

    @property
    def feature_dim(self) -> int:
        return self.channels

    def extractor_params(self) -> list:
        return [self.weights[name] for name in EXTRACTOR_NAMES]

    def parameter_count(self) -> int:
        return sum(t.data.size for t in self.extractor_params())

    def check_input(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 4 or tuple(x.shape[1:]) != self.input_shape:
            raise ValueError(
                f"probe expects inputs of shape (n, {', '.join(map(str, self.input_shape))}), "
                f"got {x.shape}"
            )
        return x

    def features(self, g: Graph, x: np.ndarray) -> Tensor:
        """(n, feature_dim) activations; differentiable through the extractor."""
        x = self.check_input(x)
        t = Tensor(x)
        y = ad.conv2d(g, t, self.weights["conv1.w"])
        y = ad.add(g, ad.mul(g, y, self.weights["aff1.g"]), self.weights["aff1.b"])
        y = ad.relu(g, y)
        y = ad.conv2d(g, y, self.weights["conv2.w"], stride=2)
        y = ad.add(g, ad.mul(g, y, self.weights["aff2.g"]), self.weights["aff2.b"])
        y = ad.relu(g, y)
        return ad.mean(g, y, axis=(2, 3))

    def checksum(self) -> str:
        crc = 0
        for name in EXTRACTOR_NAMES:
            crc = zlib.crc32(name.encode(), crc)
            crc = zlib.crc32(np.ascontiguousarray(self.weights[name].data).tobytes(), crc)
        return f"{crc:08x}"

    # -- persistence ---------------------------------------------------------

    def save(self, path):
        header = {
            "kind": "probe_network",
            "input_shape": list(self.input_shape),
            "checksum": self.checksum(),
        }
        arrays = {name: self.weights[name].data for name in EXTRACTOR_NAMES}
        return write_container(path, PROBE_MAGIC, header, arrays)

    @classmethod
    def load(cls, path) -> "ProbeNetwork":
        header, arrays = read_container(path, PROBE_MAGIC)
        weights = {name: ad.parameter(arrays[name]) for name in EXTRACTOR_NAMES}
        probe = cls(weights, tuple(header["input_shape"]))
        if probe.checksum() != header["checksum"]:
            raise ValueError(f"{path}: probe checksum does not match its header")
        return probe

    @classmethod
    def train_reference(
        cls,
        x,
        y,
        channels: int = 8,
        epochs: int = 30,
        batch_size: int = 16,
        lr: float = 0.05,
        seed: int = 0,
    ) -> "ProbeNetwork":
        """Train extractor plus a throwaway head on the reference task, then freeze."""
        x, y = check_image_task(x, y, in_channels=np.asarray(x).shape[1])
        rng = np.random.default_rng(np.random.SeedSequence([seed, 41]))
        probe = cls.build(rng, channels=channels, input_shape=x.shape[1:])
        classes = int(y.max()) + 1
        head_w = ad.parameter(init_param("w", (probe.feature_dim, classes), rng))
        head_b = ad.parameter(np.zeros(classes))
        params = probe.extractor_params() + [head_w, head_b]
        opt = Sgd(params, SgdConfig(lr=lr, momentum=0.9, weight_decay=1e-4))
        order_rng = np.random.default_rng(np.random.SeedSequence([seed, 43]))
        for _ in range(epochs):
            order = order_rng.permutation(len(y))
            for start in range(0, len(order), batch_size):
                idx = order[start : start + batch_size]
                g = Graph()
                feats = probe.features(g, x[idx])
                logits = ad.add(g, ad.matmul(g, feats, head_w), head_b)
                loss = ad.cross_entropy_with_logits(g, logits, y[idx])
                for p in params:
                    p.grad = None
                g.backward(loss)
                clip_grad_norm(params, 5.0)
                opt.step()
        return probe


def head_logits(g: Graph, probe: ProbeNetwork, head, x) -> Tensor:
    head_w, head_b = head
    feats = probe.features(g, x)
    return ad.add(g, ad.matmul(g, feats, head_w), head_b)


def fit_head(
    probe: ProbeNetwork,
    x,
    y,
    epochs: int = 50,
    batch_size: int = 32,
    lr: float = 0.1,
    seed: int = 0,
):
    """Train a fresh linear head on frozen probe features.

    The extractor is untouched (features are precomputed once); a head is
    always built to match the task's class count.
    """
    x, y = check_image_task(x, y, in_channels=np.asarray(x).shape[1])
    feats = probe.features(Graph(), x).data  # frozen: no graph needed afterwards
    classes = int(y.max()) + 1
    rng = np.random.default_rng(np.random.SeedSequence([seed, 47]))
    head_w = ad.parameter(init_param("w", (probe.feature_dim, classes), rng))
    head_b = ad.parameter(np.zeros(classes))
    opt = Sgd([head_w, head_b], SgdConfig(lr=lr, momentum=0.9, weight_decay=0.0))
    order_rng = np.random.default_rng(np.random.SeedSequence([seed, 53]))
    for _ in range(epochs):
        order = order_rng.permutation(len(y))
        for start in range(0, len(order), batch_size):
            idx = order[start : start + batch_size]
            g = Graph()
            logits = ad.add(g, ad.matmul(g, Tensor(feats[idx]), head_w), head_b)
            loss = ad.cross_entropy_with_logits(g, logits, y[idx])
            head_w.grad = None
            head_b.grad = None
            g.backward(loss)
            opt.step()
    return head_w, head_b


def head_accuracy(probe: ProbeNetwork, head, x, y) -> float:
    logits = head_logits(Graph(), probe, head, np.asarray(x, dtype=np.float64))
    return float((logits.data.argmax(axis=1) == np.asarray(y)).mean())
