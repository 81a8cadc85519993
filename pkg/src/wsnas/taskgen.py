"""Synthetic image-classification tasks in two generative families.

Family ``stripes`` renders oriented sinusoidal gratings whose orientation
encodes the class; family ``blobs`` renders scattered Gaussian bumps whose
count encodes the class.  Each family has a continuous style parameter
(texture frequency / blob radius) so tasks within a family land close
together while the two families stay visually and statistically far apart.

Bundles serialize to a little-endian binary format:
magic "WSNB", version u8=1, u32 n/c/h/w/classes, labels u32[n],
pixels f32[n*c*h*w], CRC32 of all preceding bytes; task metadata rides in a
``<file>.meta.json`` sidecar.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

__all__ = [
    "FAMILIES",
    "TaskBundle",
    "Split",
    "BundleFormatError",
    "generate_task",
    "planted_identity_task",
    "stratified_split",
    "stratified_indices",
    "save_bundle",
    "load_bundle",
]

FAMILIES = ("stripes", "blobs")

MAGIC = b"WSNB"
VERSION = 1


class BundleFormatError(ValueError):
    """A bundle file failed structural or checksum validation."""


@dataclass
class TaskBundle:
    task_id: str
    images: np.ndarray  # (n, 3, h, w) float32 in [0, 1]
    labels: np.ndarray  # (n,) int64
    classes: int
    family_id: str
    gen_params: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.validate()

    @property
    def n(self) -> int:
        return self.images.shape[0]

    def validate(self) -> None:
        if self.images.ndim != 4 or self.images.shape[1] != 3:
            raise ValueError(f"images must be (n, 3, h, w), got {self.images.shape}")
        if self.images.shape[2] != self.images.shape[3]:
            raise ValueError("images must be square")
        if self.labels.shape != (self.images.shape[0],):
            raise ValueError("labels must align with images")
        if not np.isfinite(self.images).all():
            raise ValueError("images contain NaN or Inf")
        if self.images.min() < 0.0 or self.images.max() > 1.0:
            raise ValueError("pixel values must lie in [0, 1]")
        if self.labels.min() < 0 or self.labels.max() >= self.classes:
            raise ValueError(f"labels outside [0, {self.classes})")
        counts = np.bincount(self.labels, minlength=self.classes)
        if counts.min() < 4:
            raise ValueError("every class needs at least 4 samples to admit the splits")

    def equal_to(self, other: "TaskBundle") -> bool:
        return (
            self.task_id == other.task_id
            and self.classes == other.classes
            and self.family_id == other.family_id
            and self.seed == other.seed
            and self.gen_params == other.gen_params
            and np.array_equal(self.images, other.images)
            and np.array_equal(self.labels, other.labels)
        )


@dataclass(frozen=True)
class Split:
    train_w: np.ndarray
    train_alpha: np.ndarray
    validation: np.ndarray


def _balanced_labels(n: int, classes: int) -> np.ndarray:
    base = n // classes
    counts = [base + (1 if k < n % classes else 0) for k in range(classes)]
    return np.concatenate([np.full(c, k, dtype=np.int64) for k, c in enumerate(counts)])


def _stripes_image(rng, size, theta, freq, noise):
    ys, xs = np.mgrid[0:size, 0:size] / size
    proj = xs * np.cos(theta) + ys * np.sin(theta)
    channels = []
    for ch in range(3):
        phase = rng.uniform(0, 2 * np.pi)
        wave = 0.5 + 0.4 * np.sin(2 * np.pi * freq * proj + phase + ch * 0.5)
        channels.append(wave)
    img = np.stack(channels)
    img += rng.normal(0.0, noise, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def _blobs_image(rng, size, count, radius, noise):
    ys, xs = np.mgrid[0:size, 0:size] / size
    img = np.full((3, size, size), 0.15)
    for _ in range(count):
        cy, cx = rng.uniform(0.15, 0.85, size=2)
        color = rng.uniform(0.4, 1.0, size=3)
        bump = np.exp(-(((ys - cy) ** 2 + (xs - cx) ** 2) / (2 * radius**2)))
        img += color[:, None, None] * bump
    img /= max(1.0, img.max())
    img += rng.normal(0.0, noise, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def generate_task(
    family_id: str,
    seed: int,
    n: int,
    classes: int,
    size: int = 16,
    style: Optional[float] = None,
    noise: float = 0.05,
    task_id: Optional[str] = None,
) -> TaskBundle:
    """Deterministic task synthesis; identical arguments give identical bundles."""
    if family_id not in FAMILIES:
        raise ValueError(f"unknown family {family_id!r}, expected one of {FAMILIES}")
    if classes < 2:
        raise ValueError(f"need at least 2 classes, got {classes}")
    if n < 4 * classes:
        raise ValueError(f"n too small: need at least {4 * classes} samples for {classes} classes")
    rng = np.random.default_rng(np.random.SeedSequence([hash_family(family_id), seed]))
    if style is None:
        style = float(rng.uniform(0.0, 1.0))
    labels = _balanced_labels(n, classes)
    order = rng.permutation(n)
    labels = labels[order]
    images = np.empty((n, 3, size, size), dtype=np.float32)
    if family_id == "stripes":
        freq = 2.0 + 2.0 * style
        for idx, label in enumerate(labels):
            theta = np.pi * label / classes + 0.1 * style
            images[idx] = _stripes_image(rng, size, theta, freq, noise)
        gen_params = {"texture_frequency": freq, "noise_level": noise, "style": style}
    else:
        radius = 0.08 + 0.08 * style
        for idx, label in enumerate(labels):
            images[idx] = _blobs_image(rng, size, int(label) + 1, radius, noise)
        gen_params = {"blob_radius": radius, "noise_level": noise, "style": style}
    return TaskBundle(
        task_id=task_id or f"{family_id}-s{seed}",
        images=images,
        labels=labels,
        classes=classes,
        family_id=family_id,
        gen_params=gen_params,
        seed=seed,
    )


def hash_family(family_id: str) -> int:
    return zlib.crc32(family_id.encode())


def planted_identity_task(n: int = 64, seed: int = 0, size: int = 8):
    """Binary task whose label is carried by the mean intensity of the image.

    Any architecture that passes the input through (skip-connect) separates
    the classes; blocking the path (zero) reduces the network to its bias.
    """
    rng = np.random.default_rng(np.random.SeedSequence([977, seed]))
    labels = _balanced_labels(n, 2)
    labels = labels[rng.permutation(n)]
    shift = np.where(labels == 1, 0.15, -0.15)
    images = 0.5 + shift[:, None, None, None] + rng.uniform(-0.05, 0.05, (n, 3, size, size))
    return np.clip(images, 0.0, 1.0), labels


def stratified_indices(labels: np.ndarray, val_fraction: float, seed: int) -> Split:
    """Per-class shuffled partition into two equal train halves and a validation set."""
    labels = np.asarray(labels)
    if not 0.0 < val_fraction < 1.0:
        raise ValueError(f"val_fraction must be in (0, 1), got {val_fraction}")
    rng = np.random.default_rng(np.random.SeedSequence([1303, seed]))
    train_w, train_alpha, validation = [], [], []
    for k, cls in enumerate(np.unique(labels)):
        idx = np.flatnonzero(labels == cls)
        idx = idx[rng.permutation(len(idx))]
        n_val = int(round(len(idx) * val_fraction))
        if n_val < 1 or len(idx) - n_val < 2:
            raise ValueError(
                f"class {cls}: {len(idx)} samples cannot honour a {val_fraction:.2f} validation split"
            )
        validation.append(idx[:n_val])
        rest = idx[n_val:]
        # alternate which half receives the odd sample so the halves stay equal
        half = (len(rest) + (1 if k % 2 == 0 else 0)) // 2
        train_w.append(rest[:half])
        train_alpha.append(rest[half:])
    return Split(
        train_w=np.sort(np.concatenate(train_w)),
        train_alpha=np.sort(np.concatenate(train_alpha)),
        validation=np.sort(np.concatenate(validation)),
    )


def stratified_split(bundle: TaskBundle, val_fraction: float = 1 / 3, seed: int = 0) -> Split:
    return stratified_indices(bundle.labels, val_fraction, seed)


# -- bundle persistence -------------------------------------------------------


def _sidecar_path(path: Path) -> Path:
    return Path(str(path) + ".meta.json")


def save_bundle(bundle: TaskBundle, path) -> Path:
    path = Path(path)
    n, c, h, w = bundle.images.shape
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<B", VERSION)
    blob += struct.pack("<5I", n, c, h, w, bundle.classes)
    blob += bundle.labels.astype("<u4").tobytes()
    blob += bundle.images.astype("<f4").tobytes()
    blob += struct.pack("<I", zlib.crc32(bytes(blob)))
    path.write_bytes(bytes(blob))
    sidecar = {
        "task_id": bundle.task_id,
        "family_id": bundle.family_id,
        "gen_params": bundle.gen_params,
        "seed": bundle.seed,
    }
    _sidecar_path(path).write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    return path


def load_bundle(path) -> TaskBundle:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 4 + 1 + 20 + 4:
        raise BundleFormatError(f"{path}: file too short to be a task bundle")
    if raw[:4] != MAGIC:
        raise BundleFormatError(f"{path}: magic mismatch, expected WSNB")
    version = raw[4]
    if version != VERSION:
        raise BundleFormatError(f"{path}: unsupported bundle version {version}, expected {VERSION}")
    (stored_crc,) = struct.unpack("<I", raw[-4:])
    if zlib.crc32(raw[:-4]) != stored_crc:
        raise BundleFormatError(f"{path}: checksum mismatch, file is corrupt or truncated")
    n, c, h, w, classes = struct.unpack("<5I", raw[5:25])
    expected = 25 + 4 * n + 4 * n * c * h * w + 4
    if len(raw) != expected:
        raise BundleFormatError(
            f"{path}: payload length {len(raw)} does not match header ({expected} expected)"
        )
    labels = np.frombuffer(raw, dtype="<u4", count=n, offset=25).astype(np.int64)
    pixels = np.frombuffer(raw, dtype="<f4", count=n * c * h * w, offset=25 + 4 * n)
    images = pixels.reshape(n, c, h, w).copy()
    sidecar_path = _sidecar_path(path)
    if not sidecar_path.exists():
        raise BundleFormatError(f"{path}: missing metadata sidecar {sidecar_path.name}")
    meta = json.loads(sidecar_path.read_text())
    for key in ("task_id", "family_id", "gen_params", "seed"):
        if key not in meta:
            raise BundleFormatError(f"{sidecar_path}: sidecar is missing field {key!r}")
    return TaskBundle(
        task_id=meta["task_id"],
        images=images,
        labels=labels,
        classes=classes,
        family_id=meta["family_id"],
        gen_params=meta["gen_params"],
        seed=meta["seed"],
    )
