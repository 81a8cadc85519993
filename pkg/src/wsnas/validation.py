"""Input validation helpers shared by estimators, the pipeline, and the CLI."""

from __future__ import annotations

import numpy as np

__all__ = ["check_images", "check_labels", "check_image_task"]


def check_images(x, in_channels: int = 3) -> np.ndarray:
    """Validate an image batch: 4-D (n, c, h, w), finite, returned as float64."""
    x = np.asarray(x)
    if x.ndim != 4:
        raise ValueError(f"expected images of shape (n, c, h, w), got {x.shape}")
    if x.shape[1] != in_channels:
        raise ValueError(f"expected {in_channels} channels, got {x.shape[1]}")
    if x.shape[0] == 0:
        raise ValueError("empty image batch")
    x = x.astype(np.float64, copy=False)
    if not np.isfinite(x).all():
        raise ValueError("images contain NaN or Inf")
    return x


def check_labels(y, n: int, num_classes: int | None = None) -> np.ndarray:
    """Validate integer labels aligned with a batch of ``n`` samples."""
    y = np.asarray(y)
    if y.shape != (n,):
        raise ValueError(f"expected labels of shape ({n},), got {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(y == y.astype(np.int64)):
            raise ValueError("labels must be integers")
    y = y.astype(np.int64, copy=False)
    if y.min() < 0:
        raise ValueError("labels must be non-negative")
    if num_classes is not None and y.max() >= num_classes:
        raise ValueError(f"labels exceed the configured {num_classes} classes")
    return y


def check_image_task(x, y, in_channels: int = 3):
    x = check_images(x, in_channels)
    y = check_labels(y, x.shape[0])
    return x, y
