"""Candidate operation vocabulary for cell edges.

The initial candidate set has exactly 8 members.  Convolutional candidates
are depthwise-separable blocks in the familiar relu / conv / per-channel
affine arrangement; batch statistics are deliberately absent so forward
passes stay pure functions of weights and inputs.  All candidates preserve
the channel count; stride 2 halves spatial extent (ceil).
"""

from __future__ import annotations

from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Graph, Tensor

__all__ = [
    "PRIMITIVES",
    "ZERO",
    "SKIP_CONNECT",
    "op_param_shapes",
    "init_op_params",
    "apply_op",
]

PRIMITIVES = (
    "max_pool_3x3",
    "avg_pool_3x3",
    "sep_conv_3x3",
    "sep_conv_5x5",
    "dil_sep_conv_3x3",
    "dil_sep_conv_5x5",
    "skip_connect",
    "zero",
)

ZERO = "zero"
SKIP_CONNECT = "skip_connect"


def _sep_shapes(c: int, k: int) -> dict:
    return {
        "dw1": (c, 1, k, k),
        "pw1": (c, c, 1, 1),
        "g1": (c, 1, 1),
        "b1": (c, 1, 1),
        "dw2": (c, 1, k, k),
        "pw2": (c, c, 1, 1),
        "g2": (c, 1, 1),
        "b2": (c, 1, 1),
    }


def _dil_shapes(c: int, k: int) -> dict:
    return {"dw": (c, 1, k, k), "pw": (c, c, 1, 1), "g": (c, 1, 1), "b": (c, 1, 1)}


def op_param_shapes(op: str, channels: int) -> dict:
    """Parameter name -> shape for one candidate op at a given channel width."""
    if op == "sep_conv_3x3":
        return _sep_shapes(channels, 3)
    if op == "sep_conv_5x5":
        return _sep_shapes(channels, 5)
    if op == "dil_sep_conv_3x3":
        return _dil_shapes(channels, 3)
    if op == "dil_sep_conv_5x5":
        return _dil_shapes(channels, 5)
    if op in ("max_pool_3x3", "avg_pool_3x3", "skip_connect", "zero"):
        return {}
    raise ValueError(f"unknown candidate op: {op!r}")


def init_param(name: str, shape: tuple, rng: np.random.Generator) -> np.ndarray:
    """He-style init for conv kernels; affine gains start at 1.

    Affine biases start slightly positive: with batch statistics out of
    scope, a zero bias can leave every relu unit in a narrow network dead at
    init, freezing training.
    """
    if name.startswith(("g",)) and len(shape) == 3:
        return np.ones(shape)
    if name.startswith(("b",)) and len(shape) == 3:
        return np.full(shape, 0.1)
    fan_in = int(np.prod(shape[1:]))
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


def init_op_params(op: str, channels: int, rng: np.random.Generator) -> dict:
    return {
        name: init_param(name, shape, rng)
        for name, shape in op_param_shapes(op, channels).items()
    }


def _affine(g: Graph, x: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    return ad.add(g, ad.mul(g, x, gain), bias)


def _sep_block(g, x, params, prefix, stride, dilation):
    c = x.data.shape[1]
    y = ad.relu(g, x)
    y = ad.conv2d(g, y, params[f"dw{prefix}"], stride=stride, dilation=dilation, groups=c)
    y = ad.conv2d(g, y, params[f"pw{prefix}"])
    return _affine(g, y, params[f"g{prefix}"], params[f"b{prefix}"])


def apply_op(
    g: Graph,
    op: str,
    x: Tensor,
    params: Mapping[str, Tensor],
    stride: int = 1,
) -> Tensor:
    """Apply one candidate op; ``params`` must match :func:`op_param_shapes`."""
    if op == "max_pool_3x3":
        return ad.max_pool2d(g, x, kernel=3, stride=stride)
    if op == "avg_pool_3x3":
        return ad.avg_pool2d(g, x, kernel=3, stride=stride)
    if op == "skip_connect":
        return ad.identity(g, x) if stride == 1 else ad.subsample(g, x, stride)
    if op == "zero":
        return ad.zero_output(g, x, stride=stride)
    if op in ("sep_conv_3x3", "sep_conv_5x5"):
        y = _sep_block(g, x, params, "1", stride, dilation=1)
        return _sep_block(g, y, params, "2", 1, dilation=1)
    if op in ("dil_sep_conv_3x3", "dil_sep_conv_5x5"):
        c = x.data.shape[1]
        y = ad.relu(g, x)
        y = ad.conv2d(g, y, params["dw"], stride=stride, dilation=2, groups=c)
        y = ad.conv2d(g, y, params["pw"])
        return _affine(g, y, params["g"], params["b"])
    raise ValueError(f"unknown candidate op: {op!r}")
