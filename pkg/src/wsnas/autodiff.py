"""Reverse-mode automatic differentiation over dense float64 tensors.

A :class:`Graph` is an append-only tape: every operation applied through the
functions in this module appends one record, so topological order is simply
execution order.  ``Graph.backward`` replays the tape in reverse and
accumulates gradients into every tensor that requires them; a tensor used on
several paths receives the sum of all path gradients.

All data lives in plain numpy float64 arrays.  Execution is single threaded
per graph; independent graphs share no state.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "Tensor",
    "Graph",
    "parameter",
    "add",
    "sub",
    "mul",
    "scalar_mul",
    "matmul",
    "conv2d",
    "max_pool2d",
    "avg_pool2d",
    "subsample",
    "relu",
    "softmax",
    "log",
    "exp",
    "mean",
    "tensor_sum",
    "concat",
    "identity",
    "zero_output",
    "weighted_sum",
    "cross_entropy_with_logits",
    "forward_op",
    "OP_KINDS",
]


class ShapeError(ValueError):
    """Operand shapes are invalid for an operation."""


class Tensor:
    """Dense float64 value, optionally tracking a gradient.

    ``grad`` is ``None`` until a backward pass deposits a gradient; when
    present it always has the same shape as ``data``.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"


def parameter(data) -> Tensor:
    """Leaf tensor that participates in gradient computation."""
    return Tensor(data, requires_grad=True)


class Graph:
    """Append-only operation tape.

    Each record is ``(out, inputs, grad_fn)`` where ``grad_fn`` maps the
    output gradient to a tuple of input gradients (``None`` for inputs that
    receive no gradient).  Inputs always precede their node on the tape, so
    a single reverse sweep suffices.
    """

    def __init__(self):
        self._tape: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __len__(self) -> int:
        return len(self._tape)

    def record(self, out: Tensor, inputs: Sequence[Tensor], grad_fn: Callable) -> None:
        if out.requires_grad:
            self._tape.append((out, tuple(inputs), grad_fn))

    def backward(self, loss: Tensor) -> None:
        """Populate ``grad`` on every requires-grad tensor reachable from ``loss``."""
        if loss.data.size != 1:
            raise ShapeError(
                f"backward requires a scalar loss, got shape {loss.data.shape}"
            )
        if loss.grad is None:
            loss.grad = np.ones_like(loss.data)
        for out, inputs, grad_fn in reversed(self._tape):
            if out.grad is None:
                continue
            grads = grad_fn(out.grad)
            for tensor, grad in zip(inputs, grads):
                if grad is None or not tensor.requires_grad:
                    continue
                if tensor.grad is None:
                    tensor.grad = np.zeros_like(tensor.data)
                tensor.grad += grad


def _result(g: Graph, data: np.ndarray, inputs: Sequence[Tensor], grad_fn: Callable) -> Tensor:
    out = Tensor(data)
    out.requires_grad = any(t.requires_grad for t in inputs)
    g.record(out, inputs, grad_fn)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape``, inverting numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.data.shape} and {b.data.shape} do not broadcast")


def add(g: Graph, a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("add", a, b)

    def grad_fn(go):
        return _unbroadcast(go, a.data.shape), _unbroadcast(go, b.data.shape)

    return _result(g, a.data + b.data, (a, b), grad_fn)


def sub(g: Graph, a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("sub", a, b)

    def grad_fn(go):
        return _unbroadcast(go, a.data.shape), _unbroadcast(-go, b.data.shape)

    return _result(g, a.data - b.data, (a, b), grad_fn)


def mul(g: Graph, a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("mul", a, b)
    a_data, b_data = a.data, b.data

    def grad_fn(go):
        return (
            _unbroadcast(go * b_data, a_data.shape),
            _unbroadcast(go * a_data, b_data.shape),
        )

    return _result(g, a_data * b_data, (a, b), grad_fn)


def scalar_mul(g: Graph, a: Tensor, c: float) -> Tensor:
    c = float(c)

    def grad_fn(go):
        return (go * c,)

    return _result(g, a.data * c, (a,), grad_fn)


def matmul(g: Graph, a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.data.shape} @ {b.data.shape}")
    a_data, b_data = a.data, b.data

    def grad_fn(go):
        return go @ b_data.T, a_data.T @ go

    return _result(g, a_data @ b_data, (a, b), grad_fn)


def relu(g: Graph, x: Tensor) -> Tensor:
    mask = x.data > 0

    def grad_fn(go):
        return (go * mask,)

    return _result(g, np.where(mask, x.data, 0.0), (x,), grad_fn)


def exp(g: Graph, x: Tensor) -> Tensor:
    out_data = np.exp(x.data)

    def grad_fn(go):
        return (go * out_data,)

    return _result(g, out_data, (x,), grad_fn)


def log(g: Graph, x: Tensor) -> Tensor:
    x_data = x.data

    def grad_fn(go):
        return (go / x_data,)

    return _result(g, np.log(x_data), (x,), grad_fn)


def softmax(g: Graph, x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(go):
        dot = (go * s).sum(axis=axis, keepdims=True)
        return (s * (go - dot),)

    return _result(g, s, (x,), grad_fn)


def _normalize_axes(axis, ndim: int) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def _expand_reduced(go: np.ndarray, shape: tuple, axes: tuple) -> np.ndarray:
    expanded_shape = [1 if i in axes else extent for i, extent in enumerate(shape)]
    return np.broadcast_to(go.reshape(expanded_shape), shape)


def mean(g: Graph, x: Tensor, axis=None) -> Tensor:
    axes = _normalize_axes(axis, x.data.ndim)
    count = int(np.prod([x.data.shape[a] for a in axes])) if axes else 1
    shape = x.data.shape

    def grad_fn(go):
        return (_expand_reduced(go, shape, axes) / count,)

    return _result(g, x.data.mean(axis=axes if axes else None), (x,), grad_fn)


def tensor_sum(g: Graph, x: Tensor, axis=None) -> Tensor:
    axes = _normalize_axes(axis, x.data.ndim)
    shape = x.data.shape

    def grad_fn(go):
        return (_expand_reduced(go, shape, axes),)

    return _result(g, x.data.sum(axis=axes if axes else None), (x,), grad_fn)


def concat(g: Graph, tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    if not tensors:
        raise ShapeError("concat: empty input list")
    base = list(tensors[0].data.shape)
    for t in tensors[1:]:
        other = list(t.data.shape)
        if len(other) != len(base):
            raise ShapeError(f"concat: rank mismatch {base} vs {other}")
        for i, (u, v) in enumerate(zip(base, other)):
            if i != axis % len(base) and u != v:
                raise ShapeError(f"concat: shape mismatch {base} vs {other} on axis {i}")
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def grad_fn(go):
        slicer = [slice(None)] * go.ndim
        grads = []
        for k in range(len(sizes)):
            slicer[axis] = slice(offsets[k], offsets[k + 1])
            grads.append(go[tuple(slicer)])
        return tuple(grads)

    return _result(g, np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), grad_fn)


def identity(g: Graph, x: Tensor) -> Tensor:
    def grad_fn(go):
        return (go,)

    return _result(g, x.data, (x,), grad_fn)


def zero_output(g: Graph, x: Tensor, stride: int = 1) -> Tensor:
    """All-zero output matching the edge contract: spatial dims shrink by ``stride``.

    The input gradient is identically zero; a node is still recorded so that
    parameters reachable only through zero branches carry explicit zero
    gradients instead of appearing untouched by backward.
    """
    if x.data.ndim == 4 and stride > 1:
        n, c, h, w = x.data.shape
        out_shape = (n, c, -(-h // stride), -(-w // stride))
    else:
        out_shape = x.data.shape
    in_shape = x.data.shape

    def grad_fn(go):
        return (np.zeros(in_shape),)

    return _result(g, np.zeros(out_shape), (x,), grad_fn)


def subsample(g: Graph, x: Tensor, stride: int = 2) -> Tensor:
    """Strided spatial subsampling of an NCHW tensor (identity when stride is 1)."""
    if x.data.ndim != 4:
        raise ShapeError(f"subsample: expected NCHW input, got shape {x.data.shape}")
    if stride == 1:
        return identity(g, x)
    shape = x.data.shape

    def grad_fn(go):
        gx = np.zeros(shape)
        gx[:, :, ::stride, ::stride] = go
        return (gx,)

    return _result(g, x.data[:, :, ::stride, ::stride], (x,), grad_fn)


def _pair(value) -> tuple[int, int]:
    if isinstance(value, tuple):
        return value
    return (int(value), int(value))


def conv2d(
    g: Graph,
    x: Tensor,
    w: Tensor,
    stride: int = 1,
    padding: Optional[int] = None,
    dilation: int = 1,
    groups: int = 1,
) -> Tensor:
    """2-D cross correlation with zero padding.

    ``x`` is NCHW, ``w`` is (C_out, C_in/groups, kh, kw).  ``padding=None``
    selects "same" padding: output keeps the spatial size for stride 1 and
    halves it (ceil) for stride 2.  The kernel sum is evaluated position by
    position with strided slices, which keeps the arithmetic order fixed.
    """
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(
            f"conv2d: expected NCHW input and OIHW kernel, got {x.data.shape} and {w.data.shape}"
        )
    n, c_in, h, wd = x.data.shape
    c_out, c_g, kh, kw = w.data.shape
    if c_in != c_g * groups or c_out % groups != 0:
        raise ShapeError(
            f"conv2d: channel mismatch, input {c_in} channels, kernel {w.data.shape}, groups {groups}"
        )
    if padding is None:
        ph, pw = (dilation * (kh - 1)) // 2, (dilation * (kw - 1)) // 2
    else:
        ph, pw = _pair(padding)
    eff_kh = dilation * (kh - 1) + 1
    eff_kw = dilation * (kw - 1) + 1
    ho = (h + 2 * ph - eff_kh) // stride + 1
    wo = (wd + 2 * pw - eff_kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(
            f"conv2d: output would be empty for input {x.data.shape}, kernel {w.data.shape}, "
            f"stride {stride}, padding ({ph}, {pw}), dilation {dilation}"
        )

    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    w_data = w.data
    depthwise = groups == c_in and c_out == c_in and groups > 1

    def tap(arr, u, v):
        return arr[
            :,
            :,
            u * dilation : u * dilation + stride * (ho - 1) + 1 : stride,
            v * dilation : v * dilation + stride * (wo - 1) + 1 : stride,
        ]

    out = np.zeros((n, c_out, ho, wo))
    for u in range(kh):
        for v in range(kw):
            xs = tap(xp, u, v)
            if groups == 1:
                out += np.einsum("ncij,oc->noij", xs, w_data[:, :, u, v])
            elif depthwise:
                out += xs * w_data[:, 0, u, v][None, :, None, None]
            else:
                cg_out = c_out // groups
                for b in range(groups):
                    out[:, b * cg_out : (b + 1) * cg_out] += np.einsum(
                        "ncij,oc->noij",
                        xs[:, b * c_g : (b + 1) * c_g],
                        w_data[b * cg_out : (b + 1) * cg_out, :, u, v],
                    )

    def grad_fn(go):
        gw = np.zeros_like(w_data)
        gxp = np.zeros_like(xp)
        for u in range(kh):
            for v in range(kw):
                xs = tap(xp, u, v)
                gxs = tap(gxp, u, v)
                if groups == 1:
                    gw[:, :, u, v] = np.einsum("noij,ncij->oc", go, xs)
                    gxs += np.einsum("noij,oc->ncij", go, w_data[:, :, u, v])
                elif depthwise:
                    gw[:, 0, u, v] = np.einsum("ncij,ncij->c", go, xs)
                    gxs += go * w_data[:, 0, u, v][None, :, None, None]
                else:
                    cg_out = c_out // groups
                    for b in range(groups):
                        go_b = go[:, b * cg_out : (b + 1) * cg_out]
                        gw[b * cg_out : (b + 1) * cg_out, :, u, v] = np.einsum(
                            "noij,ncij->oc", go_b, xs[:, b * c_g : (b + 1) * c_g]
                        )
                        gxs[:, b * c_g : (b + 1) * c_g] += np.einsum(
                            "noij,oc->ncij", go_b, w_data[b * cg_out : (b + 1) * cg_out, :, u, v]
                        )
        gx = gxp[:, :, ph : ph + h, pw : pw + wd] if (ph or pw) else gxp
        return gx, gw

    return _result(g, out, (x, w), grad_fn)


def _pool2d(g: Graph, x: Tensor, kind: str, kernel: int, stride: int) -> Tensor:
    if x.data.ndim != 4:
        raise ShapeError(f"{kind}_pool2d: expected NCHW input, got shape {x.data.shape}")
    n, c, h, w = x.data.shape
    pad = kernel // 2
    ho = (h + 2 * pad - kernel) // stride + 1
    wo = (w + 2 * pad - kernel) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))

    def tap(arr, u, v):
        return arr[
            :,
            :,
            u : u + stride * (ho - 1) + 1 : stride,
            v : v + stride * (wo - 1) + 1 : stride,
        ]

    stack = np.stack([tap(xp, u, v) for u in range(kernel) for v in range(kernel)])
    if kind == "max":
        # ties resolve to the first (smallest) kernel offset, deterministically
        arg = stack.argmax(axis=0)
        out = stack.max(axis=0)

        def grad_fn(go):
            gxp = np.zeros_like(xp)
            for idx in range(kernel * kernel):
                u, v = divmod(idx, kernel)
                tap(gxp, u, v)[...] += go * (arg == idx)
            return (gxp[:, :, pad : pad + h, pad : pad + w],)

    else:
        area = kernel * kernel
        out = stack.sum(axis=0) / area

        def grad_fn(go):
            gxp = np.zeros_like(xp)
            shared = go / area
            for u in range(kernel):
                for v in range(kernel):
                    tap(gxp, u, v)[...] += shared
            return (gxp[:, :, pad : pad + h, pad : pad + w],)

    return _result(g, out, (x,), grad_fn)


def max_pool2d(g: Graph, x: Tensor, kernel: int = 3, stride: int = 1) -> Tensor:
    return _pool2d(g, x, "max", kernel, stride)


def avg_pool2d(g: Graph, x: Tensor, kernel: int = 3, stride: int = 1) -> Tensor:
    return _pool2d(g, x, "avg", kernel, stride)


def weighted_sum(g: Graph, weights: Tensor, terms: Sequence[Tensor]) -> Tensor:
    """Sum of ``weights[k] * terms[k]``: the continuous mixture of a set of branches."""
    if weights.data.ndim != 1 or len(terms) != weights.data.shape[0]:
        raise ShapeError(
            f"weighted_sum: {len(terms)} terms vs weight vector of shape {weights.data.shape}"
        )
    shape = terms[0].data.shape
    for t in terms[1:]:
        if t.data.shape != shape:
            raise ShapeError(f"weighted_sum: term shapes differ, {shape} vs {t.data.shape}")
    w_data = weights.data
    term_data = [t.data for t in terms]
    out = np.zeros(shape)
    for wk, tk in zip(w_data, term_data):
        out += wk * tk

    def grad_fn(go):
        gw = np.array([np.sum(go * tk) for tk in term_data])
        return (gw, *[wk * go for wk in w_data])

    return _result(g, out, (weights, *terms), grad_fn)


def cross_entropy_with_logits(g: Graph, logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log likelihood of integer ``labels`` under softmax logits."""
    labels = np.asarray(labels)
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy: expected (batch, classes) logits, got {logits.data.shape}")
    n, c = logits.data.shape
    if labels.shape != (n,):
        raise ShapeError(f"cross_entropy: labels shape {labels.shape} does not match batch {n}")
    if labels.min() < 0 or labels.max() >= c:
        raise ShapeError(f"cross_entropy: labels outside [0, {c})")
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1))
    losses = lse - z[np.arange(n), labels]
    probs = np.exp(z - zmax)
    probs /= probs.sum(axis=1, keepdims=True)

    def grad_fn(go):
        gz = probs.copy()
        gz[np.arange(n), labels] -= 1.0
        return (gz * (float(go) / n),)

    return _result(g, np.float64(losses.mean()), (logits,), grad_fn)


OP_KINDS = (
    "add",
    "sub",
    "scalar_mul",
    "mul",
    "matmul",
    "conv2d",
    "max_pool",
    "avg_pool",
    "relu",
    "softmax",
    "log",
    "exp",
    "mean",
    "sum",
    "concat",
    "cross_entropy_with_logits",
    "identity",
    "zero",
)


def forward_op(g: Graph, kind: str, inputs: Sequence[Tensor], **kwargs) -> Tensor:
    """Apply an operation by name; the uniform entry point used by generic drivers."""
    if kind == "add":
        return add(g, *inputs)
    if kind == "sub":
        return sub(g, *inputs)
    if kind == "mul":
        return mul(g, *inputs)
    if kind == "scalar_mul":
        return scalar_mul(g, inputs[0], **kwargs)
    if kind == "matmul":
        return matmul(g, *inputs)
    if kind == "conv2d":
        return conv2d(g, *inputs, **kwargs)
    if kind == "max_pool":
        return max_pool2d(g, inputs[0], **kwargs)
    if kind == "avg_pool":
        return avg_pool2d(g, inputs[0], **kwargs)
    if kind == "relu":
        return relu(g, inputs[0])
    if kind == "softmax":
        return softmax(g, inputs[0], **kwargs)
    if kind == "log":
        return log(g, inputs[0])
    if kind == "exp":
        return exp(g, inputs[0])
    if kind == "mean":
        return mean(g, inputs[0], **kwargs)
    if kind == "sum":
        return tensor_sum(g, inputs[0], **kwargs)
    if kind == "concat":
        return concat(g, list(inputs), **kwargs)
    if kind == "cross_entropy_with_logits":
        return cross_entropy_with_logits(g, inputs[0], **kwargs)
    if kind == "identity":
        return identity(g, inputs[0])
    if kind == "zero":
        return zero_output(g, inputs[0], **kwargs)
    raise ValueError(f"unknown op kind: {kind!r}")
