"""Differentiable primitives.

Every function takes and returns :class:`Tensor` objects and registers a
backward closure on the active tape.  Reductions accumulate in float64.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from . import conv as _conv
from .conv import ConvSpec
from .tensor import ShapeError, Tensor, active_tape, as_tensor, make_result

BCE_EPS = 1e-7


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_result("add", a.data + b.data, (a, b), back)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def back(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return make_result("sub", a.data - b.data, (a, b), back)


def neg(a: Tensor) -> Tensor:
    return make_result("neg", -a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def back(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)

    return make_result("mul", a.data * b.data, (a, b), back)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product ``[n, k] @ [k, m]``, computed row by row."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    b64 = b.data.astype(np.float64)
    # row-wise so each row's result is independent of how many rows there are
    out = np.stack([a.data[i].astype(np.float64) @ b64 for i in range(a.shape[0])])

    def back(g):
        return (g @ b64.T if a.requires_grad else None,
                a.data.astype(np.float64).T @ g if b.requires_grad else None)

    return make_result("matmul", out, (a, b), back)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_result("relu", np.where(mask, x.data, 0), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    z = x.data.astype(np.float64)
    # split by sign so exp never overflows
    e = np.exp(-np.abs(z))
    s = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return make_result("sigmoid", s, (x,), lambda g: (g * s * (1.0 - s),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {x.shape} to {shape}") from None
    return make_result("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def sum(x: Tensor, axis=None) -> Tensor:
    out = x.data.sum(axis=axis, dtype=np.float64)

    def back(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape),)

    return make_result("sum", out, (x,), back)


def mean(x: Tensor, axis=None) -> Tensor:
    out = x.data.mean(axis=axis, dtype=np.float64)
    count = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))

    def back(g):
        g = g / count
        if axis is None:
            return (np.broadcast_to(g, x.shape),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape),)

    return make_result("mean", out, (x,), back)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    """Join along ``axis``; all other extents must agree."""
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of zero tensors")
    ref = tensors[0]
    axis = axis % ref.ndim if ref.ndim else 0
    for t in tensors[1:]:
        if t.ndim != ref.ndim or any(t.shape[i] != ref.shape[i] for i in range(ref.ndim) if i != axis):
            raise ShapeError(f"concat: {t.shape} incompatible with {ref.shape} off axis {axis}")
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])
    out = np.concatenate([t.data for t in tensors], axis=axis)

    def back(g):
        return tuple(np.take(g, np.arange(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:]))

    return make_result("concat", out, tuple(tensors), back)


def split(x: Tensor, sizes: Sequence[int], axis: int = 1) -> list[Tensor]:
    """Inverse of :func:`concat`: cut ``x`` into pieces of ``sizes`` along ``axis``."""
    if int(np.sum(sizes)) != x.shape[axis] or any(s < 1 for s in sizes):
        raise ShapeError(f"split sizes {list(sizes)} do not cover extent {x.shape[axis]}")
    bounds = np.cumsum([0] + list(sizes))
    pieces = []
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        idx = [slice(None)] * x.ndim
        idx[axis] = slice(int(lo), int(hi))
        idx = tuple(idx)

        def back(g, idx=idx):
            full = np.zeros(x.shape, dtype=np.float64)
            full[idx] = g
            return (full,)

        pieces.append(make_result("split", x.data[idx], (x,), back))
    return pieces


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` shaped ``[out, in]``."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} vs weight {weight.shape}")
    w64 = weight.data.astype(np.float64)
    out = np.stack([x.data[i].astype(np.float64) @ w64.T for i in range(x.shape[0])])
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise ShapeError(f"linear: bias {bias.shape} vs weight {weight.shape}")
        out = out + bias.data.astype(np.float64)

    def back(g):
        gx = g @ w64 if x.requires_grad else None
        gw = g.T @ x.data.astype(np.float64)
        return (gx, gw) if bias is None else (gx, gw, g.sum(axis=0))

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return make_result("linear", out, inputs, back)


def conv(x: Tensor, weight: Tensor, bias: Tensor | None, spec: ConvSpec) -> Tensor:
    """Cross-correlation of ``x`` ``[N, C, *spatial]`` with ``weight`` ``[Cout, C, *kernel]``."""
    if x.ndim != spec.rank + 2:
        raise ShapeError(f"conv: input rank {x.ndim} does not match {spec.rank}-d spec")
    if x.shape[1] != spec.in_channels:
        raise ShapeError(f"conv: input has {x.shape[1]} channels, spec expects {spec.in_channels}")
    expected_w = (spec.out_channels, spec.in_channels) + spec.kernel
    if weight.shape != expected_w:
        raise ShapeError(f"conv: weight {weight.shape} != {expected_w}")
    out, cols = _conv.conv_forward(x.data, weight.data, None if bias is None else bias.data, spec)
    if not (weight.requires_grad and active_tape() is not None):
        cols = None

    def back(g):
        gx, gw, gb = _conv.conv_backward(g, x.data, weight.data, spec, need_x=x.requires_grad, cols=cols)
        return (gx, gw) if bias is None else (gx, gw, gb)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return make_result("conv", out, inputs, back)


def max_pool(x: Tensor, kernel, stride=None, padding=0) -> Tensor:
    out, saved = _conv.pool_forward(x.data, kernel, kernel if stride is None else stride, padding, "max")
    return make_result("max_pool", out, (x,), lambda g: (_conv.pool_backward(g, saved, "max"),))


def avg_pool(x: Tensor, kernel, stride=None, padding=0) -> Tensor:
    out, saved = _conv.pool_forward(x.data, kernel, kernel if stride is None else stride, padding, "avg")
    return make_result("avg_pool", out, (x,), lambda g: (_conv.pool_backward(g, saved, "avg"),))


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over every spatial axis: ``[N, C, *spatial] -> [N, C]``."""
    if x.ndim < 3:
        raise ShapeError(f"global_avg_pool needs [N, C, *spatial], got {x.shape}")
    spatial = x.shape[2:]
    count = int(np.prod(spatial))
    out = x.data.reshape(x.shape[:2] + (-1,)).sum(axis=-1, dtype=np.float64) / count

    def back(g):
        return (np.broadcast_to((g / count).reshape(g.shape + (1,) * len(spatial)), x.shape),)

    return make_result("global_avg_pool", out, (x,), back)


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
              running_var: np.ndarray, training: bool, momentum: float = 0.1,
              eps: float = 1e-5) -> Tensor:
    """Per-channel normalization over every axis except axis 1.

    In training mode batch statistics are used and the running buffers are
    updated in place (unbiased variance, ``momentum`` weight on the new
    value).  In eval mode the op is the fixed affine map given by the
    running buffers, which are left untouched.
    """
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm: {c} channels but gamma {gamma.shape}, beta {beta.shape}")
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, c) + (1,) * (x.ndim - 2)
    x64 = x.data.astype(np.float64)
    g64 = gamma.data.astype(np.float64).reshape(bshape)

    if training:
        n = x.size // c
        mu = x64.mean(axis=axes)
        var = x64.var(axis=axes)
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (x64 - mu.reshape(bshape)) * inv_std.reshape(bshape)
        out = xhat * g64 + beta.data.astype(np.float64).reshape(bshape)
        unbiased = var * n / (n - 1) if n > 1 else var
        running_mean[...] = (1.0 - momentum) * running_mean + momentum * mu
        running_var[...] = (1.0 - momentum) * running_var + momentum * unbiased

        def back(g):
            gbeta = g.sum(axis=axes)
            ggamma = (g * xhat).sum(axis=axes)
            gx = None
            if x.requires_grad:
                dxhat = g * g64
                gx = (inv_std.reshape(bshape) / n) * (
                    n * dxhat - dxhat.sum(axis=axes).reshape(bshape)
                    - xhat * (dxhat * xhat).sum(axis=axes).reshape(bshape))
            return gx, ggamma, gbeta
    else:
        inv_std = 1.0 / np.sqrt(running_var.astype(np.float64) + eps)
        xhat = (x64 - running_mean.astype(np.float64).reshape(bshape)) * inv_std.reshape(bshape)
        out = xhat * g64 + beta.data.astype(np.float64).reshape(bshape)

        def back(g):
            return g * g64 * inv_std.reshape(bshape), (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return make_result("batchnorm", out, (x, gamma, beta), back)


def bce_loss(prob: Tensor, label, weight=None) -> Tensor:
    """Mean binary cross-entropy of probabilities against 0/1 labels.

    Probabilities are clamped to ``[1e-7, 1 - 1e-7]``; the gradient is taken
    at the clamped value.  ``weight`` optionally scales each sample's term.
    """
    y = np.asarray(label.data if isinstance(label, Tensor) else label, dtype=np.float64)
    if y.shape != prob.shape:
        raise ShapeError(f"bce_loss: labels {y.shape} vs probabilities {prob.shape}")
    w = np.ones_like(y) if weight is None else np.broadcast_to(np.asarray(weight, dtype=np.float64), y.shape)
    p = np.clip(prob.data.astype(np.float64), BCE_EPS, 1.0 - BCE_EPS)
    n = max(y.size, 1)
    terms = -w * (y * np.log(p) + (1.0 - y) * np.log1p(-p))
    out = terms.sum() / n

    def back(g):
        return (g * w * (p - y) / (p * (1.0 - p)) / n,)

    return make_result("bce_loss", np.asarray(out), (prob,), back)
