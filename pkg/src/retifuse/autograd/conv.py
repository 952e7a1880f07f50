"""Window-based kernels for N-d convolution and pooling (2-D and 3-D).

Convolution is cross-correlation (no kernel flip), the usual deep-learning
convention.  Products are accumulated in float64 and cast back on output.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError


def output_extent(size: int, kernel: int, stride: int, padding: int) -> int:
    """``floor((size + 2*padding - kernel) / stride) + 1``; raises if < 1."""
    if stride < 1 or padding < 0 or kernel < 1:
        raise ShapeError(f"bad window (kernel={kernel}, stride={stride}, padding={padding})")
    span = size + 2 * padding - kernel
    if span < 0:
        raise ShapeError(f"window {kernel} with padding {padding} does not fit extent {size}")
    return span // stride + 1


def _tuple(v, rank: int, what: str) -> tuple[int, ...]:
    if isinstance(v, int):
        return (v,) * rank
    v = tuple(int(x) for x in v)
    if len(v) != rank:
        raise ShapeError(f"{what} {v} does not match spatial rank {rank}")
    return v


@dataclass(frozen=True)
class ConvSpec:
    kernel: tuple[int, ...]
    stride: tuple[int, ...]
    padding: tuple[int, ...]
    in_channels: int
    out_channels: int

    def __post_init__(self):
        rank = len(self.kernel)
        if len(self.stride) != rank or len(self.padding) != rank:
            raise ShapeError("kernel, stride and padding must share the spatial rank")
        if any(s < 1 for s in self.stride) or any(p < 0 for p in self.padding):
            raise ShapeError(f"stride must be >= 1 and padding >= 0: {self}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ShapeError("channel counts must be >= 1")

    @classmethod
    def make(cls, rank: int, in_channels: int, out_channels: int, kernel=3, stride=1, padding=0) -> "ConvSpec":
        return cls(_tuple(kernel, rank, "kernel"), _tuple(stride, rank, "stride"),
                   _tuple(padding, rank, "padding"), int(in_channels), int(out_channels))

    @property
    def rank(self) -> int:
        return len(self.kernel)

    def output_shape(self, spatial: Sequence[int]) -> tuple[int, ...]:
        if len(spatial) != self.rank:
            raise ShapeError(f"input spatial rank {len(spatial)} != conv rank {self.rank}")
        return tuple(output_extent(n, k, s, p) for n, k, s, p in
                     zip(spatial, self.kernel, self.stride, self.padding))


def _pad(x: np.ndarray, padding: Sequence[int], value: float = 0.0) -> np.ndarray:
    if not any(padding):
        return x
    widths = [(0, 0), (0, 0)] + [(p, p) for p in padding]
    return np.pad(x, widths, mode="constant", constant_values=value)


def windows(xp: np.ndarray, kernel: Sequence[int], stride: Sequence[int]) -> np.ndarray:
    """Strided view ``[N, C, *out, *kernel]`` over an already padded input."""
    rank = len(kernel)
    axes = tuple(range(2, 2 + rank))
    v = sliding_window_view(xp, tuple(kernel), axis=axes)
    return v[(slice(None), slice(None)) + tuple(slice(None, None, s) for s in stride)]


def _scatter_windows(dcols: np.ndarray, padded_shape, kernel, stride, out_shape) -> np.ndarray:
    """Adjoint of :func:`windows`: sum ``[N, C, *out, *kernel]`` back onto the padded grid."""
    gx = np.zeros(padded_shape, dtype=np.float64)
    for offset in np.ndindex(*kernel):
        target = (slice(None), slice(None)) + tuple(
            slice(o, o + s * (n - 1) + 1, s) for o, s, n in zip(offset, stride, out_shape))
        gx[target] += dcols[(Ellipsis,) + offset]
    return gx


def _crop(gxp: np.ndarray, padding: Sequence[int]) -> np.ndarray:
    if not any(padding):
        return gxp
    return gxp[(slice(None), slice(None)) + tuple(slice(p, gxp.shape[2 + i] - p) for i, p in enumerate(padding))]


def _offset_slices(kernel, stride, out_shape):
    for offset in np.ndindex(*kernel):
        yield tuple(slice(o, o + s * (n - 1) + 1, s) for o, s, n in zip(offset, stride, out_shape))


def _im2col(x: np.ndarray, spec: ConvSpec, out_shape) -> np.ndarray:
    """Patch matrix ``[N, prod(out), prod(kernel) * C]`` in float64.

    Built from a channels-last copy of the padded input so every copied run
    is a contiguous block of channels.
    """
    n, c = x.shape[:2]
    xcl = np.moveaxis(_pad(x, spec.padding), 1, -1)
    cols = np.empty((n,) + tuple(out_shape) + (int(np.prod(spec.kernel)), c), dtype=np.float64)
    for j, sl in enumerate(_offset_slices(spec.kernel, spec.stride, out_shape)):
        cols[..., j, :] = xcl[(slice(None),) + sl]
    return cols.reshape(n, int(np.prod(out_shape)), -1)


def _wmat(w: np.ndarray) -> np.ndarray:
    """``[Cout, C, *kernel]`` -> ``[prod(kernel) * C, Cout]`` matching :func:`_im2col`."""
    rank = w.ndim - 2
    order = (0,) + tuple(range(2, 2 + rank)) + (1,)
    return w.transpose(order).reshape(w.shape[0], -1).astype(np.float64).T


def conv_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray | None, spec: ConvSpec,
                 cols: np.ndarray | None = None):
    """Returns ``(output, cols)``; pass ``cols`` back to :func:`conv_backward` to skip rebuilding it."""
    out_shape = spec.output_shape(x.shape[2:])
    if cols is None:
        cols = _im2col(x, spec, out_shape)
    wmat = _wmat(w)
    n = x.shape[0]
    out = np.empty((n, cols.shape[1], spec.out_channels), dtype=np.float64)
    # one sample at a time so a sample's output never depends on batch size
    for i in range(n):
        np.matmul(cols[i], wmat, out=out[i])
    if b is not None:
        out += b.astype(np.float64)
    return np.moveaxis(out, 2, 1).reshape((n, spec.out_channels) + out_shape), cols


def conv_backward(g: np.ndarray, x: np.ndarray, w: np.ndarray, spec: ConvSpec, need_x: bool = True,
                  cols: np.ndarray | None = None):
    n, c = x.shape[:2]
    out_shape = g.shape[2:]
    if cols is None:
        cols = _im2col(x, spec, out_shape)
    gmat = np.moveaxis(g.reshape(n, spec.out_channels, -1), 1, 2).astype(np.float64)  # [N, O, Cout]
    gwmat = gmat.reshape(-1, spec.out_channels).T @ cols.reshape(-1, cols.shape[-1])  # [Cout, K*C]
    gw = np.moveaxis(gwmat.reshape((spec.out_channels,) + spec.kernel + (c,)), -1, 1)
    gb = gmat.sum(axis=(0, 1))
    gx = None
    if need_x:
        dcols = (gmat @ _wmat(w).T).reshape((n,) + tuple(out_shape) + (-1, c))
        padded = tuple(e + 2 * p for e, p in zip(x.shape[2:], spec.padding))
        gxcl = np.zeros((n,) + padded + (c,), dtype=np.float64)
        for j, sl in enumerate(_offset_slices(spec.kernel, spec.stride, out_shape)):
            gxcl[(slice(None),) + sl] += dcols[..., j, :]
        gx = _crop(np.moveaxis(gxcl, -1, 1), spec.padding)
    return gx, np.ascontiguousarray(gw), gb


def pool_forward(x: np.ndarray, kernel, stride, padding, mode: str):
    rank = x.ndim - 2
    kernel, stride, padding = (_tuple(kernel, rank, "kernel"), _tuple(stride, rank, "stride"),
                               _tuple(padding, rank, "padding"))
    out_shape = tuple(output_extent(n, k, s, p) for n, k, s, p in zip(x.shape[2:], kernel, stride, padding))
    fill = -np.inf if mode == "max" else 0.0
    xp = _pad(x.astype(np.float64), padding, fill)
    v = windows(xp, kernel, stride)
    flat = v.reshape(v.shape[:2 + rank] + (-1,))
    if mode == "max":
        arg = flat.argmax(axis=-1)  # first maximum wins ties
        out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
        # a window lying entirely in padding yields 0; its gradient lands in the cropped border
        out[np.isneginf(out)] = 0.0
        return out, (arg, xp.shape, kernel, stride, padding, out_shape)
    if mode == "avg":
        # zero padding counts toward the divisor
        out = flat.sum(axis=-1) / flat.shape[-1]
        return out, (None, xp.shape, kernel, stride, padding, out_shape)
    raise ValueError(f"unknown pool mode {mode!r}")


def pool_backward(g: np.ndarray, saved, mode: str) -> np.ndarray:
    arg, padded_shape, kernel, stride, padding, out_shape = saved
    ksize = int(np.prod(kernel))
    g64 = g.astype(np.float64)
    if mode == "max":
        onehot = np.zeros(g.shape + (ksize,), dtype=np.float64)
        np.put_along_axis(onehot, arg[..., None], g64[..., None], axis=-1)
        dcols = onehot.reshape(g.shape + tuple(kernel))
    else:
        dcols = np.broadcast_to((g64 / ksize)[(Ellipsis,) + (None,) * len(kernel)], g.shape + tuple(kernel))
    return _crop(_scatter_windows(dcols, padded_shape, kernel, stride, out_shape), padding)
