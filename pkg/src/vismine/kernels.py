"""Dense tensor kernels: 2-D convolution, ReLU, max pooling with switches.

All maps are numpy arrays of shape (channels, height, width), stored as
float32.  Dot products accumulate in float64 with a fixed summation order
(input channel, then kernel row, then kernel column) so that results are
bit-identical to a naive scalar loop using the same order.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    """Raised when tensor shapes are incompatible with an operation."""


@dataclass(frozen=True)
class ConvKernel:
    """Convolution weights of shape (out, in, kh, kw) plus one bias per
    output channel, with stride and zero padding."""

    weights: np.ndarray
    biases: np.ndarray
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        w = np.ascontiguousarray(np.asarray(self.weights, dtype=np.float32))
        b = np.ascontiguousarray(np.asarray(self.biases, dtype=np.float32))
        if w.ndim != 4:
            raise ShapeError(f"kernel weights must be 4-D (out, in, kh, kw), got {w.shape}")
        if b.shape != (w.shape[0],):
            raise ShapeError(f"need one bias per output channel: {b.shape} vs {w.shape[0]} channels")
        if self.stride < 1:
            raise ShapeError(f"stride must be >= 1, got {self.stride}")
        if self.padding < 0:
            raise ShapeError(f"padding must be >= 0, got {self.padding}")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "biases", b)

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def kernel_h(self) -> int:
        return self.weights.shape[2]

    @property
    def kernel_w(self) -> int:
        return self.weights.shape[3]


@dataclass(frozen=True)
class PoolSwitches:
    """Argmax bookkeeping from max pooling: for every pooled cell the
    (row, col) input coordinates that attained the max."""

    coords: np.ndarray  # (channels, out_h, out_w, 2) int32
    window: int
    stride: int
    input_shape: tuple  # (channels, height, width)


def conv_output_shape(h: int, w: int, kh: int, kw: int, stride: int, padding: int):
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    return ho, wo


def check_finite(x: np.ndarray, what: str = "tensor"):
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{what} contains non-finite samples")


def conv2d_forward(x: np.ndarray, kernel: ConvKernel) -> np.ndarray:
    """Direct convolution (cross-correlation, zero padded).

    out[o, y, x] = bias[o] + sum_{c,i,j} in[c, y*s - p + i, x*s - p + j] * w[o,c,i,j]
    with out-of-bounds taps reading 0.  Accumulation is float64, summed in
    (c, i, j) order; the result is cast back to float32.
    """
    x = np.asarray(x, dtype=np.float32)
    if x.ndim != 3:
        raise ShapeError(f"input must be 3-D (c, h, w), got {x.shape}")
    c, h, w = x.shape
    if c != kernel.in_channels:
        raise ShapeError(
            f"input has {c} channels but kernel expects {kernel.in_channels} "
            f"(input {x.shape}, kernel {kernel.weights.shape})"
        )
    kh, kw = kernel.kernel_h, kernel.kernel_w
    s, p = kernel.stride, kernel.padding
    ho, wo = conv_output_shape(h, w, kh, kw, s, p)
    if ho <= 0 or wo <= 0:
        raise ShapeError(
            f"non-positive output shape ({ho}, {wo}) for input {x.shape} and kernel {kernel.weights.shape} "
            f"with stride={s} padding={p}"
        )
    xp = np.zeros((c, h + 2 * p, w + 2 * p), dtype=np.float64)
    xp[:, p:p + h, p:p + w] = x
    w64 = kernel.weights.astype(np.float64)
    acc = np.broadcast_to(
        kernel.biases.astype(np.float64)[:, None, None], (kernel.out_channels, ho, wo)
    ).copy()
    for ci in range(c):
        plane = xp[ci]
        for i in range(kh):
            for j in range(kw):
                patch = plane[i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s]
                acc += patch[None, :, :] * w64[:, ci, i, j][:, None, None]
    return acc.astype(np.float32)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(np.asarray(x, dtype=np.float32), np.float32(0))


def maxpool2d(x: np.ndarray, window: int, stride: int):
    """Windowed max with recorded switches.

    Ties break to the first maximum in row-major scan order within the window.
    Returns (pooled, PoolSwitches).
    """
    x = np.asarray(x, dtype=np.float32)
    if x.ndim != 3:
        raise ShapeError(f"input must be 3-D (c, h, w), got {x.shape}")
    if window < 1:
        raise ShapeError(f"window must be >= 1, got {window}")
    if stride < 1:
        raise ShapeError(f"stride must be >= 1, got {stride}")
    c, h, w = x.shape
    if window > h or window > w:
        raise ShapeError(f"pooling window {window} larger than input {h}x{w}")
    ho = (h - window) // stride + 1
    wo = (w - window) // stride + 1
    out = np.empty((c, ho, wo), dtype=np.float32)
    coords = np.empty((c, ho, wo, 2), dtype=np.int32)
    if stride == window and h == ho * window and w == wo * window:
        # non-overlapping tiling: one reshape, same first-max tie rule
        blocks = (
            x.reshape(c, ho, window, wo, window)
            .transpose(0, 1, 3, 2, 4)
            .reshape(c, ho, wo, window * window)
        )
        flat = np.argmax(blocks, axis=-1)
        out[:] = np.take_along_axis(blocks, flat[..., None], axis=-1)[..., 0]
        ys = np.arange(ho)[None, :, None] * stride
        xs = np.arange(wo)[None, None, :] * stride
        coords[..., 0] = ys + flat // window
        coords[..., 1] = xs + flat % window
        return out, PoolSwitches(coords=coords, window=window, stride=stride, input_shape=(c, h, w))
    for ci in range(c):
        for yi in range(ho):
            ys = yi * stride
            for xi in range(wo):
                xs = xi * stride
                win = x[ci, ys:ys + window, xs:xs + window]
                flat = int(np.argmax(win))  # first max in row-major order
                out[ci, yi, xi] = win.flat[flat]
                coords[ci, yi, xi, 0] = ys + flat // window
                coords[ci, yi, xi, 1] = xs + flat % window
    return out, PoolSwitches(coords=coords, window=window, stride=stride, input_shape=(c, h, w))


def unpool2d(pooled: np.ndarray, switches: PoolSwitches) -> np.ndarray:
    """Scatter pooled values back to their switch positions; everywhere else 0.

    Cells claimed by several overlapping windows accumulate, which is the
    correct adjoint of maxpool2d for the deconvolution pass.
    """
    pooled = np.asarray(pooled, dtype=np.float32)
    c, ho, wo = pooled.shape
    if switches.coords.shape[:3] != (c, ho, wo):
        raise ShapeError(f"switches shape {switches.coords.shape[:3]} does not match pooled {pooled.shape}")
    out = np.zeros(switches.input_shape, dtype=np.float32)
    ch = np.repeat(np.arange(c), ho * wo)
    rows = switches.coords[..., 0].ravel()
    cols = switches.coords[..., 1].ravel()
    np.add.at(out, (ch, rows, cols), pooled.ravel())
    return out


def global_max_pool(x: np.ndarray):
    """Per-channel spatial max and its (row, col) argmax, first max wins."""
    x = np.asarray(x, dtype=np.float32)
    if x.ndim != 3:
        raise ShapeError(f"input must be 3-D (c, h, w), got {x.shape}")
    c, h, w = x.shape
    flat = x.reshape(c, h * w)
    idx = np.argmax(flat, axis=1)
    values = flat[np.arange(c), idx].astype(np.float32)
    argmax = np.stack([idx // w, idx % w], axis=1).astype(np.int32)
    return values, argmax
