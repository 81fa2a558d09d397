"""Dense array primitives: conv/pool geometry, 2-D convolution with exact
gradients, max-pooling with argmax bookkeeping, Gaussian blur, and the seeded
random source everything else derives from.

All arrays are numpy float64 in channel-first layout. Single-image functions
are the public contract; the *_batch variants (leading batch axis) are what
the trainer and the sliding-window scorer actually drive.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import GeometryError, ShapeMismatchError


def seeded_rng(seed: int) -> np.random.Generator:
    """Deterministic random source. Same seed, same stream, any platform.

    One instance is single-owner: parallel code derives per-worker streams
    with seed + worker_index instead of sharing.
    """
    return np.random.Generator(np.random.PCG64(int(seed)))


@dataclass(frozen=True)
class ConvGeometry:
    """Geometry of one convolution: output side = (M - F + 2P)/S + 1."""

    input_size: int
    filter_size: int
    pad: int
    stride: int
    input_depth: int
    filter_count: int

    def __post_init__(self):
        if self.filter_size < 1 or self.stride < 1 or self.pad < 0:
            raise GeometryError(
                f"conv geometry needs filter_size>=1, stride>=1, pad>=0; got "
                f"filter_size={self.filter_size}, stride={self.stride}, pad={self.pad}"
            )
        span = self.input_size - self.filter_size + 2 * self.pad
        if span < 0 or span % self.stride != 0:
            raise GeometryError(
                f"conv output size (input_size={self.input_size} - filter_size="
                f"{self.filter_size} + 2*pad={self.pad})/stride={self.stride} + 1 "
                f"is not a positive integer"
            )

    @property
    def output_size(self) -> int:
        return (self.input_size - self.filter_size + 2 * self.pad) // self.stride + 1


@dataclass(frozen=True)
class PoolGeometry:
    """Geometry of one max-pool: output side = (M - F)/S + 1. F > S overlaps."""

    input_size: int
    extent: int
    stride: int

    def __post_init__(self):
        if self.extent < 1 or self.stride < 1:
            raise GeometryError(
                f"pool geometry needs extent>=1, stride>=1; got "
                f"extent={self.extent}, stride={self.stride}"
            )
        span = self.input_size - self.extent
        if span < 0 or span % self.stride != 0:
            raise GeometryError(
                f"pool output size (input_size={self.input_size} - extent="
                f"{self.extent})/stride={self.stride} + 1 is not a positive integer"
            )

    @property
    def output_size(self) -> int:
        return (self.input_size - self.extent) // self.stride + 1

    @property
    def overlapping(self) -> bool:
        return self.extent > self.stride


def conv_output_size(g: ConvGeometry) -> int:
    return g.output_size


def pool_output_size(g: PoolGeometry) -> int:
    return g.output_size


def _as_f64(x) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(x, dtype=np.float64))


def _im2col_indices(h: int, w: int, f: int, stride: int):
    """Row/col gather indices for all f*f patches of an h*w plane."""
    oh = (h - f) // stride + 1
    ow = (w - f) // stride + 1
    r = stride * np.repeat(np.arange(oh), ow)
    c = stride * np.tile(np.arange(ow), oh)
    dr = np.repeat(np.arange(f), f)
    dc = np.tile(np.arange(f), f)
    rows = r[:, None] + dr[None, :]  # (oh*ow, f*f)
    cols = c[:, None] + dc[None, :]
    return rows, cols, oh, ow


def conv2d_forward_batch(x: np.ndarray, weights: np.ndarray, bias: np.ndarray,
                         stride: int = 1, pad: int = 0) -> np.ndarray:
    """Cross-correlation of (B, D, H, W) with (K, D, F, F) filters -> (B, K, OH, OW)."""
    x = _as_f64(x)
    weights = _as_f64(weights)
    bias = _as_f64(bias)
    if x.ndim != 4:
        raise ShapeMismatchError(f"conv input must be 4-D (B,D,H,W), got {x.shape}")
    b_, d, h, w = x.shape
    k, dw, f, f2 = weights.shape
    if f != f2:
        raise ShapeMismatchError(f"filters must be square, got {f}x{f2}")
    if dw != d:
        raise ShapeMismatchError(
            f"depth axis mismatch: input depth {d}, filter depth {dw}")
    if bias.shape != (k,):
        raise ShapeMismatchError(f"bias must have shape ({k},), got {bias.shape}")
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        h += 2 * pad
        w += 2 * pad
    if (h - f) % stride or (w - f) % stride or h < f or w < f:
        raise GeometryError(
            f"conv geometry invalid: padded side {h}, filter {f}, stride {stride}")
    rows, cols, oh, ow = _im2col_indices(h, w, f, stride)
    patches = x[:, :, rows, cols]                       # (B, D, oh*ow, f*f)
    patches = patches.transpose(0, 2, 1, 3).reshape(b_, oh * ow, d * f * f)
    wmat = weights.reshape(k, d * f * f)
    out = patches @ wmat.T + bias                       # (B, oh*ow, K)
    return np.ascontiguousarray(out.transpose(0, 2, 1).reshape(b_, k, oh, ow))


def conv2d_backward_batch(x: np.ndarray, weights: np.ndarray, upstream: np.ndarray,
                          stride: int = 1, pad: int = 0, need_input_grad: bool = True):
    """Exact gradients of conv2d_forward_batch.

    Returns (grad_input or None, grad_weights, grad_bias); gradients are sums
    over the batch (callers divide for batch means).
    """
    x = _as_f64(x)
    weights = _as_f64(weights)
    upstream = _as_f64(upstream)
    b_, d, h, w = x.shape
    k, _, f, _ = weights.shape
    hp, wp = h + 2 * pad, w + 2 * pad
    rows, cols, oh, ow = _im2col_indices(hp, wp, f, stride)
    if upstream.shape != (b_, k, oh, ow):
        raise ShapeMismatchError(
            f"upstream gradient shape {upstream.shape} != expected {(b_, k, oh, ow)}")
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    patches = xp[:, :, rows, cols].transpose(0, 2, 1, 3).reshape(b_, oh * ow, d * f * f)
    up = upstream.reshape(b_, k, oh * ow)

    grad_b = up.sum(axis=(0, 2))
    # (K, D*F*F) accumulated over batch and positions
    grad_w = np.einsum("bkp,bpq->kq", up, patches).reshape(weights.shape)

    grad_x = None
    if need_input_grad:
        wmat = weights.reshape(k, d * f * f)
        gcols = np.einsum("bkp,kq->bpq", up, wmat)      # (B, oh*ow, D*F*F)
        gcols = gcols.reshape(b_, oh * ow, d, f * f).transpose(0, 2, 1, 3)
        flat_idx = (rows * wp + cols).ravel()           # (oh*ow * f*f,)
        vals = gcols.reshape(b_ * d, -1)
        # scatter-add with duplicate indices; bincount keeps it deterministic
        offs = np.arange(b_ * d)[:, None] * (hp * wp)
        gp = np.bincount((offs + flat_idx[None, :]).ravel(),
                         weights=vals.ravel(),
                         minlength=b_ * d * hp * wp).reshape(b_, d, hp, wp)
        grad_x = gp[:, :, pad:hp - pad, pad:wp - pad] if pad else gp
    return grad_x, grad_w, grad_b


def conv2d_forward(x: np.ndarray, weights: np.ndarray, bias: np.ndarray,
                   g: ConvGeometry) -> np.ndarray:
    """Single-image convolution (D, M, M) -> (K, Mo, Mo) under geometry g."""
    x = _as_f64(x)
    if x.ndim != 3:
        raise ShapeMismatchError(f"conv input must be 3-D (D,M,M), got {x.shape}")
    if x.shape != (g.input_depth, g.input_size, g.input_size):
        raise ShapeMismatchError(
            f"input shape {x.shape} != geometry "
            f"({g.input_depth},{g.input_size},{g.input_size})")
    if np.shape(weights) != (g.filter_count, g.input_depth, g.filter_size, g.filter_size):
        raise ShapeMismatchError(
            f"weight shape {np.shape(weights)} != geometry "
            f"({g.filter_count},{g.input_depth},{g.filter_size},{g.filter_size})")
    return conv2d_forward_batch(x[None], weights, bias, g.stride, g.pad)[0]


def conv2d_backward(x: np.ndarray, weights: np.ndarray, g: ConvGeometry,
                    upstream: np.ndarray):
    """Gradients of conv2d_forward; returns (grad_input, grad_weights, grad_bias)."""
    gx, gw, gb = conv2d_backward_batch(_as_f64(x)[None], weights,
                                       _as_f64(upstream)[None], g.stride, g.pad)
    return gx[0], gw, gb


def maxpool_forward_batch(x: np.ndarray, extent: int, stride: int):
    """Max over each extent*extent window of (B, D, H, W).

    Returns (out, argmax) where argmax holds the flat H*W index of the winning
    input cell per output cell, first index in row-major order on ties.
    """
    x = _as_f64(x)
    b_, d, h, w = x.shape
    if (h - extent) % stride or (w - extent) % stride or h < extent or w < extent:
        raise GeometryError(
            f"pool geometry invalid: side {h}, extent {extent}, stride {stride}")
    oh = (h - extent) // stride + 1
    ow = (w - extent) // stride + 1
    # one slice per in-window offset, offsets enumerated row-major so that
    # argmax over axis 0 realizes the first-in-row-major tie rule
    slabs = np.empty((extent * extent, b_, d, oh, ow), dtype=np.float64)
    for i in range(extent):
        for j in range(extent):
            slabs[i * extent + j] = x[:, :, i:i + stride * oh:stride,
                                      j:j + stride * ow:stride]
    win = slabs.argmax(axis=0)
    out = np.take_along_axis(slabs, win[None], axis=0)[0]
    r0 = stride * np.arange(oh)[:, None]
    c0 = stride * np.arange(ow)[None, :]
    argmax = (r0 + win // extent) * w + (c0 + win % extent)
    return out, argmax


def maxpool_backward_batch(argmax: np.ndarray, upstream: np.ndarray,
                           input_h: int, input_w: int) -> np.ndarray:
    """Routes upstream gradients to their argmax cells, accumulating on overlap."""
    upstream = _as_f64(upstream)
    if argmax.shape != upstream.shape:
        raise ShapeMismatchError(
            f"argmax shape {argmax.shape} != upstream shape {upstream.shape}")
    if argmax.size and (argmax.min() < 0 or argmax.max() >= input_h * input_w):
        raise ShapeMismatchError("pool argmax index out of input range")
    b_, d = upstream.shape[:2]
    offs = (np.arange(b_ * d) * (input_h * input_w))[:, None]
    idx = argmax.reshape(b_ * d, -1) + offs
    grad = np.bincount(idx.ravel(), weights=upstream.reshape(b_ * d, -1).ravel(),
                       minlength=b_ * d * input_h * input_w)
    return grad.reshape(b_, d, input_h, input_w)


def maxpool_forward(x: np.ndarray, g: PoolGeometry):
    """Single-image max-pool (D, M, M) -> ((D, Mo, Mo), argmax)."""
    x = _as_f64(x)
    if x.ndim != 3 or x.shape[1] != g.input_size or x.shape[2] != g.input_size:
        raise ShapeMismatchError(
            f"pool input shape {x.shape} != geometry (D,{g.input_size},{g.input_size})")
    out, argmax = maxpool_forward_batch(x[None], g.extent, g.stride)
    return out[0], argmax[0]


def maxpool_backward(argmax: np.ndarray, upstream: np.ndarray,
                     g: PoolGeometry) -> np.ndarray:
    return maxpool_backward_batch(argmax[None], _as_f64(upstream)[None],
                                  g.input_size, g.input_size)[0]


def gaussian_kernel1d(sigma: float) -> np.ndarray:
    """Normalized 1-D Gaussian truncated at radius ceil(3*sigma)."""
    radius = math.ceil(3.0 * sigma)
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (xs / sigma) ** 2)
    return k / k.sum()


def reflect_index(idx: np.ndarray, n: int) -> np.ndarray:
    """Mirror out-of-range indices back into [0, n); border pixel not repeated."""
    if n == 1:
        return np.zeros_like(idx)
    period = 2 * (n - 1)
    j = np.abs(idx) % period
    return np.minimum(j, period - j)


def gaussian_blur_stack(stack: np.ndarray, sigma: float) -> np.ndarray:
    """Gaussian blur over the last two axes of an (..., M, M) stack; same
    kernel and border semantics as gaussian_blur, amortized over the stack."""
    stack = _as_f64(stack)
    if stack.ndim < 2:
        raise ShapeMismatchError(f"blur expects >= 2-D input, got {stack.shape}")
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return stack.copy()
    k = gaussian_kernel1d(sigma)
    radius = (len(k) - 1) // 2

    def convolve_axis(a: np.ndarray, axis: int) -> np.ndarray:
        n = a.shape[axis]
        src = reflect_index(np.arange(-radius, n + radius), n)
        padded = np.take(a, src, axis=axis)
        out = np.zeros_like(a)
        sl = [slice(None)] * a.ndim
        for t in range(2 * radius + 1):
            sl[axis] = slice(t, t + n)
            out += k[t] * padded[tuple(sl)]
        return out

    return convolve_axis(convolve_axis(stack, -2), -1)


def gaussian_blur(plane: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur of a 2-D plane with mirrored borders.

    sigma = 0 returns the input unchanged. Interior mass (further than the
    kernel radius from every border) is conserved; constants always are.
    """
    plane = _as_f64(plane)
    if plane.ndim != 2:
        raise ShapeMismatchError(f"blur expects a 2-D plane, got shape {plane.shape}")
    return gaussian_blur_stack(plane, sigma)
