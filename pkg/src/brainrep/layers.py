"""Differentiable layer primitives: convolution, deconvolution, 2x2
max-pooling, 2x2 unpooling, ReLU and tanh.

Each primitive is a forward/backward function pair; the backward pass is
the exact gradient (adjoint) of the forward map and is checked against
central finite differences by the test suite. Spatial tensors are
``[C, H, W]`` with an optional leading batch axis ``[B, C, H, W]``; all
convolutions use stride 1 and zero-fill "same" padding, so spatial size
is preserved. Pooling halves each spatial extent, unpooling doubles them
by duplicating every value into its 2x2 block.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .tensor import DTYPE, Rng


def _as_batched(x, name: str = "input") -> tuple[np.ndarray, bool]:
    """Normalize to [B, C, H, W]; second value tells whether the caller
    passed a batch axis."""
    x = np.asarray(x, dtype=DTYPE)
    if x.ndim == 3:
        return x[None], False
    if x.ndim == 4:
        return x, True
    raise ShapeError(f"{name} must be [C,H,W] or [B,C,H,W], got shape {x.shape}")


def glorot_uniform(rng: Rng, shape: tuple[int, int, int, int]) -> np.ndarray:
    """Uniform init in [-s, s] with s = sqrt(6 / (fan_in + fan_out))."""
    out_ch, in_ch, k, _ = shape
    fan_in = in_ch * k * k
    fan_out = out_ch * k * k
    s = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-s, s, size=shape)


class ConvLayer:
    """2-D convolution with a square odd kernel, stride 1, same padding.

    ``weights`` has shape [out_channels, in_channels, k, k]; output pixel
    (f, y, x) is ``bias[f]`` plus the weighted sum over the zero-padded
    k x k input window whose top-left corner sits at (y, x) in the padded
    input, which keeps the spatial size unchanged.
    """

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3,
                 rng: Rng | None = None) -> None:
        if kernel_size < 1 or kernel_size % 2 == 0:
            raise ShapeError(f"kernel size must be odd and >= 1, got {kernel_size}")
        if in_channels < 1 or out_channels < 1:
            raise ShapeError("channel counts must be >= 1")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = 1
        shape = (out_channels, in_channels, kernel_size, kernel_size)
        if rng is None:
            self.weights = np.zeros(shape, dtype=DTYPE)
        else:
            self.weights = glorot_uniform(rng, shape)
        self.bias = np.zeros(out_channels, dtype=DTYPE)

    @property
    def padding(self) -> int:
        return (self.kernel_size - 1) // 2

    def __repr__(self) -> str:
        return (f"ConvLayer({self.in_channels}->{self.out_channels}, "
                f"k={self.kernel_size})")


class DeconvLayer:
    """Deconvolution layer: same stride-1 same-padding convolution map.

    In ``learned`` mode the layer owns its weights. In ``tied`` mode the
    effective weights are derived from a source ConvLayer at every use:
    channel axes transposed and the kernel flipped in both spatial
    directions, i.e. ``W_eff[o, i, dy, dx] = W_src[i, o, k-1-dy, k-1-dx]``.
    The bias is always owned by the deconv layer itself.
    """

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3,
                 rng: Rng | None = None, mode: str = "learned",
                 source: ConvLayer | None = None) -> None:
        if mode not in ("learned", "tied"):
            raise ValueError(f"mode must be 'learned' or 'tied', got {mode!r}")
        if kernel_size < 1 or kernel_size % 2 == 0:
            raise ShapeError(f"kernel size must be odd and >= 1, got {kernel_size}")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = 1
        self.mode = mode
        self.source = source
        if mode == "tied":
            if source is None:
                raise ValueError("tied mode requires a source ConvLayer")
            if (source.out_channels != in_channels
                    or source.in_channels != out_channels
                    or source.kernel_size != kernel_size):
                raise ShapeError(
                    f"tied source {source!r} does not transpose to "
                    f"{in_channels}->{out_channels} k={kernel_size}")
            self._weights = None
        else:
            shape = (out_channels, in_channels, kernel_size, kernel_size)
            self._weights = (np.zeros(shape, dtype=DTYPE) if rng is None
                             else glorot_uniform(rng, shape))
        self.bias = np.zeros(out_channels, dtype=DTYPE)

    @property
    def padding(self) -> int:
        return (self.kernel_size - 1) // 2

    @property
    def weights(self) -> np.ndarray:
        """Effective weights; a derived array in tied mode."""
        if self.mode == "learned":
            return self._weights
        return np.ascontiguousarray(
            self.source.weights.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1])

    @weights.setter
    def weights(self, value: np.ndarray) -> None:
        if self.mode == "tied":
            raise ValueError("tied deconv weights are derived; update the source layer")
        self._weights = value

    def __repr__(self) -> str:
        return (f"DeconvLayer({self.in_channels}->{self.out_channels}, "
                f"k={self.kernel_size}, mode={self.mode})")


class MaxPool2x2:
    """Marker layer: 2x2 max-pooling."""

    def __repr__(self) -> str:
        return "MaxPool2x2()"


class Unpool2x2:
    """Marker layer: 2x2 unpooling by duplication."""

    def __repr__(self) -> str:
        return "Unpool2x2()"


class Relu:
    """Marker layer: elementwise max(0, x)."""

    def __repr__(self) -> str:
        return "Relu()"


class Tanh:
    """Marker layer: elementwise tanh(x)."""

    def __repr__(self) -> str:
        return "Tanh()"


@dataclass
class ConvCache:
    padded: np.ndarray   # [B, C, H+2p, W+2p] input as seen by the kernel
    batched: bool        # whether the forward input carried a batch axis


@dataclass
class PoolSwitches:
    """Argmax offsets of each 2x2 block, recorded by the pooling forward
    pass; ties break to the first maximum in row-major block order."""
    rows: np.ndarray     # [B, C, h, w] uint8 in {0, 1}
    cols: np.ndarray     # [B, C, h, w] uint8 in {0, 1}
    batched: bool


@dataclass
class ActCache:
    value: np.ndarray    # relu: bool mask of x > 0; tanh: forward output
    batched: bool


def _conv2d(weights: np.ndarray, bias: np.ndarray, xb: np.ndarray):
    _, _, k, _ = weights.shape
    B, _, H, W = xb.shape
    p = (k - 1) // 2
    xp = np.pad(xb, ((0, 0), (0, 0), (p, p), (p, p)))
    acc = np.zeros((weights.shape[0], B, H, W), dtype=DTYPE)
    for dy in range(k):
        for dx in range(k):
            acc += np.tensordot(weights[:, :, dy, dx],
                                xp[:, :, dy:dy + H, dx:dx + W], axes=(1, 1))
    y = np.ascontiguousarray(acc.transpose(1, 0, 2, 3))
    y += bias[None, :, None, None]
    return y, xp


def _conv2d_backward(weights: np.ndarray, xp: np.ndarray, gy: np.ndarray):
    _, _, k, _ = weights.shape
    H, W = gy.shape[2], gy.shape[3]
    p = (k - 1) // 2
    gb = gy.sum(axis=(0, 2, 3))
    gw = np.empty_like(weights)
    gp = np.zeros_like(xp)
    gp_cfirst = gp.transpose(1, 0, 2, 3)  # view, written in place
    for dy in range(k):
        for dx in range(k):
            xs = xp[:, :, dy:dy + H, dx:dx + W]
            gw[:, :, dy, dx] = np.tensordot(gy, xs, axes=([0, 2, 3], [0, 2, 3]))
            gp_cfirst[:, :, dy:dy + H, dx:dx + W] += np.tensordot(
                weights[:, :, dy, dx], gy, axes=(0, 1))
    gx = np.ascontiguousarray(gp[:, :, p:p + H, p:p + W])
    return gx, gw, gb


def _check_channels(layer, xb: np.ndarray) -> None:
    if xb.shape[1] != layer.in_channels:
        raise ShapeError(
            f"{layer!r} expects {layer.in_channels} input channels, "
            f"got {xb.shape[1]}")


def conv_forward(layer: ConvLayer, x) -> tuple[np.ndarray, ConvCache]:
    xb, batched = _as_batched(x)
    _check_channels(layer, xb)
    y, xp = _conv2d(layer.weights, layer.bias, xb)
    return (y if batched else y[0]), ConvCache(padded=xp, batched=batched)


def conv_backward(layer: ConvLayer, cache: ConvCache | None, grad_output):
    """Gradients of the conv forward map: (grad_input, grad_weights, grad_bias)."""
    if cache is None:
        raise ValueError("conv_backward requires the cache from conv_forward")
    gyb, _ = _as_batched(grad_output, "grad_output")
    p = layer.padding
    expect = (cache.padded.shape[0], layer.out_channels,
              cache.padded.shape[2] - 2 * p, cache.padded.shape[3] - 2 * p)
    if gyb.shape != expect:
        raise ShapeError(f"grad_output shape {gyb.shape} does not match "
                         f"forward output {expect}")
    gx, gw, gb = _conv2d_backward(layer.weights, cache.padded, gyb)
    return (gx if cache.batched else gx[0]), gw, gb


def deconv_forward(layer: DeconvLayer, x) -> tuple[np.ndarray, ConvCache]:
    xb, batched = _as_batched(x)
    _check_channels(layer, xb)
    y, xp = _conv2d(layer.weights, layer.bias, xb)
    return (y if batched else y[0]), ConvCache(padded=xp, batched=batched)


def deconv_backward(layer: DeconvLayer, cache: ConvCache | None, grad_output):
    """Gradients of the deconv forward map.

    In learned mode ``grad_weights`` matches ``layer.weights``. In tied
    mode it is returned in the SOURCE layer's layout (the transpose/flip
    map applied in reverse) so the caller accumulates it onto
    ``layer.source.weights``.
    """
    if cache is None:
        raise ValueError("deconv_backward requires the cache from deconv_forward")
    gyb, _ = _as_batched(grad_output, "grad_output")
    p = layer.padding
    expect = (cache.padded.shape[0], layer.out_channels,
              cache.padded.shape[2] - 2 * p, cache.padded.shape[3] - 2 * p)
    if gyb.shape != expect:
        raise ShapeError(f"grad_output shape {gyb.shape} does not match "
                         f"forward output {expect}")
    gx, gw, gb = _conv2d_backward(layer.weights, cache.padded, gyb)
    if layer.mode == "tied":
        gw = np.ascontiguousarray(gw.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1])
    return (gx if cache.batched else gx[0]), gw, gb


def maxpool2x2_forward(x) -> tuple[np.ndarray, PoolSwitches]:
    xb, batched = _as_batched(x)
    B, C, H, W = xb.shape
    if H % 2 or W % 2:
        raise ShapeError(f"2x2 pooling needs even spatial extents, got {H}x{W}")
    blocks = (xb.reshape(B, C, H // 2, 2, W // 2, 2)
              .transpose(0, 1, 2, 4, 3, 5)
              .reshape(B, C, H // 2, W // 2, 4))
    # argmax returns the first maximum, i.e. row-major within the block
    flat = blocks.argmax(axis=-1)
    out = np.ascontiguousarray(blocks.max(axis=-1))
    switches = PoolSwitches(rows=(flat >> 1).astype(np.uint8),
                            cols=(flat & 1).astype(np.uint8),
                            batched=batched)
    return (out if batched else out[0]), switches


def maxpool2x2_backward(switches: PoolSwitches, grad_output) -> np.ndarray:
    gyb, _ = _as_batched(grad_output, "grad_output")
    if gyb.shape != switches.rows.shape:
        raise ShapeError(f"grad_output shape {gyb.shape} does not match "
                         f"pool output {switches.rows.shape}")
    B, C, h, w = gyb.shape
    gx = np.zeros((B, C, 2 * h, 2 * w), dtype=DTYPE)
    b_idx = np.arange(B)[:, None, None, None]
    c_idx = np.arange(C)[None, :, None, None]
    i_idx = 2 * np.arange(h)[None, None, :, None] + switches.rows
    j_idx = 2 * np.arange(w)[None, None, None, :] + switches.cols
    gx[b_idx, c_idx, i_idx, j_idx] = gyb
    return gx if switches.batched else gx[0]


def unpool2x2_forward(x) -> np.ndarray:
    """Duplicate every value into its 2x2 output block (no switches)."""
    xb, batched = _as_batched(x)
    y = xb.repeat(2, axis=-2).repeat(2, axis=-1)
    return y if batched else y[0]


def unpool2x2_backward(grad_output) -> np.ndarray:
    """Adjoint of duplication: sum each 2x2 block of the incoming gradient."""
    gyb, batched = _as_batched(grad_output, "grad_output")
    B, C, H, W = gyb.shape
    if H % 2 or W % 2:
        raise ShapeError(f"unpool backward needs even spatial extents, got {H}x{W}")
    gx = gyb.reshape(B, C, H // 2, 2, W // 2, 2).sum(axis=(3, 5))
    return gx if batched else gx[0]


def relu_forward(x) -> tuple[np.ndarray, ActCache]:
    xb, batched = _as_batched(x)
    return (np.maximum(xb, 0.0) if batched else np.maximum(xb[0], 0.0),
            ActCache(value=xb > 0, batched=batched))


def relu_backward(cache: ActCache, grad_output) -> np.ndarray:
    """Derivative is 1 where x > 0, else 0 (including exactly at 0)."""
    gyb, _ = _as_batched(grad_output, "grad_output")
    if gyb.shape != cache.value.shape:
        raise ShapeError(f"grad_output shape {gyb.shape} does not match "
                         f"forward input {cache.value.shape}")
    gx = gyb * cache.value
    return gx if cache.batched else gx[0]


def tanh_forward(x) -> tuple[np.ndarray, ActCache]:
    xb, batched = _as_batched(x)
    y = np.tanh(xb)
    return (y if batched else y[0]), ActCache(value=y, batched=batched)


def tanh_backward(cache: ActCache, grad_output) -> np.ndarray:
    gyb, _ = _as_batched(grad_output, "grad_output")
    if gyb.shape != cache.value.shape:
        raise ShapeError(f"grad_output shape {gyb.shape} does not match "
                         f"forward input {cache.value.shape}")
    gx = gyb * (1.0 - cache.value * cache.value)
    return gx if cache.batched else gx[0]
