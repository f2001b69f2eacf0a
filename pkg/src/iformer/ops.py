"""Inference primitives: convolution, batch norm, activations, softmax, pooling, linear."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from .errors import ShapeError
from .tensor import Tensor

__all__ = [
    "ConvParams",
    "BnParams",
    "conv2d",
    "conv_output_size",
    "batchnorm_infer",
    "gelu",
    "sigmoid",
    "silu",
    "softmax_lastdim",
    "global_avg_pool",
    "linear",
]

DEFAULT_BN_EPS = 1e-5


@dataclass(frozen=True)
class ConvParams:
    weight: Tensor  # [Cout, Cin/groups, Kh, Kw]
    bias: Optional[Tensor] = None
    stride: int = 1
    padding: int = 0
    groups: int = 1

    def __post_init__(self):
        if self.weight.rank != 4:
            raise ShapeError(f"conv weight must be rank 4, got {self.weight.shape}")
        if self.stride < 1 or self.padding < 0 or self.groups < 1:
            raise ShapeError(f"bad stride/padding/groups {self.stride}/{self.padding}/{self.groups}")
        if self.out_channels % self.groups:
            raise ShapeError(f"Cout={self.out_channels} not divisible by groups={self.groups}")
        if self.bias is not None and self.bias.shape != (self.out_channels,):
            raise ShapeError(f"bias shape {self.bias.shape} does not match Cout={self.out_channels}")

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1] * self.groups

    @property
    def kernel_size(self) -> int:
        return self.weight.shape[2]

    @property
    def depthwise(self) -> bool:
        return self.groups == self.in_channels == self.out_channels and self.groups > 1


@dataclass(frozen=True)
class BnParams:
    gamma: Tensor
    beta: Tensor
    running_mean: Tensor
    running_var: Tensor
    eps: float = DEFAULT_BN_EPS

    def __post_init__(self):
        shapes = {t.shape for t in (self.gamma, self.beta, self.running_mean, self.running_var)}
        if len(shapes) != 1 or len(next(iter(shapes))) != 1:
            raise ShapeError(f"BN vectors must share a single extent, got {sorted(shapes)}")

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    def violations(self) -> list:
        """Invariant breaches; empty when the statistics are usable."""
        out = []
        if not self.eps > 0:
            out.append(f"eps must be positive, got {self.eps}")
        if np.any(self.running_var.data < 0):
            out.append("running_var has negative entries")
        if not all(np.all(np.isfinite(t.data)) for t in (self.gamma, self.beta, self.running_mean, self.running_var)):
            out.append("non-finite BN statistics")
        return out

    def affine(self):
        """Per-channel (scale, shift) such that bn(x) = scale * x + shift, in float64."""
        scale = self.gamma.data.astype(np.float64) / np.sqrt(self.running_var.data.astype(np.float64) + self.eps)
        shift = self.beta.data.astype(np.float64) - self.running_mean.data.astype(np.float64) * scale
        return scale, shift


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def _conv_dense(x: np.ndarray, w: np.ndarray, stride: int, padding: int) -> np.ndarray:
    n, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    if kh == kw == 1 and padding == 0:
        xs = x[:, :, ::stride, ::stride]
        return np.einsum("oc,nchw->nohw", w[:, :, 0, 0], xs, optimize=True)
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    # [N, Cin, H', W', Kh, Kw]
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    return np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)


def _conv_depthwise(x: np.ndarray, w: np.ndarray, stride: int, padding: int, ho: int, wo: int) -> np.ndarray:
    n, c, _, _ = x.shape
    kh, kw = w.shape[2:]
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out = np.zeros((n, c, ho, wo), dtype=np.float32)
    for i in range(kh):
        for j in range(kw):
            patch = x[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride]
            out += patch * w[:, 0, i, j][None, :, None, None]
    return out


def conv2d(x: Tensor, p: ConvParams) -> Tensor:
    """Zero-padded grouped cross-correlation."""
    if x.rank != 4:
        raise ShapeError(f"conv2d expects NCHW input, got {x.shape}")
    n, cin, h, w = x.shape
    if cin != p.in_channels:
        raise ShapeError(f"input has {cin} channels, weight expects {p.in_channels}")
    k = p.weight.shape[2:]
    ho = conv_output_size(h, k[0], p.stride, p.padding)
    wo = conv_output_size(w, k[1], p.stride, p.padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"non-positive output extent {ho}x{wo} for input {h}x{w}")
    xd, wd = x.data, p.weight.data
    if p.depthwise:
        out = _conv_depthwise(xd, wd, p.stride, p.padding, ho, wo)
    elif p.groups == 1:
        out = _conv_dense(xd, wd, p.stride, p.padding)
    else:
        gi, go = cin // p.groups, p.out_channels // p.groups
        out = np.concatenate(
            [_conv_dense(xd[:, g * gi:(g + 1) * gi], wd[g * go:(g + 1) * go], p.stride, p.padding)
             for g in range(p.groups)],
            axis=1,
        )
    if p.bias is not None:
        out = out + p.bias.data[None, :, None, None]
    return Tensor._wrap(np.ascontiguousarray(out, dtype=np.float32))


def batchnorm_infer(x: Tensor, p: BnParams) -> Tensor:
    if x.rank < 2 or x.shape[1] != p.channels:
        raise ShapeError(f"BN over {p.channels} channels cannot apply to {x.shape}")
    bshape = (1, -1) + (1,) * (x.rank - 2)
    inv = (1.0 / np.sqrt(p.running_var.data + np.float32(p.eps))).astype(np.float32)
    out = (x.data - p.running_mean.data.reshape(bshape)) * (p.gamma.data * inv).reshape(bshape)
    out = out + p.beta.data.reshape(bshape)
    return Tensor._wrap(out.astype(np.float32, copy=False))


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x)."""
    d = x.data
    return Tensor._wrap((0.5 * d * (1.0 + erf(d / np.float32(np.sqrt(2.0))))).astype(np.float32, copy=False))


# Keeps sigmoid strictly inside (0, 1) after float32 rounding; the lower
# bound is high enough that a product of two sigmoids is still a normal float.
SIGMOID_LO = np.float32(2.0 ** -62)
SIGMOID_HI = np.float32(1.0 - 2.0 ** -24)


def _sigmoid(d: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    out[~pos] = e / (1.0 + e)
    return np.clip(out, SIGMOID_LO, SIGMOID_HI, out=out)


def sigmoid(x: Tensor) -> Tensor:
    return Tensor._wrap(_sigmoid(x.data))


def silu(x: Tensor) -> Tensor:
    return Tensor._wrap(x.data * _sigmoid(x.data))


def softmax_lastdim(x: Tensor) -> Tensor:
    d = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(d)
    return Tensor._wrap(e / e.sum(axis=-1, keepdims=True))


def global_avg_pool(x: Tensor) -> Tensor:
    if x.rank != 4:
        raise ShapeError(f"global_avg_pool expects NCHW, got {x.shape}")
    return Tensor._wrap(x.data.mean(axis=(2, 3), dtype=np.float64).astype(np.float32))


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    if x.rank != 2 or w.rank != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {w.shape}")
    out = x.data @ w.data.T
    if b is not None:
        if b.shape != (w.shape[0],):
            raise ShapeError(f"linear: bias {b.shape} incompatible with weight {w.shape}")
        out = out + b.data
    return Tensor._wrap(np.ascontiguousarray(out, dtype=np.float32))
