"""Attention mechanisms: single-head attention, modulation attention (SHMA),
the multi-head baseline, conditional positional encoding and windowing.

All attention ops take NCHW feature maps; tokens are the H*W spatial
positions. Window partitioning moves windows into the batch axis so the
same attention code runs globally or per window.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .errors import ShapeError
from .ops import BnParams, ConvParams, _sigmoid, batchnorm_infer, conv2d, sigmoid, softmax_lastdim
from .tensor import (
    Tensor,
    chunk_channels,
    concat_channels,
    elementwise,
    matmul,
    permute,
    record_layout_change,
    reshape,
)

__all__ = [
    "ShmaParams",
    "MhaParams",
    "CpeParams",
    "sha",
    "shma_forward",
    "mha_forward",
    "sha_attention_forward",
    "cpe",
    "window_partition",
    "window_reverse",
    "chunked_window_partition",
    "chunked_window_reverse",
    "head_cosine_similarity",
    "shma_backward",
]


def _project(x: Tensor, conv: ConvParams, bn: Optional[BnParams]) -> Tensor:
    y = conv2d(x, conv)
    return batchnorm_infer(y, bn) if bn is not None else y


def _to_tokens(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    return permute(reshape(x, (n, c, h * w)), (0, 2, 1))


def _from_tokens(t: Tensor, h: int, w: int) -> Tensor:
    n, l, c = t.shape
    return reshape(permute(t, (0, 2, 1)), (n, c, h, w))


@dataclass(frozen=True)
class ShmaParams:
    """Weights of one modulation-attention layer.

    q/k map C -> d (the head dimension), v/m/o keep C. Each projection is
    followed by its own inference BN; ``bn_*`` is None once folded.
    """

    q: ConvParams
    k: ConvParams
    v: ConvParams
    m: ConvParams
    o: ConvParams
    bn_q: Optional[BnParams] = None
    bn_k: Optional[BnParams] = None
    bn_v: Optional[BnParams] = None
    bn_m: Optional[BnParams] = None
    bn_o: Optional[BnParams] = None

    def __post_init__(self):
        c = self.channels
        if self.k.out_channels != self.head_dim:
            raise ShapeError(f"query/key widths differ: {self.head_dim} vs {self.k.out_channels}")
        for name in ("q", "k", "v", "m"):
            if getattr(self, name).in_channels != c:
                raise ShapeError(f"projection {name} reads {getattr(self, name).in_channels} channels, expected {c}")
        for name in ("v", "m", "o"):
            if getattr(self, name).out_channels != c:
                raise ShapeError(f"projection {name} must preserve {c} channels")
        if self.o.in_channels != c:
            raise ShapeError("output projection must read C channels")
        for name in ("q", "k", "v", "m", "o"):
            if getattr(self, name).kernel_size != 1:
                raise ShapeError(f"projection {name} must be 1x1")
            bn = getattr(self, f"bn_{name}")
            if bn is not None and bn.channels != getattr(self, name).out_channels:
                raise ShapeError(f"bn_{name} has {bn.channels} channels")

    @property
    def channels(self) -> int:
        return self.q.in_channels

    @property
    def head_dim(self) -> int:
        return self.q.out_channels

    @property
    def scale(self) -> float:
        return self.head_dim ** -0.5

    def arrays(self) -> dict:
        """Trainable tensors as float64 arrays keyed by name (BN running stats excluded)."""
        out = {}
        for name in ("q", "k", "v", "m", "o"):
            conv = getattr(self, name)
            out[f"{name}.weight"] = conv.weight.data.astype(np.float64)
            if conv.bias is not None:
                out[f"{name}.bias"] = conv.bias.data.astype(np.float64)
            bn = getattr(self, f"bn_{name}")
            if bn is not None:
                out[f"bn_{name}.gamma"] = bn.gamma.data.astype(np.float64)
                out[f"bn_{name}.beta"] = bn.beta.data.astype(np.float64)
        return out

    def with_arrays(self, arrays: dict) -> "ShmaParams":
        """Copy with the named trainable tensors replaced."""
        changes = {}
        for name in ("q", "k", "v", "m", "o"):
            conv = getattr(self, name)
            w = arrays.get(f"{name}.weight")
            b = arrays.get(f"{name}.bias")
            if w is not None or b is not None:
                changes[name] = replace(
                    conv,
                    weight=Tensor(w) if w is not None else conv.weight,
                    bias=Tensor(b) if b is not None else conv.bias,
                )
            bn = getattr(self, f"bn_{name}")
            g = arrays.get(f"bn_{name}.gamma")
            be = arrays.get(f"bn_{name}.beta")
            if bn is not None and (g is not None or be is not None):
                changes[f"bn_{name}"] = replace(
                    bn,
                    gamma=Tensor(g) if g is not None else bn.gamma,
                    beta=Tensor(be) if be is not None else bn.beta,
                )
        return replace(self, **changes)

    def batchnorms(self):
        return [getattr(self, f"bn_{n}") for n in ("q", "k", "v", "m", "o") if getattr(self, f"bn_{n}") is not None]


@dataclass(frozen=True)
class MhaParams:
    """Standard attention: q/k/v/o all C -> C, split into ``num_heads`` heads."""

    q: ConvParams
    k: ConvParams
    v: ConvParams
    o: ConvParams
    num_heads: int = 1
    bn_q: Optional[BnParams] = None
    bn_k: Optional[BnParams] = None
    bn_v: Optional[BnParams] = None
    bn_o: Optional[BnParams] = None

    def __post_init__(self):
        c = self.channels
        for name in ("q", "k", "v", "o"):
            conv = getattr(self, name)
            if conv.in_channels != c or conv.out_channels != c or conv.kernel_size != 1:
                raise ShapeError(f"projection {name} must be a 1x1 {c}->{c} conv")
        if self.num_heads < 1 or c % self.num_heads:
            raise ShapeError(f"{c} channels cannot be split into {self.num_heads} heads")

    @property
    def channels(self) -> int:
        return self.q.in_channels

    @property
    def head_dim(self) -> int:
        return self.channels // self.num_heads

    def batchnorms(self):
        return [getattr(self, f"bn_{n}") for n in ("q", "k", "v", "o") if getattr(self, f"bn_{n}") is not None]


@dataclass(frozen=True)
class CpeParams:
    conv: ConvParams  # depthwise 3x3, stride 1, pad 1, with bias

    def __post_init__(self):
        if not (self.conv.groups == self.conv.in_channels == self.conv.out_channels):
            raise ShapeError("CPE convolution must be depthwise")


def sha(q: Tensor, k: Tensor, v: Tensor, scale: Optional[float] = None) -> Tensor:
    """softmax(q k^T * scale) v for token-major q,k [N,L,d] and v [N,L,Cv]."""
    if q.rank != 3 or k.shape != q.shape or v.rank != 3 or v.shape[:2] != q.shape[:2]:
        raise ShapeError(f"sha: incompatible q {q.shape}, k {k.shape}, v {v.shape}")
    if scale is None:
        scale = q.shape[2] ** -0.5
    scores = matmul(q, k, trans_b=True)
    scores = Tensor._wrap(scores.data * np.float32(scale))
    return matmul(softmax_lastdim(scores), v)


def shma_forward(x: Tensor, p: ShmaParams, return_modulation: bool = False):
    """Modulation attention: o(sigmoid(m(x)) * sigmoid(SHA(q(x), k(x), v(x)))).

    With ``return_modulation`` the pre-projection product is returned as
    well, as ``(out, modulation)``.
    """
    if x.rank != 4 or x.shape[1] != p.channels:
        raise ShapeError(f"SHMA over {p.channels} channels cannot apply to {x.shape}")
    _, _, h, w = x.shape
    q = _to_tokens(_project(x, p.q, p.bn_q))
    k = _to_tokens(_project(x, p.k, p.bn_k))
    v = _to_tokens(_project(x, p.v, p.bn_v))
    ctx = _from_tokens(sha(q, k, v, p.scale), h, w)
    gate = sigmoid(_project(x, p.m, p.bn_m))
    mod = elementwise(gate, sigmoid(ctx), "mul")
    out = _project(mod, p.o, p.bn_o)
    return (out, mod) if return_modulation else out


def sha_attention_forward(x: Tensor, p: MhaParams) -> Tensor:
    """Single-head attention block body (the SHA baseline): no head split."""
    if x.rank != 4 or x.shape[1] != p.channels:
        raise ShapeError(f"attention over {p.channels} channels cannot apply to {x.shape}")
    _, _, h, w = x.shape
    q = _to_tokens(_project(x, p.q, p.bn_q))
    k = _to_tokens(_project(x, p.k, p.bn_k))
    v = _to_tokens(_project(x, p.v, p.bn_v))
    ctx = _from_tokens(sha(q, k, v, p.channels ** -0.5), h, w)
    return _project(ctx, p.o, p.bn_o)


def _split_heads(t: Tensor, heads: int) -> Tensor:
    n, l, c = t.shape
    t = permute(reshape(t, (n, l, heads, c // heads)), (0, 2, 1, 3))
    return reshape(t, (n * heads, l, c // heads))


def _merge_heads(t: Tensor, n: int, heads: int) -> Tensor:
    _, l, dh = t.shape
    t = permute(reshape(t, (n, heads, l, dh)), (0, 2, 1, 3))
    return reshape(t, (n, l, heads * dh))


def mha_forward(x: Tensor, p: MhaParams, return_heads: bool = False):
    """Multi-head attention with per-head scale (C/h)^-1/2.

    ``return_heads`` additionally yields the per-head outputs, a list of
    [N, L, C/h] tensors, as ``(out, heads)``.
    """
    if x.rank != 4 or x.shape[1] != p.channels:
        raise ShapeError(f"attention over {p.channels} channels cannot apply to {x.shape}")
    n, _, h, w = x.shape
    nh = p.num_heads
    q = _split_heads(_to_tokens(_project(x, p.q, p.bn_q)), nh)
    k = _split_heads(_to_tokens(_project(x, p.k, p.bn_k)), nh)
    v = _split_heads(_to_tokens(_project(x, p.v, p.bn_v)), nh)
    att = sha(q, k, v, p.head_dim ** -0.5)  # [N*h, L, dh]
    merged = _merge_heads(att, n, nh)
    out = _project(_from_tokens(merged, h, w), p.o, p.bn_o)
    if not return_heads:
        return out
    per_head = att.data.reshape(n, nh, h * w, p.head_dim)
    return out, [Tensor(per_head[:, i]) for i in range(nh)]


def cpe(x: Tensor, p: CpeParams) -> Tensor:
    return elementwise(x, conv2d(x, p.conv), "add")


def _check_window(h: int, w: int, size: int):
    if size < 1 or h % size or w % size:
        raise ShapeError(f"{h}x{w} map cannot be tiled by {size}x{size} windows")


def window_partition(x: Tensor, size: int) -> Tensor:
    """[N,C,H,W] -> [N*(H/P)*(W/P), C, P, P]; window (i, j) of image n lands at
    batch index n*(H/P)*(W/P) + i*(W/P) + j."""
    if x.rank != 4:
        raise ShapeError(f"window_partition expects NCHW, got {x.shape}")
    n, c, h, w = x.shape
    _check_window(h, w, size)
    gh, gw = h // size, w // size
    d = x.data.reshape(n, c, gh, size, gw, size).transpose(0, 2, 4, 1, 3, 5)
    record_layout_change("window_partition")
    return Tensor._wrap(np.ascontiguousarray(d).reshape(n * gh * gw, c, size, size))


def window_reverse(windows: Tensor, size: int, h: int, w: int) -> Tensor:
    if windows.rank != 4 or windows.shape[2:] != (size, size):
        raise ShapeError(f"expected [B, C, {size}, {size}] windows, got {windows.shape}")
    _check_window(h, w, size)
    gh, gw = h // size, w // size
    b, c = windows.shape[:2]
    if b % (gh * gw):
        raise ShapeError(f"{b} windows do not form whole {h}x{w} maps")
    n = b // (gh * gw)
    d = windows.data.reshape(n, gh, gw, c, size, size).transpose(0, 3, 1, 4, 2, 5)
    record_layout_change("window_reverse")
    return Tensor._wrap(np.ascontiguousarray(d).reshape(n, c, h, w))


def chunked_window_partition(x: Tensor, size: int, n_chunks: int) -> Tensor:
    """Partition channel chunks one at a time and re-join them along channels.

    Produces exactly the same tensor as :func:`window_partition` while each
    reshuffle only touches C/n_chunks channels.
    """
    if x.rank != 4:
        raise ShapeError(f"expected NCHW, got {x.shape}")
    _check_window(x.shape[2], x.shape[3], size)
    return concat_channels([window_partition(part, size) for part in chunk_channels(x, n_chunks)])


def chunked_window_reverse(windows: Tensor, size: int, h: int, w: int, n_chunks: int) -> Tensor:
    return concat_channels([window_reverse(part, size, h, w) for part in chunk_channels(windows, n_chunks)])


def head_cosine_similarity(head_outputs) -> float:
    """Mean pairwise cosine similarity between heads.

    For every unordered head pair the per-token cosine is averaged over all
    tokens (and batch entries); the pair means are then averaged. Tokens
    where either vector has zero norm score 0 and are reported through a
    RuntimeWarning.
    """
    if len(head_outputs) < 2:
        raise ValueError("need at least two heads")
    ref = head_outputs[0].shape
    if any(h.shape != ref for h in head_outputs):
        raise ShapeError("head outputs must share a shape")
    vecs = [h.data.astype(np.float64).reshape(-1, ref[-1]) for h in head_outputs]
    norms = [np.linalg.norm(v, axis=1) for v in vecs]
    pair_means = []
    zero = 0
    for i in range(len(vecs)):
        for j in range(i + 1, len(vecs)):
            denom = norms[i] * norms[j]
            ok = denom > 0
            zero += int((~ok).sum())
            cos = np.zeros_like(denom)
            cos[ok] = np.einsum("td,td->t", vecs[i][ok], vecs[j][ok]) / denom[ok]
            pair_means.append(cos.mean())
    if zero:
        warnings.warn(f"{zero} token pairs had a zero-norm head vector and scored 0", RuntimeWarning, stacklevel=2)
    return float(np.clip(np.mean(pair_means), -1.0, 1.0))


# --- analytic reverse mode for SHMA ---------------------------------------

def _affine_of(bn: Optional[BnParams], channels: int):
    if bn is None:
        return np.ones(channels), np.zeros(channels), None
    scale, shift = bn.affine()
    inv_std = 1.0 / np.sqrt(bn.running_var.data.astype(np.float64) + bn.eps)
    return scale, shift, (bn.running_mean.data.astype(np.float64), inv_std)


def shma_backward(x: Tensor, p: ShmaParams, grad_out: Tensor):
    """Gradients of ``sum(shma_forward(x, p) * grad_out)``.

    Returns ``(grad_x, grads)`` where ``grads`` maps the names used by
    :meth:`ShmaParams.arrays` to float32 tensors. BN layers act as fixed
    per-channel affines (inference statistics); their gamma/beta get
    gradients, running statistics do not. Computed in float64.
    """
    if x.rank != 4 or x.shape[1] != p.channels:
        raise ShapeError(f"SHMA over {p.channels} channels cannot apply to {x.shape}")
    n, c, h, w = x.shape
    if grad_out.shape != x.shape:
        raise ShapeError(f"grad_out {grad_out.shape} must match output {x.shape}")
    L = h * w
    X = x.data.astype(np.float64).reshape(n, c, L)
    dOut = grad_out.data.astype(np.float64).reshape(n, c, L)

    cache = {}
    for name in ("q", "k", "v", "m", "o"):
        conv = getattr(p, name)
        wmat = conv.weight.data.astype(np.float64)[:, :, 0, 0]
        bias = conv.bias.data.astype(np.float64) if conv.bias is not None else np.zeros(conv.out_channels)
        a, sh, stats = _affine_of(getattr(p, f"bn_{name}"), conv.out_channels)
        cache[name] = (wmat, bias, a, sh, stats)

    def proj(name, inp):
        wmat, bias, a, sh, _ = cache[name]
        z = np.einsum("oc,ncl->nol", wmat, inp) + bias[None, :, None]
        return z, a[None, :, None] * z + sh[None, :, None]

    Zq, Q = proj("q", X)
    Zk, K = proj("k", X)
    Zv, V = proj("v", X)
    Zm, M = proj("m", X)
    S = p.scale * np.einsum("ndi,ndj->nij", Q, K)
    S = S - S.max(axis=-1, keepdims=True)
    A = np.exp(S)
    A /= A.sum(axis=-1, keepdims=True)
    Ctx = np.einsum("ncj,nij->nci", V, A)
    sM = _sigmoid(M)
    sC = _sigmoid(Ctx)
    G = sM * sC
    Zo, _ = proj("o", G)

    grads = {}

    def back_proj(name, z, inp, dy):
        wmat, _, a, _, stats = cache[name]
        conv = getattr(p, name)
        dz = a[None, :, None] * dy
        if stats is not None:
            mean, inv_std = stats
            grads[f"bn_{name}.gamma"] = np.einsum("nol,nol->o", dy, (z - mean[None, :, None]) * inv_std[None, :, None])
            grads[f"bn_{name}.beta"] = dy.sum(axis=(0, 2))
        grads[f"{name}.weight"] = np.einsum("nol,ncl->oc", dz, inp)[:, :, None, None]
        if conv.bias is not None:
            grads[f"{name}.bias"] = dz.sum(axis=(0, 2))
        return np.einsum("oc,nol->ncl", wmat, dz)

    dG = back_proj("o", Zo, G, dOut)
    dM = dG * sC * sM * (1.0 - sM)
    dCtx = dG * sM * sC * (1.0 - sC)
    dV = np.einsum("nci,nij->ncj", dCtx, A)
    dA = np.einsum("nci,ncj->nij", dCtx, V)
    dS = A * (dA - (dA * A).sum(axis=-1, keepdims=True))
    dQ = p.scale * np.einsum("nij,ndj->ndi", dS, K)
    dK = p.scale * np.einsum("nij,ndi->ndj", dS, Q)

    dX = back_proj("q", Zq, X, dQ)
    dX += back_proj("k", Zk, X, dK)
    dX += back_proj("v", Zv, X, dV)
    dX += back_proj("m", Zm, X, dM)
    grad_x = Tensor(dX.reshape(n, c, h, w))
    return grad_x, {k: Tensor(v) for k, v in grads.items()}
