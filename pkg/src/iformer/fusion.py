"""BN folding and exact parameter / multiply-accumulate accounting.

MAC convention: convolutions cost H'*W'*Cout*K*K*Cin/groups, linear layers
Cin*Cout, attention L*L*d_qk for the scores plus L*L*Cv for the weighted
sum (per window), and the modulation product one MAC per element. BN,
activations, residual adds, softmax and pooling are free.
"""

from __future__ import annotations

from dataclasses import replace
from typing import Optional

import numpy as np

from .attention import CpeParams, MhaParams, ShmaParams
from .model import AttentionBlock, ConvBlock, ConvBN, Ffn, Head, Model, Stage, build_model
from .ops import BnParams, ConvParams, conv_output_size
from .tensor import Tensor

__all__ = [
    "fold_bn_into_conv",
    "fold_bn_into_linear",
    "fuse_model",
    "count_params",
    "count_macs",
    "stage_macs",
    "layer_macs",
    "shma_complexity_formula",
    "ffn_complexity_formula",
    "randomize_bn_statistics",
    "fusion_drift",
]


def fold_bn_into_conv(conv: ConvParams, bn: BnParams) -> ConvParams:
    """Conv whose output equals ``bn(conv(x))`` (inference statistics)."""
    if bn.channels != conv.out_channels:
        raise ValueError(f"BN has {bn.channels} channels, conv produces {conv.out_channels}")
    scale, shift = bn.affine()
    w = conv.weight.data.astype(np.float64) * scale[:, None, None, None]
    b = conv.bias.data.astype(np.float64) if conv.bias is not None else np.zeros(conv.out_channels)
    return replace(conv, weight=Tensor(w), bias=Tensor(b * scale + shift))


def fold_bn_into_linear(bn: BnParams, weight: Tensor, bias: Tensor):
    """(weight', bias') with ``linear(x, w', b') == linear(bn(x), w, b)``; BN precedes the linear map."""
    scale, shift = bn.affine()
    w = weight.data.astype(np.float64)
    return Tensor(w * scale[None, :]), Tensor(bias.data.astype(np.float64) + w @ shift)


def _fuse_convbn(cb: ConvBN) -> ConvBN:
    if cb.bn is None:
        return cb
    return replace(cb, conv=fold_bn_into_conv(cb.conv, cb.bn), bn=None)


def _fuse_ffn(f: Ffn) -> Ffn:
    return replace(f, fc1=_fuse_convbn(f.fc1), fc2=_fuse_convbn(f.fc2))


def _fuse_attn(p):
    names = ("q", "k", "v", "m", "o") if isinstance(p, ShmaParams) else ("q", "k", "v", "o")
    changes = {}
    for n in names:
        bn = getattr(p, f"bn_{n}")
        if bn is not None:
            changes[n] = fold_bn_into_conv(getattr(p, n), bn)
            changes[f"bn_{n}"] = None
    return replace(p, **changes)


def _fuse_layer(layer):
    if isinstance(layer, ConvBN):
        return _fuse_convbn(layer)
    if isinstance(layer, ConvBlock):
        return replace(layer, dw=_fuse_convbn(layer.dw), ffn=_fuse_ffn(layer.ffn))
    if isinstance(layer, AttentionBlock):
        return replace(layer, attn=_fuse_attn(layer.attn), ffn=_fuse_ffn(layer.ffn))
    if isinstance(layer, Head):
        if layer.bn is None:
            return layer
        w, b = fold_bn_into_linear(layer.bn, layer.weight, layer.bias)
        return replace(layer, bn=None, weight=w, bias=b)
    raise TypeError(f"don't know how to fuse {type(layer).__name__}")


def fuse_model(m: Model) -> Model:
    """Model with every Conv+BN and BN+Linear pair collapsed; no BN remains."""
    stages = tuple(
        Stage(st.name, _fuse_layer(st.downsample) if st.downsample else None, tuple(_fuse_layer(b) for b in st.blocks))
        for st in m.stages
    )
    return Model(m.config, tuple(_fuse_layer(l) for l in m.stem), stages, _fuse_layer(m.head))


def randomize_bn_statistics(m: Model, seed: int = 0) -> Model:
    """Copy of ``m`` with random but well-conditioned BN gamma/beta/mean/var.

    Freshly initialized BN layers are identities, which makes folding
    trivially exact; tests and ``verify`` use this to exercise the fold.
    """
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, t in m.named_tensors():
        n = t.shape
        if name.endswith(".bn.gamma"):
            t = Tensor(rng.uniform(0.5, 1.5, n))
        elif name.endswith(".bn.beta"):
            t = Tensor(rng.normal(0.0, 0.1, n))
        elif name.endswith(".bn.running_mean"):
            t = Tensor(rng.normal(0.0, 0.1, n))
        elif name.endswith(".bn.running_var"):
            t = Tensor(rng.uniform(0.5, 1.5, n))
        tensors[name] = t
    return build_model(m.config, tensors)


# --- counting ------------------------------------------------------------------

def count_params(m) -> int:
    """Conv/linear weights and biases plus BN gamma/beta; running stats are buffers."""
    tensors = m.named_tensors() if hasattr(m, "named_tensors") else m
    return int(sum(t.size for name, t in tensors if not name.endswith(("running_mean", "running_var"))))


def _conv_macs(conv: ConvParams, shape):
    b, cin, h, w = shape
    k = conv.kernel_size
    ho = conv_output_size(h, k, conv.stride, conv.padding)
    wo = conv_output_size(w, k, conv.stride, conv.padding)
    macs = b * ho * wo * conv.out_channels * k * k * (cin // conv.groups)
    return macs, (b, conv.out_channels, ho, wo)


def _attention_macs(p, shape):
    b, c, h, w = shape
    tokens = h * w
    if isinstance(p, ShmaParams):
        proj = sum(_conv_macs(getattr(p, n), shape)[0] for n in ("q", "k", "v", "m", "o"))
        modulation = b * tokens * c
        d_qk = p.head_dim
    else:
        proj = sum(_conv_macs(getattr(p, n), shape)[0] for n in ("q", "k", "v", "o"))
        modulation = 0
        d_qk = p.channels  # summed over heads
    attention = b * tokens * tokens * (d_qk + c)
    return proj + modulation + attention, shape


def layer_macs(layer, shape):
    """(MACs, output shape) for one layer or parameter bundle at input ``shape`` (B, C, H, W)."""
    shape = tuple(shape)
    if isinstance(layer, ConvParams):
        return _conv_macs(layer, shape)
    if isinstance(layer, ConvBN):
        return _conv_macs(layer.conv, shape)
    if isinstance(layer, (ShmaParams, MhaParams)):
        return _attention_macs(layer, shape)
    if isinstance(layer, CpeParams):
        return _conv_macs(layer.conv, shape)[0], shape
    if isinstance(layer, Ffn):
        m1, s1 = _conv_macs(layer.fc1.conv, shape)
        m2, s2 = _conv_macs(layer.fc2.conv, s1)
        return m1 + m2, s2
    if isinstance(layer, ConvBlock):
        m0, s0 = _conv_macs(layer.dw.conv, shape)
        m1, s1 = layer_macs(layer.ffn, s0)
        return m0 + m1, s1
    if isinstance(layer, AttentionBlock):
        total = 0
        if layer.cpe is not None:
            total += layer_macs(layer.cpe, shape)[0]
        b, c, h, w = shape
        if layer.window_role == "partition-entry":
            p = layer.window
            shape = (b * (h // p) * (w // p), c, p, p)
        total += layer_macs(layer.attn, shape)[0]
        total += layer_macs(layer.ffn, shape)[0]
        return total, shape
    if isinstance(layer, Head):
        return layer.weight.shape[0] * layer.weight.shape[1] * shape[0], (shape[0], layer.weight.shape[0])
    raise TypeError(f"no MAC rule for {type(layer).__name__}")


def stage_macs(stage: Stage, shape):
    """(MACs, output shape) of one stage; a reverse-exit block attends over the full map."""
    total = 0
    if stage.downsample is not None:
        macs, shape = layer_macs(stage.downsample, shape)
        total += macs
    full = shape
    for b in stage.blocks:
        if isinstance(b, AttentionBlock) and b.window_role == "reverse-exit":
            shape = full
        macs, shape = layer_macs(b, shape)
        total += macs
    return total, full


def count_macs(m: Model, resolution: Optional[int] = None) -> int:
    """Total MACs of one image through ``m`` at ``resolution`` (default: the config's)."""
    res = m.config.resolution if resolution is None else resolution
    shape = (1, m.config.in_channels, res, res)
    total = 0
    for layer in m.stem:
        macs, shape = layer_macs(layer, shape)
        total += macs
    for st in m.stages:
        macs, shape = stage_macs(st, shape)
        total += macs
    macs, _ = layer_macs(m.head, shape)
    return int(total + macs)


def shma_complexity_formula(h: int, w: int, c: int, p: Optional[int] = None, r: int = 2) -> int:
    """(3 + 2/R)HWC^2 + HWC + (1 + 1/R) P^2 HWC for a modulation attention layer.

    Query/key are C/R wide, value/modulation/output C wide, so at the
    default R=2 the projection term is the familiar 4HWC^2. ``p`` is the
    window side; None means global attention (P^2 = HW).
    """
    if min(h, w, c, r) < 1 or (p is not None and p < 1):
        raise ValueError("arguments must be positive")
    if c % r:
        raise ValueError(f"R={r} must divide C={c}")
    p2 = h * w if p is None else p * p
    if (h * w) % p2:
        raise ValueError(f"H*W={h * w} is not a multiple of P^2={p2}")
    hwc = h * w * c
    projections = 3 * hwc * c + 2 * hwc * (c // r)
    return projections + hwc + p2 * hwc + p2 * hwc // r


def ffn_complexity_formula(h: int, w: int, c: int, ratio: int = 4) -> int:
    """2 * ratio * HWC^2; with ratio 4 this is 8HWC^2."""
    return 2 * ratio * h * w * c * c


def fusion_drift(model: Model, fused: Model, x: Tensor):
    """Max-abs output differences between ``model`` and ``fused`` on ``x``.

    Every layer of the fused model is fed the unfused model's activation,
    so per-layer numbers isolate each fold. Returns ``(per_layer, logits)``
    with ``per_layer`` a list of (layer name, drift).
    """
    per_layer = []

    def step(a, b, inp, *args):
        ya, yb = a(inp, *args), b(inp, *args)
        per_layer.append((a.name, float(np.max(np.abs(ya.data.astype(np.float64) - yb.data)))))
        return ya

    h = x
    for a, b in zip(model.stem, fused.stem):
        h = step(a, b, h)
    for sa, sb in zip(model.stages, fused.stages):
        if sa.downsample is not None:
            h = step(sa.downsample, sb.downsample, h)
        hw = h.shape[2:]
        for a, b in zip(sa.blocks, sb.blocks):
            h = step(a, b, h, hw)
    step(model.head, fused.head, h)
    logits = float(np.max(np.abs(model(x).data.astype(np.float64) - fused(x).data)))
    return per_layer, logits
