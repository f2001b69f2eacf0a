"""Executable models: layer objects, the builder and forward execution.

Every layer is a frozen dataclass holding its parameters as read-only
tensors, so a built :class:`Model` can be shared freely between threads.
Weight names follow ``<layer path>.<param>`` (e.g.
``stages.2.blocks.11.attn.q.bn.gamma``); :meth:`Model.named_tensors`
enumerates them in a stable order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Optional, Union

import numpy as np

from .attention import (
    CpeParams,
    MhaParams,
    ShmaParams,
    chunked_window_partition,
    chunked_window_reverse,
    cpe,
    mha_forward,
    sha_attention_forward,
    shma_forward,
    window_partition,
    window_reverse,
)
from .config import STEM_KERNEL, BlockSpec, ModelConfig, validate_config
from .errors import ShapeError, WeightIOError
from .ops import (
    BnParams,
    ConvParams,
    batchnorm_infer,
    conv2d,
    gelu,
    global_avg_pool,
    linear,
)
from .tensor import Tensor, elementwise

if TYPE_CHECKING:
    from .model_io import WeightStore

__all__ = [
    "ConvBN",
    "Ffn",
    "ConvBlock",
    "AttentionBlock",
    "Head",
    "Stage",
    "Model",
    "ForwardTrace",
    "build_model",
    "forward",
    "INIT_STD",
]

INIT_STD = 0.02


def _add(a: Tensor, b: Tensor) -> Tensor:
    return elementwise(a, b, "add")


def _conv_tensors(prefix: str, conv: ConvParams, bn: Optional[BnParams]):
    yield f"{prefix}.conv.weight", conv.weight
    if conv.bias is not None:
        yield f"{prefix}.conv.bias", conv.bias
    if bn is not None:
        yield f"{prefix}.bn.gamma", bn.gamma
        yield f"{prefix}.bn.beta", bn.beta
        yield f"{prefix}.bn.running_mean", bn.running_mean
        yield f"{prefix}.bn.running_var", bn.running_var


@dataclass(frozen=True)
class ConvBN:
    """Conv, optional inference BN, optional GELU."""

    name: str
    conv: ConvParams
    bn: Optional[BnParams]
    act: Optional[str] = None

    def __call__(self, x: Tensor) -> Tensor:
        y = conv2d(x, self.conv)
        if self.bn is not None:
            y = batchnorm_infer(y, self.bn)
        return gelu(y) if self.act == "gelu" else y

    def named_tensors(self):
        yield from _conv_tensors(self.name, self.conv, self.bn)

    def batchnorms(self):
        return [self.bn] if self.bn is not None else []


@dataclass(frozen=True)
class Ffn:
    name: str
    fc1: ConvBN  # 1x1 expand + BN + GELU
    fc2: ConvBN  # 1x1 project + BN

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(self.fc1(x))

    def named_tensors(self):
        yield from self.fc1.named_tensors()
        yield from self.fc2.named_tensors()

    def batchnorms(self):
        return self.fc1.batchnorms() + self.fc2.batchnorms()


@dataclass(frozen=True)
class ConvBlock:
    """Depthwise KxK conv + BN, then the pointwise FFN, with a residual."""

    name: str
    dw: ConvBN
    ffn: Ffn

    def __call__(self, x: Tensor, hw=None, trace=None) -> Tensor:
        return _add(x, self.ffn(self.dw(x)))

    def named_tensors(self):
        yield from self.dw.named_tensors()
        yield from self.ffn.named_tensors()

    def batchnorms(self):
        return self.dw.batchnorms() + self.ffn.batchnorms()


@dataclass(frozen=True)
class AttentionBlock:
    """[CPE] -> [window partition/reverse] -> attention (+res) -> FFN (+res).

    ``attn`` is :class:`ShmaParams` for modulation attention or
    :class:`MhaParams` for the SHA/MHA baselines (``kind`` decides which
    forward is used).
    """

    name: str
    kind: str
    attn: Union[ShmaParams, MhaParams]
    ffn: Ffn
    cpe: Optional[CpeParams] = None
    window: Optional[int] = None
    window_role: Optional[str] = None
    chunks: int = 1

    def attend(self, x: Tensor) -> Tensor:
        if self.kind in ("shma-block", "window-shma-block"):
            return shma_forward(x, self.attn)
        if self.kind == "mha-block":
            return mha_forward(x, self.attn)
        return sha_attention_forward(x, self.attn)

    def __call__(self, x: Tensor, hw=None, trace=None) -> Tensor:
        if self.cpe is not None:
            x = cpe(x, self.cpe)
        if self.window_role == "partition-entry":
            if self.chunks > 1:
                x = chunked_window_partition(x, self.window, self.chunks)
            else:
                x = window_partition(x, self.window)
        elif self.window_role == "reverse-exit":
            h, w = hw
            if self.chunks > 1:
                x = chunked_window_reverse(x, self.window, h, w, self.chunks)
            else:
                x = window_reverse(x, self.window, h, w)
        if trace is not None:
            trace.attention_inputs.append((self.name, x.shape))
        x = _add(x, self.attend(x))
        return _add(x, self.ffn(x))

    def named_tensors(self):
        if self.cpe is not None:
            yield f"{self.name}.cpe.weight", self.cpe.conv.weight
            yield f"{self.name}.cpe.bias", self.cpe.conv.bias
        names = ("q", "k", "v", "m", "o") if isinstance(self.attn, ShmaParams) else ("q", "k", "v", "o")
        for n in names:
            yield from _conv_tensors(f"{self.name}.attn.{n}", getattr(self.attn, n), getattr(self.attn, f"bn_{n}"))
        yield from self.ffn.named_tensors()

    def batchnorms(self):
        return self.attn.batchnorms() + self.ffn.batchnorms()


@dataclass(frozen=True)
class Head:
    """Global average pool -> BN -> linear classifier."""

    name: str
    bn: Optional[BnParams]
    weight: Tensor
    bias: Tensor

    def __call__(self, x: Tensor) -> Tensor:
        y = global_avg_pool(x)
        if self.bn is not None:
            y = batchnorm_infer(y, self.bn)
        return linear(y, self.weight, self.bias)

    def named_tensors(self):
        if self.bn is not None:
            yield f"{self.name}.bn.gamma", self.bn.gamma
            yield f"{self.name}.bn.beta", self.bn.beta
            yield f"{self.name}.bn.running_mean", self.bn.running_mean
            yield f"{self.name}.bn.running_var", self.bn.running_var
        yield f"{self.name}.fc.weight", self.weight
        yield f"{self.name}.fc.bias", self.bias

    def batchnorms(self):
        return [self.bn] if self.bn is not None else []


@dataclass(frozen=True)
class Stage:
    name: str
    downsample: Optional[ConvBN]
    blocks: tuple

    def layers(self):
        if self.downsample is not None:
            yield self.downsample
        yield from self.blocks


@dataclass
class ForwardTrace:
    """Shapes observed during one forward call."""

    stage_shapes: list = field(default_factory=list)
    attention_inputs: list = field(default_factory=list)


@dataclass(frozen=True)
class Model:
    config: ModelConfig
    stem: tuple
    stages: tuple
    head: Head

    def layers(self):
        yield from self.stem
        for st in self.stages:
            yield from st.layers()
        yield self.head

    def named_tensors(self) -> list:
        out = []
        for layer in self.layers():
            out.extend(layer.named_tensors())
        return out

    def state_dict(self) -> dict:
        return dict(self.named_tensors())

    def batchnorms(self) -> list:
        bns = []
        for layer in self.layers():
            bns.extend(layer.batchnorms())
        return bns

    @property
    def num_blocks(self) -> int:
        return sum(len(st.blocks) for st in self.stages)

    def __call__(self, x: Tensor, trace: Optional[ForwardTrace] = None) -> Tensor:
        return forward(self, x, trace)


# --- building ----------------------------------------------------------------

def _trunc_normal(rng: np.random.Generator, shape, std=INIT_STD, bound=2.0):
    """Normal(0, std) truncated at +-bound*std, by resampling."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > bound
    return (out * std).astype(np.float32)


class _RandomSource:
    fused = False

    def __init__(self, seed: int):
        self.rng = np.random.default_rng(seed)

    def has(self, name):
        return False

    def get(self, name, shape, fill):
        if fill == "init":
            return Tensor(_trunc_normal(self.rng, shape))
        return Tensor.full(shape, 1.0 if fill == "one" else 0.0)


class _StoreSource:
    def __init__(self, tensors: dict):
        self.tensors = tensors
        self.used = set()

    def has(self, name):
        return name in self.tensors

    def get(self, name, shape, fill):
        try:
            t = self.tensors[name]
        except KeyError:
            raise WeightIOError(f"weight store is missing tensor {name!r}") from None
        if tuple(t.shape) != tuple(shape):
            raise WeightIOError(f"tensor {name!r} has shape {tuple(t.shape)}, expected {tuple(shape)}")
        self.used.add(name)
        return t


class _Builder:
    def __init__(self, cfg: ModelConfig, src):
        self.cfg = cfg
        self.src = src

    def bn(self, prefix, c) -> Optional[BnParams]:
        if isinstance(self.src, _StoreSource) and not self.src.has(f"{prefix}.bn.gamma"):
            return None
        return BnParams(
            self.src.get(f"{prefix}.bn.gamma", (c,), "one"),
            self.src.get(f"{prefix}.bn.beta", (c,), "zero"),
            self.src.get(f"{prefix}.bn.running_mean", (c,), "zero"),
            self.src.get(f"{prefix}.bn.running_var", (c,), "one"),
            eps=self.cfg.bn_eps,
        )

    def conv_params(self, prefix, cin, cout, k, stride=1, groups=1, bias=False) -> ConvParams:
        w = self.src.get(f"{prefix}.conv.weight", (cout, cin // groups, k, k), "init")
        b = None
        if bias or self.src.has(f"{prefix}.conv.bias"):
            b = self.src.get(f"{prefix}.conv.bias", (cout,), "zero")
        return ConvParams(w, b, stride=stride, padding=k // 2, groups=groups)

    def convbn(self, prefix, cin, cout, k, stride=1, groups=1, act=None) -> ConvBN:
        conv = self.conv_params(prefix, cin, cout, k, stride, groups)
        bn = self.bn(prefix, cout)
        if bn is None and conv.bias is None:
            raise WeightIOError(f"{prefix}: neither BN statistics nor a folded bias in the store")
        return ConvBN(prefix, conv, bn, act)

    def ffn(self, prefix, c, r) -> Ffn:
        return Ffn(prefix, self.convbn(f"{prefix}.fc1", c, c * r, 1, act="gelu"), self.convbn(f"{prefix}.fc2", c * r, c, 1))

    def block(self, prefix, spec: BlockSpec):
        c = spec.channels
        if spec.kind == "conv-block":
            dw = self.convbn(f"{prefix}.dw", c, c, spec.kernel, groups=c)
            return ConvBlock(prefix, dw, self.ffn(f"{prefix}.ffn", c, spec.ratio))
        ffn = self.ffn(f"{prefix}.ffn", c, spec.ratio)
        if spec.kind in ("shma-block", "window-shma-block"):
            cpe_conv = ConvParams(
                self.src.get(f"{prefix}.cpe.weight", (c, 1, 3, 3), "init"),
                self.src.get(f"{prefix}.cpe.bias", (c,), "zero"),
                stride=1, padding=1, groups=c,
            )
            widths = {"q": spec.head_dim, "k": spec.head_dim, "v": c, "m": c, "o": c}
            parts = {}
            for n, cout in widths.items():
                cb = self.convbn(f"{prefix}.attn.{n}", c, cout, 1)
                parts[n], parts[f"bn_{n}"] = cb.conv, cb.bn
            return AttentionBlock(
                prefix, spec.kind, ShmaParams(**parts), ffn, CpeParams(cpe_conv),
                window=spec.window, window_role=spec.window_role, chunks=spec.chunks or 1,
            )
        parts = {}
        for n in ("q", "k", "v", "o"):
            cb = self.convbn(f"{prefix}.attn.{n}", c, c, 1)
            parts[n], parts[f"bn_{n}"] = cb.conv, cb.bn
        return AttentionBlock(prefix, spec.kind, MhaParams(num_heads=spec.num_heads, **parts), ffn)

    def build(self) -> Model:
        cfg = self.cfg
        w0, w1, w2 = cfg.stem_widths
        k = STEM_KERNEL
        stem = (
            self.convbn("stem.0", cfg.in_channels, w0, k, stride=2, act="gelu"),
            self.convbn("stem.1", w0, w1, k, stride=2, act="gelu"),
            self.convbn("stem.2", w1, w2, 1),
        )
        stages = []
        cin = w2
        for si, sc in enumerate(cfg.stages):
            prefix = f"stages.{si}"
            ds = None
            if sc.downsample is not None:
                d = sc.downsample
                ds = self.convbn(f"{prefix}.downsample", cin, d.out_channels, d.kernel, stride=d.stride)
            blocks = tuple(self.block(f"{prefix}.blocks.{bi}", b) for bi, b in enumerate(sc.blocks))
            stages.append(Stage(prefix, ds, blocks))
            cin = sc.channels
        head_bn = self.bn("head", cin)
        head = Head(
            "head",
            head_bn,
            self.src.get("head.fc.weight", (cfg.num_classes, cin), "init"),
            self.src.get("head.fc.bias", (cfg.num_classes,), "zero"),
        )
        return Model(cfg, stem, tuple(stages), head)


def build_model(cfg: ModelConfig, init: Union[int, dict, "WeightStore", None] = 0) -> Model:
    """Materialize a model from ``cfg``.

    ``init`` is either an integer seed (truncated-normal init, std 0.02,
    cut at two standard deviations; BN at identity statistics) or a
    weight store / name->Tensor mapping to load from. A store without BN
    tensors for a conv but with a bias is treated as already fused.
    """
    validate_config(cfg)
    if init is None or isinstance(init, (int, np.integer)):
        return _Builder(cfg, _RandomSource(int(init or 0))).build()
    tensors = init.as_dict() if hasattr(init, "as_dict") else dict(init)
    src = _StoreSource(tensors)
    model = _Builder(cfg, src).build()
    extra = sorted(set(tensors) - src.used)
    if extra:
        raise WeightIOError(f"weight store has tensors the config does not use: {extra[:5]}")
    return model


# --- execution -----------------------------------------------------------------

def forward(m: Model, x: Tensor, trace: Optional[ForwardTrace] = None) -> Tensor:
    """Logits [N, num_classes] for an NCHW batch at the configured resolution."""
    cfg = m.config
    if x.rank != 4:
        raise ShapeError(f"stem: expected an NCHW batch, got {x.shape}")
    if x.shape[1] != cfg.in_channels or x.shape[2:] != (cfg.resolution, cfg.resolution):
        raise ShapeError(
            f"stem: expected [N, {cfg.in_channels}, {cfg.resolution}, {cfg.resolution}] input, got {list(x.shape)}"
        )
    for layer in m.stem:
        x = layer(x)
    for si, st in enumerate(m.stages):
        if st.downsample is not None:
            x = st.downsample(x)
        n, _, h, w = x.shape
        for b in st.blocks:
            try:
                x = b(x, (h, w), trace)
            except ShapeError as exc:
                raise ShapeError(f"stage {si + 1} ({b.name}): {exc}") from exc
        if x.shape[0] != n:
            raise ShapeError(f"stage {si + 1}: window region left open")
        if trace is not None:
            trace.stage_shapes.append(tuple(x.shape[1:]))
    return m.head(x)
