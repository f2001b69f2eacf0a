"""Declarative architecture descriptions and the named presets.

A :class:`ModelConfig` is a pure value: stem widths, four stages of
:class:`BlockSpec` sequences and the classifier head size. Building weights
from it is :func:`iformer.model.build_model`'s job.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

from .errors import ConfigError
from .ops import DEFAULT_BN_EPS, conv_output_size

__all__ = [
    "BLOCK_KINDS",
    "WINDOW_ROLES",
    "BlockSpec",
    "Downsample",
    "StageConfig",
    "ModelConfig",
    "PRESETS",
    "preset_config",
    "stage_feature_shapes",
    "validate_config",
]

BLOCK_KINDS = ("conv-block", "shma-block", "sha-block", "mha-block", "window-shma-block")
WINDOW_ROLES = ("partition-entry", "interior", "reverse-exit")
ATTENTION_KINDS = ("shma-block", "sha-block", "mha-block", "window-shma-block")

STEM_KERNEL = 5
DOWNSAMPLE_KERNEL = 3
# MHA baseline head width; only the baseline presets use it
MHA_HEAD_DIM = 32


@dataclass(frozen=True)
class BlockSpec:
    kind: str
    channels: int
    ratio: int
    kernel: Optional[int] = None
    head_dim: Optional[int] = None
    window: Optional[int] = None
    window_role: Optional[str] = None
    chunks: Optional[int] = None

    def problems(self) -> list:
        out = []
        if self.kind not in BLOCK_KINDS:
            return [f"unknown block kind {self.kind!r}"]
        if self.channels < 1:
            out.append("channels must be positive")
        if self.ratio < 1:
            out.append("ratio must be >= 1")
        conv = self.kind == "conv-block"
        windowed = self.kind == "window-shma-block"
        if conv != (self.kernel is not None):
            out.append("kernel is required for conv-block and only there")
        if conv == (self.head_dim is not None):
            out.append("head_dim is required for attention blocks and only there")
        if windowed != (self.window is not None) or windowed != (self.window_role is not None) \
                or windowed != (self.chunks is not None):
            out.append("window, window_role and chunks are required for window-shma-block and only there")
        if self.kernel is not None and (self.kernel < 1 or self.kernel % 2 == 0):
            out.append("kernel must be odd and positive")
        if self.head_dim is not None:
            if not 1 <= self.head_dim <= self.channels:
                out.append("head_dim must lie in [1, channels]")
            elif self.kind == "sha-block" and self.head_dim != self.channels:
                out.append("sha-block attends with a single full-width head")
            elif self.kind == "mha-block" and self.channels % self.head_dim:
                out.append("mha-block channels must be a multiple of head_dim")
        if windowed:
            if self.window_role not in WINDOW_ROLES:
                out.append(f"window_role must be one of {WINDOW_ROLES}")
            if self.window is not None and self.window < 1:
                out.append("window must be positive")
            if self.chunks is not None and (self.chunks < 1 or self.channels % self.chunks):
                out.append("chunks must divide channels")
        return out

    @property
    def num_heads(self) -> int:
        return self.channels // self.head_dim if self.kind == "mha-block" else 1


@dataclass(frozen=True)
class Downsample:
    out_channels: int
    kernel: int = DOWNSAMPLE_KERNEL
    stride: int = 2

    @property
    def padding(self) -> int:
        return self.kernel // 2


@dataclass(frozen=True)
class StageConfig:
    downsample: Optional[Downsample]
    blocks: tuple

    @property
    def channels(self) -> Optional[int]:
        if self.downsample is not None:
            return self.downsample.out_channels
        return self.blocks[0].channels if self.blocks else None


@dataclass(frozen=True)
class ModelConfig:
    name: str
    stem_widths: tuple  # (5x5 s2, 5x5 s2, 1x1)
    stages: tuple
    num_classes: int = 1000
    resolution: int = 224
    bn_eps: float = DEFAULT_BN_EPS
    in_channels: int = 3

    @property
    def out_channels(self) -> int:
        return self.stages[-1].channels


def _stage_problems(cfg: ModelConfig):
    """Yield (json-path, message) for every structural problem."""
    if len(cfg.stem_widths) != 3 or any(int(w) < 1 for w in cfg.stem_widths):
        yield "/stem_widths", "stem needs three positive widths"
    if len(cfg.stages) != 4:
        yield "/stages", f"expected 4 stages, got {len(cfg.stages)}"
        return
    if cfg.num_classes < 1:
        yield "/num_classes", "must be positive"
    if cfg.in_channels < 1:
        yield "/in_channels", "must be positive"
    channels = cfg.stem_widths[-1] if len(cfg.stem_widths) == 3 else None
    for si, stage in enumerate(cfg.stages):
        path = f"/stages/{si}"
        ds = stage.downsample
        if si == 0 and ds is not None:
            yield f"{path}/downsample", "stage 1 keeps the stem resolution"
        if si > 0:
            if ds is None:
                yield f"{path}/downsample", "stages 2-4 begin with a stride-2 downsample"
            elif ds.stride != 2 or ds.kernel != DOWNSAMPLE_KERNEL or ds.out_channels < 1:
                yield f"{path}/downsample", "downsample must be a 3x3 stride-2 conv"
            else:
                channels = ds.out_channels
        if not stage.blocks:
            yield f"{path}/blocks", "stage has no blocks"
        windowed = False
        for bi, b in enumerate(stage.blocks):
            bpath = f"{path}/blocks/{bi}"
            for msg in b.problems():
                yield bpath, msg
            if b.channels != channels:
                yield f"{bpath}/channels", f"block width {b.channels} does not match stage width {channels}"
            role = b.window_role
            if role == "partition-entry":
                if windowed:
                    yield bpath, "partition-entry inside an open window region"
                windowed = True
            elif role in ("interior", "reverse-exit"):
                if not windowed:
                    yield bpath, f"{role} block without a preceding partition-entry"
                if role == "reverse-exit":
                    windowed = False
            elif windowed:
                yield bpath, "window region must be closed by a reverse-exit block"
        if windowed:
            yield f"{path}/blocks", "window region is never reversed"


def validate_config(cfg: ModelConfig, resolution: Optional[int] = None):
    """Raise ConfigError for the first structural problem, if any."""
    for path, msg in _stage_problems(cfg):
        raise ConfigError(msg, path)
    stage_feature_shapes(cfg, resolution or cfg.resolution)


def stage_feature_shapes(cfg: ModelConfig, resolution: Optional[int] = None) -> list:
    """(C, H, W) at the output of each stage, computed without weights.

    Raises ConfigError naming the stage when the resolution does not divide
    cleanly down to stride 32 or a window size does not tile its stage.
    """
    res = cfg.resolution if resolution is None else resolution
    if res < 32 or res % 32:
        raise ConfigError(f"resolution {res} does not reach stride 32 exactly", "/resolution")
    h = res
    for _ in range(2):
        h = conv_output_size(h, STEM_KERNEL, 2, STEM_KERNEL // 2)
    shapes = []
    for si, stage in enumerate(cfg.stages):
        if stage.downsample is not None:
            ds = stage.downsample
            h = conv_output_size(h, ds.kernel, ds.stride, ds.padding)
        for bi, b in enumerate(stage.blocks):
            if b.window is not None and h % b.window:
                raise ConfigError(
                    f"stage {si + 1}: {h}x{h} map is not tiled by {b.window}x{b.window} windows",
                    f"/stages/{si}/blocks/{bi}/window",
                )
        shapes.append((stage.channels, h, h))
    return shapes


# --- presets -----------------------------------------------------------------

def _conv(c, r, k=7):
    return BlockSpec("conv-block", c, r, kernel=k)


def _shma(c, hd, r):
    return BlockSpec("shma-block", c, r, head_dim=hd)


def _stage(ds, *groups):
    blocks = []
    for n, spec in groups:
        blocks.extend([spec] * n)
    return StageConfig(Downsample(ds) if ds else None, tuple(blocks))


def _iformer(name, stem, w, r12, s3, s4, resolution=224):
    n_conv, n_attn, hd3, r_attn3, r_conv3 = s3
    n4, hd4, r4 = s4
    return ModelConfig(
        name=name,
        stem_widths=stem,
        stages=(
            _stage(None, (2, _conv(w[0], r12))),
            _stage(w[1], (2, _conv(w[1], r12))),
            _stage(w[2], (n_conv, _conv(w[2], r_conv3)), (n_attn, _shma(w[2], hd3, r_attn3)), (1, _conv(w[2], r_conv3))),
            _stage(w[3], (n4, _shma(w[3], hd4, r4))),
        ),
        resolution=resolution,
    )


def _baseline(kind):
    w = (48, 96, 192, 384)
    hd = (lambda c: MHA_HEAD_DIM) if kind == "mha-block" else (lambda c: c)
    attn3 = BlockSpec(kind, w[2], 4, head_dim=hd(w[2]))
    attn4 = BlockSpec(kind, w[3], 4, head_dim=hd(w[3]))
    return ModelConfig(
        name="mha-baseline" if kind == "mha-block" else "sha-baseline",
        stem_widths=(24, 96, 48),
        stages=(
            _stage(None, (2, _conv(w[0], 4))),
            _stage(w[1], (2, _conv(w[1], 4))),
            _stage(w[2], (9, _conv(w[2], 4)), (9, attn3)),
            _stage(w[3], (2, attn4)),
        ),
    )


def _window512():
    ws, chunks = 16, 16

    def win(c, hd, r, role):
        return BlockSpec("window-shma-block", c, r, head_dim=hd, window=ws, window_role=role, chunks=chunks)

    return ModelConfig(
        name="iformer-m-window512",
        stem_widths=(24, 96, 48),
        stages=(
            _stage(None, (2, _conv(48, 4))),
            _stage(96, (2, _conv(96, 4))),
            _stage(
                192,
                (9, _conv(192, 4)),
                (1, win(192, 96, 3, "partition-entry")),
                (2, win(192, 96, 3, "interior")),
                (1, win(192, 96, 3, "reverse-exit")),
                (1, _conv(192, 4)),
            ),
            _stage(384, (1, win(384, 96, 3, "partition-entry")), (1, win(384, 64, 3, "reverse-exit"))),
        ),
        resolution=512,
    )


PRESETS = {
    "iformer-t": lambda: _iformer("iformer-t", (16, 64, 32), (32, 64, 128, 256), 3, (6, 3, 64, 2, 3), (2, 64, 2)),
    "iformer-s": lambda: _iformer("iformer-s", (16, 64, 32), (32, 64, 176, 320), 4, (9, 3, 88, 3, 4), (2, 80, 3)),
    "iformer-m": lambda: _iformer("iformer-m", (24, 96, 48), (48, 96, 192, 384), 4, (9, 4, 96, 3, 4), (2, 96, 3)),
    "iformer-l": lambda: _iformer("iformer-l", (24, 96, 48), (48, 96, 256, 384), 4, (8, 8, 128, 3, 4), (2, 96, 3)),
    "mha-baseline": lambda: _baseline("mha-block"),
    "sha-baseline": lambda: _baseline("sha-block"),
    "iformer-m-window512": _window512,
}


def preset_config(name: str) -> ModelConfig:
    try:
        factory = PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    cfg = factory()
    validate_config(cfg)
    return cfg
