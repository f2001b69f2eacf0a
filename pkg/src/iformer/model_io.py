"""Weight container (IFW1), JSON config (schema v1) and PPM image ingestion.

IFW1 layout, little-endian throughout::

    b"IFW1"                      magic
    u32                          entry count
    per entry:
      u16                        name length in bytes
      bytes                      UTF-8 name
      u8                         rank (1..4)
      rank x u32                 extents
      f32 x prod(extents)        row-major payload
    u32                          CRC32 of every preceding byte
"""

from __future__ import annotations

import json
import math
import os
import struct
import zlib
from typing import Iterable, Sequence

import numpy as np

from .config import BLOCK_KINDS, BlockSpec, Downsample, ModelConfig, StageConfig, validate_config
from .errors import ConfigError, WeightIOError
from .tensor import Tensor

__all__ = [
    "WeightStore",
    "save_weights",
    "load_weights",
    "encode_weights",
    "decode_weights",
    "config_to_dict",
    "config_from_dict",
    "save_config",
    "load_config",
    "read_ppm",
    "write_ppm",
    "load_image_ppm",
    "encode_image_ppm",
    "IMAGENET_MEAN",
    "IMAGENET_STD",
]

MAGIC = b"IFW1"
CONFIG_VERSION = 1
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


class WeightStore:
    """Ordered, uniquely named collection of tensors."""

    def __init__(self, entries: Iterable = ()):
        self._entries = {}
        for name, t in entries:
            self.add(name, t)

    @classmethod
    def from_model(cls, model) -> "WeightStore":
        return cls(model.named_tensors())

    def add(self, name: str, t):
        if name in self._entries:
            raise ValueError(f"duplicate tensor name {name!r}")
        if len(name.encode("utf-8")) > 0xFFFF:
            raise ValueError(f"tensor name too long: {name[:40]}...")
        self._entries[name] = t if isinstance(t, Tensor) else Tensor(t)

    def __getitem__(self, name) -> Tensor:
        return self._entries[name]

    def __contains__(self, name):
        return name in self._entries

    def __len__(self):
        return len(self._entries)

    def __iter__(self):
        return iter(self._entries.items())

    def names(self) -> list:
        return list(self._entries)

    def as_dict(self) -> dict:
        return dict(self._entries)

    def __eq__(self, other):
        if not isinstance(other, WeightStore):
            return NotImplemented
        return self.names() == other.names() and all(
            self[n].bit_equal(other[n]) for n in self.names()
        )

    __hash__ = None


def encode_weights(store: WeightStore) -> bytes:
    parts = [MAGIC, struct.pack("<I", len(store))]
    for name, t in store:
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack(f"<B{t.rank}I", t.rank, *t.shape))
        parts.append(t.data.astype("<f4", copy=False).tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode_weights(buf: bytes) -> WeightStore:
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise WeightIOError("bad magic, not an IFW1 file", offset=0)
    if len(buf) < 12:
        raise WeightIOError("file truncated before entry count/checksum", offset=len(buf))
    body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    if zlib.crc32(body) != crc:
        raise WeightIOError("checksum mismatch, file is corrupted", offset=len(buf) - 4)

    pos = 4

    def take(n):
        nonlocal pos
        if pos + n > len(body):
            raise WeightIOError(f"truncated payload: wanted {n} bytes", offset=pos)
        chunk = body[pos:pos + n]
        pos += n
        return chunk

    (count,) = struct.unpack("<I", take(4))
    store = WeightStore()
    for _ in range(count):
        start = pos
        (nlen,) = struct.unpack("<H", take(2))
        try:
            name = take(nlen).decode("utf-8")
        except UnicodeDecodeError:
            raise WeightIOError("tensor name is not valid UTF-8", offset=start + 2) from None
        (rank,) = struct.unpack("<B", take(1))
        if not 1 <= rank <= 4:
            raise WeightIOError(f"tensor {name!r} has unsupported rank {rank}", offset=pos - 1)
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        if 0 in shape:
            raise WeightIOError(f"tensor {name!r} has a zero extent", offset=pos - 4 * rank)
        payload = np.frombuffer(take(4 * math.prod(shape)), dtype="<f4").reshape(shape)
        if name in store:
            raise WeightIOError(f"duplicate tensor name {name!r}", offset=start)
        store.add(name, Tensor(payload))
    if pos != len(body):
        raise WeightIOError(f"{len(body) - pos} unexpected trailing bytes", offset=pos)
    return store


def save_weights(store: WeightStore, path):
    data = encode_weights(store)
    with open(path, "wb") as f:
        f.write(data)


def load_weights(path) -> WeightStore:
    try:
        with open(path, "rb") as f:
            buf = f.read()
    except OSError as exc:
        raise WeightIOError(f"cannot read weights from {path}: {exc.strerror}") from exc
    return decode_weights(buf)


# --- config JSON ------------------------------------------------------------------

_BLOCK_KEYS = ("kind", "channels", "ratio", "kernel", "head_dim", "window", "window_role", "chunks")
_TOP_KEYS = {"v", "name", "resolution", "num_classes", "bn_eps", "in_channels", "stem_widths", "stages"}


def _block_dict(b: BlockSpec) -> dict:
    return {k: getattr(b, k) for k in _BLOCK_KEYS if getattr(b, k) is not None}


def config_to_dict(cfg: ModelConfig) -> dict:
    stages = []
    for st in cfg.stages:
        runs = []
        for b in st.blocks:
            if runs and runs[-1][0] == b:
                runs[-1][1] += 1
            else:
                runs.append([b, 1])
        blocks = []
        for b, n in runs:
            d = _block_dict(b)
            if n > 1:
                d["repeat"] = n
            blocks.append(d)
        ds = None
        if st.downsample is not None:
            ds = {"out_channels": st.downsample.out_channels, "kernel": st.downsample.kernel, "stride": st.downsample.stride}
        stages.append({"downsample": ds, "blocks": blocks})
    return {
        "v": CONFIG_VERSION,
        "name": cfg.name,
        "resolution": cfg.resolution,
        "num_classes": cfg.num_classes,
        "bn_eps": cfg.bn_eps,
        "in_channels": cfg.in_channels,
        "stem_widths": list(cfg.stem_widths),
        "stages": stages,
    }


def _expect(obj, typ, path):
    ok = isinstance(obj, typ) and not (typ in (int, (int, float)) and isinstance(obj, bool))
    if not ok:
        names = typ.__name__ if isinstance(typ, type) else "/".join(t.__name__ for t in typ)
        raise ConfigError(f"expected {names}, got {type(obj).__name__}", path)
    return obj


def _check_keys(d: dict, allowed, required, path):
    for k in d:
        if k not in allowed:
            raise ConfigError(f"unknown key {k!r}", f"{path}/{k}")
    for k in required:
        if k not in d:
            raise ConfigError("required key is missing", f"{path}/{k}")


def config_from_dict(d) -> ModelConfig:
    _expect(d, dict, "")
    _check_keys(d, _TOP_KEYS, ("v", "stem_widths", "stages"), "")
    if d["v"] != CONFIG_VERSION:
        raise ConfigError(f"unsupported schema version {d['v']!r}", "/v")
    stem = _expect(d["stem_widths"], list, "/stem_widths")
    for i, w in enumerate(stem):
        _expect(w, int, f"/stem_widths/{i}")
    stages = []
    for si, sd in enumerate(_expect(d["stages"], list, "/stages")):
        spath = f"/stages/{si}"
        _expect(sd, dict, spath)
        _check_keys(sd, {"downsample", "blocks"}, ("blocks",), spath)
        ds = sd.get("downsample")
        if ds is not None:
            _expect(ds, dict, f"{spath}/downsample")
            _check_keys(ds, {"out_channels", "kernel", "stride"}, ("out_channels",), f"{spath}/downsample")
            for k, v in ds.items():
                _expect(v, int, f"{spath}/downsample/{k}")
            ds = Downsample(**ds)
        blocks = []
        for bi, bd in enumerate(_expect(sd["blocks"], list, f"{spath}/blocks")):
            bpath = f"{spath}/blocks/{bi}"
            _expect(bd, dict, bpath)
            _check_keys(bd, set(_BLOCK_KEYS) | {"repeat"}, ("kind", "channels", "ratio"), bpath)
            if bd["kind"] not in BLOCK_KINDS:
                raise ConfigError(f"unknown block kind {bd['kind']!r}", f"{bpath}/kind")
            for k in ("channels", "ratio", "kernel", "head_dim", "window", "chunks", "repeat"):
                if k in bd:
                    _expect(bd[k], int, f"{bpath}/{k}")
            if "window_role" in bd:
                _expect(bd["window_role"], str, f"{bpath}/window_role")
            repeat = bd.get("repeat", 1)
            if repeat < 1:
                raise ConfigError("repeat must be positive", f"{bpath}/repeat")
            spec = BlockSpec(**{k: v for k, v in bd.items() if k != "repeat"})
            blocks.extend([spec] * repeat)
        stages.append(StageConfig(ds, tuple(blocks)))
    kwargs = {}
    for key, typ in (("name", str), ("resolution", int), ("num_classes", int), ("in_channels", int)):
        if key in d:
            kwargs[key] = _expect(d[key], typ, f"/{key}")
    if "bn_eps" in d:
        kwargs["bn_eps"] = float(_expect(d["bn_eps"], (int, float), "/bn_eps"))
    kwargs.setdefault("name", "custom")
    cfg = ModelConfig(stem_widths=tuple(stem), stages=tuple(stages), **kwargs)
    validate_config(cfg)
    return cfg


def save_config(cfg: ModelConfig, path=None) -> str:
    """JSON text for ``cfg``; also written to ``path`` when given."""
    text = json.dumps(config_to_dict(cfg), indent=2) + "\n"
    if path is not None:
        with open(path, "w", encoding="utf-8") as f:
            f.write(text)
    return text


def load_config(source) -> ModelConfig:
    """Parse a config from a path or from JSON text."""
    if isinstance(source, (str, os.PathLike)) and os.path.exists(source):
        with open(source, encoding="utf-8") as f:
            text = f.read()
    else:
        text = source
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc.msg} (line {exc.lineno})", "") from exc
    return config_from_dict(d)


# --- PPM ----------------------------------------------------------------------------

def read_ppm(path) -> np.ndarray:
    """Raw pixels of a binary P6 file with maxval 255, as uint8 [H, W, 3]."""
    try:
        with open(path, "rb") as f:
            buf = f.read()
    except OSError as exc:
        raise WeightIOError(f"cannot read image {path}: {exc.strerror}") from exc
    if buf[:2] != b"P6":
        raise WeightIOError("not a binary PPM (P6) file", offset=0)
    pos = 2
    fields = []
    while len(fields) < 3:
        # whitespace and comments between header fields
        while pos < len(buf) and (buf[pos:pos + 1].isspace() or buf[pos:pos + 1] == b"#"):
            if buf[pos:pos + 1] == b"#":
                end = buf.find(b"\n", pos)
                pos = len(buf) if end < 0 else end + 1
            else:
                pos += 1
        start = pos
        while pos < len(buf) and buf[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise WeightIOError("malformed PPM header", offset=pos)
        fields.append(int(buf[start:pos]))
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise WeightIOError("malformed PPM header", offset=pos)
    pos += 1
    width, height, maxval = fields
    if maxval != 255:
        raise WeightIOError(f"only maxval 255 is supported, got {maxval}", offset=pos)
    if width < 1 or height < 1:
        raise WeightIOError(f"bad image size {width}x{height}", offset=pos)
    need = width * height * 3
    if len(buf) - pos < need:
        raise WeightIOError(f"short pixel payload: {len(buf) - pos} of {need} bytes", offset=len(buf))
    return np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos).reshape(height, width, 3)


def write_ppm(path, pixels: np.ndarray):
    pixels = np.asarray(pixels, dtype=np.uint8)
    h, w, _ = pixels.shape
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (w, h))
        f.write(pixels.tobytes())


def load_image_ppm(path, mean: Sequence[float] = IMAGENET_MEAN, std: Sequence[float] = IMAGENET_STD) -> Tensor:
    """[1, 3, H, W] tensor with per-channel (x/255 - mean) / std."""
    px = read_ppm(path).astype(np.float32) / np.float32(255.0)
    m = np.asarray(mean, dtype=np.float32)
    s = np.asarray(std, dtype=np.float32)
    return Tensor(((px - m) / s).transpose(2, 0, 1)[None])


def encode_image_ppm(t: Tensor, mean: Sequence[float] = IMAGENET_MEAN, std: Sequence[float] = IMAGENET_STD) -> np.ndarray:
    """Inverse of :func:`load_image_ppm`: uint8 [H, W, 3] pixels."""
    m = np.asarray(mean, dtype=np.float32)[:, None, None]
    s = np.asarray(std, dtype=np.float32)[:, None, None]
    px = (t.data[0] * s + m) * np.float32(255.0)
    return np.clip(np.rint(px), 0, 255).astype(np.uint8).transpose(1, 2, 0)
