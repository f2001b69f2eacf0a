import json
import struct
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from iformer.config import PRESETS, preset_config
from iformer.errors import ConfigError, WeightIOError
from iformer.model import build_model
from iformer.model_io import (
    WeightStore,
    config_from_dict,
    config_to_dict,
    decode_weights,
    encode_image_ppm,
    encode_weights,
    load_config,
    load_image_ppm,
    load_weights,
    read_ppm,
    save_config,
    save_weights,
    write_ppm,
)
from iformer.tensor import Tensor


# --- IFW1 -------------------------------------------------------------------

def test_empty_store_layout(tmp_path):
    path = tmp_path / "empty.ifw"
    save_weights(WeightStore(), path)
    raw = path.read_bytes()
    # header plus the CRC32 footer
    assert raw[:8] == b"IFW1" + b"\0\0\0\0"
    assert len(raw) == 12
    assert raw[8:] == struct.pack("<I", zlib.crc32(raw[:8]))
    assert len(load_weights(path)) == 0


def test_single_tensor_exact_bytes(tmp_path):
    t = Tensor([[1.0, -2.0], [0.5, 3.25]])
    store = WeightStore([("w", t)])
    raw = encode_weights(store)
    body = b"IFW1" + struct.pack("<I", 1) + struct.pack("<H", 1) + b"w" + struct.pack("<BII", 2, 2, 2)
    body += struct.pack("<4f", 1.0, -2.0, 0.5, 3.25)
    assert raw == body + struct.pack("<I", zlib.crc32(body))
    path = tmp_path / "one.ifw"
    save_weights(store, path)
    back = load_weights(path)
    assert back.names() == ["w"] and back["w"].bit_equal(t)


def test_model_store_roundtrip_bit_exact(tmp_path):
    m = build_model(preset_config("iformer-t"), 3)
    store = WeightStore.from_model(m)
    path = tmp_path / "t.ifw"
    save_weights(store, path)
    back = load_weights(path)
    assert back == store
    assert back.names() == [n for n, _ in m.named_tensors()]


def test_unicode_names_and_special_values():
    store = WeightStore([
        ("blöck.γ", Tensor([np.inf, -np.inf, -0.0])),
        ("nan", Tensor([np.nan])),
        ("tiny", Tensor([np.float32(1e-45)])),
    ])
    back = decode_weights(encode_weights(store))
    assert back.names() == store.names()
    for n in store.names():
        assert back[n].data.tobytes() == store[n].data.tobytes()


names = st.text(st.characters(blacklist_categories=("Cs",)), min_size=1, max_size=12)
tensors = st.lists(st.integers(1, 3), min_size=1, max_size=4).flatmap(
    lambda shape: st.lists(st.floats(width=32, allow_nan=False), min_size=int(np.prod(shape)),
                           max_size=int(np.prod(shape))).map(lambda v: Tensor(np.array(v, dtype=np.float32).reshape(shape)))
)


@settings(max_examples=60, deadline=None)
@given(st.dictionaries(names, tensors, max_size=5))
def test_roundtrip_property(entries):
    store = WeightStore(entries.items())
    assert decode_weights(encode_weights(store)) == store


def test_bad_magic():
    raw = bytearray(encode_weights(WeightStore([("a", Tensor([1.0]))])))
    raw[0:4] = b"IFW2"
    with pytest.raises(WeightIOError, match="magic") as exc:
        decode_weights(bytes(raw))
    assert exc.value.offset == 0


def test_truncation_is_reported_with_offset():
    raw = encode_weights(WeightStore([("a", Tensor(np.ones(8)))]))
    for cut in (2, 6, 10, len(raw) - 6):
        with pytest.raises(WeightIOError) as exc:
            decode_weights(raw[:cut])
        assert exc.value.offset is not None and "at byte" in str(exc.value)


def _with_crc(body: bytes) -> bytes:
    return body + struct.pack("<I", zlib.crc32(body))


def test_truncated_payload_with_valid_checksum():
    # a file whose checksum is fine but whose entry claims more data than exists
    body = b"IFW1" + struct.pack("<I", 1) + struct.pack("<H", 1) + b"a" + struct.pack("<BI", 1, 4) + struct.pack("<2f", 1, 2)
    with pytest.raises(WeightIOError, match="truncated") as exc:
        decode_weights(_with_crc(body))
    assert exc.value.offset == 4 + 4 + 2 + 1 + 1 + 4


def test_duplicate_names_rejected():
    entry = struct.pack("<H", 1) + b"a" + struct.pack("<BI", 1, 1) + struct.pack("<f", 1)
    body = b"IFW1" + struct.pack("<I", 2) + entry + entry
    with pytest.raises(WeightIOError, match="duplicate") as exc:
        decode_weights(_with_crc(body))
    assert exc.value.offset == 8 + len(entry)
    with pytest.raises(ValueError):
        WeightStore([("a", Tensor([1.0])), ("a", Tensor([2.0]))])


def test_trailing_bytes_rejected():
    body = encode_weights(WeightStore([("a", Tensor([1.0]))]))[:-4] + b"\0"
    with pytest.raises(WeightIOError, match="trailing"):
        decode_weights(_with_crc(body))


def test_every_single_byte_flip_is_detected():
    raw = encode_weights(WeightStore([("w", Tensor(np.arange(6, dtype=np.float32).reshape(2, 3))), ("b", Tensor([0.5]))]))
    rng = np.random.default_rng(0)
    for pos in range(len(raw)):
        flipped = bytearray(raw)
        flipped[pos] ^= int(rng.integers(1, 256))
        with pytest.raises(WeightIOError):
            decode_weights(bytes(flipped))


def test_payload_corruption_names_checksum():
    raw = bytearray(encode_weights(WeightStore([("w", Tensor(np.ones(4)))])))
    raw[20] ^= 0x01
    with pytest.raises(WeightIOError, match="checksum"):
        decode_weights(bytes(raw))


def test_missing_file(tmp_path):
    with pytest.raises(WeightIOError):
        load_weights(tmp_path / "nope.ifw")


# --- config JSON ------------------------------------------------------------

@pytest.mark.parametrize("name", sorted(PRESETS))
def test_config_roundtrip(name, tmp_path):
    cfg = preset_config(name)
    path = tmp_path / "cfg.json"
    text = save_config(cfg, path)
    assert json.loads(text)["v"] == 1
    assert load_config(path) == cfg
    assert load_config(text) == cfg


def test_repeat_compression():
    d = config_to_dict(preset_config("iformer-s"))
    s3 = d["stages"][2]["blocks"]
    assert [b.get("repeat", 1) for b in s3] == [9, 3, 1]


def test_hand_written_t_config_matches_preset():
    text = """
    {
      "v": 1,
      "name": "iformer-t",
      "stem_widths": [16, 64, 32],
      "stages": [
        {"blocks": [{"kind": "conv-block", "channels": 32, "ratio": 3, "kernel": 7, "repeat": 2}]},
        {"downsample": {"out_channels": 64},
         "blocks": [{"kind": "conv-block", "channels": 64, "ratio": 3, "kernel": 7, "repeat": 2}]},
        {"downsample": {"out_channels": 128},
         "blocks": [
           {"kind": "conv-block", "channels": 128, "ratio": 3, "kernel": 7, "repeat": 6},
           {"kind": "shma-block", "channels": 128, "ratio": 2, "head_dim": 64, "repeat": 3},
           {"kind": "conv-block", "channels": 128, "ratio": 3, "kernel": 7}
         ]},
        {"downsample": {"out_channels": 256},
         "blocks": [{"kind": "shma-block", "channels": 256, "ratio": 2, "head_dim": 64, "repeat": 2}]}
      ]
    }
    """
    cfg = load_config(text)
    assert cfg == preset_config("iformer-t")
    a, b = build_model(cfg, 4), build_model(preset_config("iformer-t"), 4)
    assert WeightStore.from_model(a) == WeightStore.from_model(b)


def test_missing_stages_names_path():
    d = config_to_dict(preset_config("iformer-t"))
    del d["stages"]
    with pytest.raises(ConfigError) as exc:
        config_from_dict(d)
    assert exc.value.path == "/stages"
    assert str(exc.value).startswith("/stages")


@pytest.mark.parametrize("mutate,path", [
    (lambda d: d.update(colour="red"), "/colour"),
    (lambda d: d["stages"][1].update(extra=1), "/stages/1/extra"),
    (lambda d: d["stages"][2]["blocks"][1].update(dropout=0.1), "/stages/2/blocks/1/dropout"),
    (lambda d: d["stages"][2]["blocks"][0].update(channels="128"), "/stages/2/blocks/0/channels"),
    (lambda d: d["stages"][2]["blocks"][0].update(kind="lstm"), "/stages/2/blocks/0/kind"),
    (lambda d: d["stages"][3]["downsample"].update(out_channels=True), "/stages/3/downsample/out_channels"),
    (lambda d: d.update(v=2), "/v"),
    (lambda d: d["stages"][0]["blocks"][0].pop("ratio"), "/stages/0/blocks/0/ratio"),
    (lambda d: d["stages"][0]["blocks"][0].update(repeat=0), "/stages/0/blocks/0/repeat"),
])
def test_schema_violations_name_json_path(mutate, path):
    d = config_to_dict(preset_config("iformer-t"))
    mutate(d)
    with pytest.raises(ConfigError) as exc:
        config_from_dict(d)
    assert exc.value.path == path


def test_semantic_errors_from_json():
    d = config_to_dict(preset_config("iformer-t"))
    d["stages"][2]["blocks"][0]["channels"] = 100
    with pytest.raises(ConfigError, match="/stages/2/blocks/0/channels"):
        config_from_dict(d)
    with pytest.raises(ConfigError, match="invalid JSON"):
        load_config("{not json")


# --- PPM --------------------------------------------------------------------

def test_white_pixel_unit_normalization(tmp_path):
    path = tmp_path / "w.ppm"
    write_ppm(path, np.full((1, 1, 3), 255, dtype=np.uint8))
    t = load_image_ppm(path, mean=(0, 0, 0), std=(1, 1, 1))
    assert t.shape == (1, 3, 1, 1)
    assert t.data.ravel().tolist() == [1.0, 1.0, 1.0]


def test_black_image_default_normalization(tmp_path):
    path = tmp_path / "k.ppm"
    write_ppm(path, np.zeros((2, 3, 3), dtype=np.uint8))
    t = load_image_ppm(path)
    assert t.shape == (1, 3, 2, 3)
    for c, (m, s) in enumerate(zip((0.485, 0.456, 0.406), (0.229, 0.224, 0.225))):
        np.testing.assert_allclose(t.data[0, c], -m / s, rtol=1e-6)


def test_channel_order_and_layout(tmp_path):
    px = np.zeros((2, 2, 3), dtype=np.uint8)
    px[0, 1] = (255, 0, 0)
    path = tmp_path / "r.ppm"
    write_ppm(path, px)
    t = load_image_ppm(path, (0, 0, 0), (1, 1, 1))
    assert t.data[0, 0, 0, 1] == 1.0 and t.data[0, 1, 0, 1] == 0.0 and t.data[0, 0, 1, 0] == 0.0


def test_ppm_payload_roundtrip_is_byte_identical(tmp_path):
    rng = np.random.default_rng(0)
    px = rng.integers(0, 256, (5, 7, 3), dtype=np.uint8)
    path = tmp_path / "x.ppm"
    write_ppm(path, px)
    np.testing.assert_array_equal(read_ppm(path), px)
    np.testing.assert_array_equal(encode_image_ppm(load_image_ppm(path)), px)


def test_ppm_header_with_comments(tmp_path):
    path = tmp_path / "c.ppm"
    path.write_bytes(b"P6\n# made by hand\n2 1\n# max\n255\n" + bytes([1, 2, 3, 4, 5, 6]))
    assert read_ppm(path).tolist() == [[[1, 2, 3], [4, 5, 6]]]


@pytest.mark.parametrize("raw", [
    b"P3\n1 1\n255\n0 0 0\n",
    b"P6\n1 x\n255\n\0\0\0",
    b"P6\n1 1\n65535\n\0\0\0\0\0\0",
    b"P6\n2 2\n255\n\0\0\0",
    b"P6\n1",
])
def test_bad_ppm(tmp_path, raw):
    path = tmp_path / "bad.ppm"
    path.write_bytes(raw)
    with pytest.raises(WeightIOError):
        load_image_ppm(path)
