from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import bn as random_bn
from helpers import mha_params, shma_params
from iformer.attention import MhaParams
from iformer.config import PRESETS, BlockSpec, ModelConfig, StageConfig, preset_config
from iformer.fusion import (
    count_macs,
    count_params,
    ffn_complexity_formula,
    fold_bn_into_conv,
    fold_bn_into_linear,
    fuse_model,
    fusion_drift,
    layer_macs,
    randomize_bn_statistics,
    shma_complexity_formula,
)
from iformer.model import build_model
from iformer.ops import ConvParams, batchnorm_infer, conv2d, linear
from iformer.tensor import Tensor


# --- folding ----------------------------------------------------------------

@pytest.mark.parametrize("groups,bias", [(1, False), (1, True), (4, False), (2, True)])
def test_fold_conv_matches_conv_then_bn(groups, bias):
    rng = np.random.default_rng(groups + 10 * bias)
    cin = cout = 4
    conv = ConvParams(
        Tensor(rng.normal(size=(cout, cin // groups, 3, 3))),
        Tensor(rng.normal(size=cout)) if bias else None, stride=2, padding=1, groups=groups,
    )
    bn = random_bn(rng, cout)
    x = Tensor(rng.normal(size=(2, cin, 7, 7)))
    want = batchnorm_infer(conv2d(x, conv), bn)
    folded = fold_bn_into_conv(conv, bn)
    assert folded.bias is not None and folded.groups == groups and folded.stride == 2
    assert np.max(np.abs(conv2d(x, folded).data - want.data)) <= 1e-5


def test_fold_linear_bn_first():
    rng = np.random.default_rng(1)
    bn = random_bn(rng, 6)
    w, b = Tensor(rng.normal(size=(3, 6))), Tensor(rng.normal(size=3))
    x = Tensor(rng.normal(size=(4, 6)))
    want = linear(batchnorm_infer(x, bn), w, b)
    w2, b2 = fold_bn_into_linear(bn, w, b)
    np.testing.assert_allclose(linear(x, w2, b2).data, want.data, rtol=1e-5, atol=1e-5)


def test_fold_channel_mismatch():
    rng = np.random.default_rng(2)
    with pytest.raises(ValueError):
        fold_bn_into_conv(ConvParams(Tensor(np.ones((2, 2, 1, 1)))), random_bn(rng, 3))


@pytest.fixture(scope="module", params=sorted(PRESETS))
def noisy_pair(request):
    m = randomize_bn_statistics(build_model(preset_config(request.param), 0), seed=7)
    return m, fuse_model(m)


def test_fused_model_equivalence(noisy_pair):
    m, fused = noisy_pair
    res = m.config.resolution
    x = Tensor(np.random.default_rng(3).normal(size=(1, 3, res, res)))
    per_layer, logits = fusion_drift(m, fused, x)
    assert len(per_layer) == len(list(m.layers()))
    worst = max(d for _, d in per_layer)
    assert worst <= 1e-4
    assert logits <= 1e-3
    assert fused.batchnorms() == []
    assert not any(".bn." in n for n, _ in fused.named_tensors())


def test_fused_weights_reload():
    m = randomize_bn_statistics(build_model(preset_config("iformer-t"), 0), seed=1)
    fused = fuse_model(m)
    again = build_model(m.config, fused.state_dict())
    x = Tensor(np.random.default_rng(0).normal(size=(1, 3, 224, 224)))
    assert again(x).bit_equal(fused(x))


def test_randomized_bn_is_not_identity():
    m = randomize_bn_statistics(build_model(preset_config("iformer-t"), 0), seed=1)
    g = m.state_dict()["stem.0.bn.gamma"].data
    assert np.all((g >= 0.5) & (g <= 1.5)) and np.std(g) > 0.1


# --- parameter accounting ---------------------------------------------------

def params_from_config(cfg: ModelConfig) -> int:
    """Closed-form parameter count straight from the architecture description."""

    def convbn(cin, cout, k, groups=1):
        return cin // groups * cout * k * k + 2 * cout

    w0, w1, w2 = cfg.stem_widths
    total = convbn(cfg.in_channels, w0, 5) + convbn(w0, w1, 5) + convbn(w1, w2, 1)
    c_prev = w2
    for stage in cfg.stages:
        if stage.downsample:
            total += convbn(c_prev, stage.downsample.out_channels, 3)
        for b in stage.blocks:
            c, r = b.channels, b.ratio
            total += convbn(c, r * c, 1) + convbn(r * c, c, 1)
            if b.kind == "conv-block":
                total += convbn(c, c, b.kernel, groups=c)
            elif b.kind in ("shma-block", "window-shma-block"):
                total += 9 * c + c  # CPE weight + bias
                total += 2 * convbn(c, b.head_dim, 1) + 3 * convbn(c, c, 1)
            else:
                total += 4 * convbn(c, c, 1)
        c_prev = stage.channels
    return total + 2 * c_prev + c_prev * cfg.num_classes + cfg.num_classes


@pytest.mark.parametrize("name", sorted(PRESETS))
def test_param_count_matches_closed_form(name):
    cfg = preset_config(name)
    assert count_params(build_model(cfg, 0)) == params_from_config(cfg)


@pytest.mark.parametrize("name,target", [("iformer-t", 2.9), ("iformer-s", 6.5), ("iformer-m", 8.9), ("iformer-l", 14.7)])
def test_param_targets(name, target):
    p = count_params(build_model(preset_config(name), 0)) / 1e6
    assert abs(p - target) / target <= 0.02


def test_running_stats_are_not_parameters():
    m = build_model(preset_config("iformer-t"), 0)
    n_all = sum(t.size for _, t in m.named_tensors())
    n_stats = sum(t.size for n, t in m.named_tensors() if "running" in n)
    assert count_params(m) == n_all - n_stats
    assert count_params(fuse_model(m)) < count_params(m)


# --- MAC accounting ---------------------------------------------------------

def test_single_conv_hand_count():
    conv = ConvParams(Tensor(np.ones((1, 1, 3, 3))), padding=1)
    assert layer_macs(conv, (1, 1, 4, 4)) == (144, (1, 1, 4, 4))


def test_conv_mac_rule_random():
    rng = np.random.default_rng(4)
    for _ in range(20):
        groups = int(rng.choice([1, 2, 4]))
        cin, cout = groups * int(rng.integers(1, 4)), groups * int(rng.integers(1, 4))
        k, s, p = int(rng.choice([1, 3, 5])), int(rng.integers(1, 3)), int(rng.integers(0, 3))
        h = int(rng.integers(k, 12))
        conv = ConvParams(Tensor(np.ones((cout, cin // groups, k, k))), stride=s, padding=p, groups=groups)
        ho = (h + 2 * p - k) // s + 1
        macs, shape = layer_macs(conv, (1, cin, h, h))
        assert shape == (1, cout, ho, ho)
        assert macs == ho * ho * cout * k * k * cin // groups


def macs_from_config(cfg: ModelConfig, res: int) -> int:
    h = res
    total = 0
    w0, w1, w2 = cfg.stem_widths
    h //= 2
    total += h * h * w0 * 25 * cfg.in_channels
    h //= 2
    total += h * h * w1 * 25 * w0 + h * h * w2 * w1
    c_prev = w2
    for stage in cfg.stages:
        if stage.downsample:
            h //= 2
            total += h * h * stage.downsample.out_channels * 9 * c_prev
        windowed = False
        for b in stage.blocks:
            c, hw = b.channels, h * h
            total += 2 * b.ratio * hw * c * c
            if b.kind == "conv-block":
                total += hw * c * b.kernel ** 2
                continue
            if b.kind == "mha-block" or b.kind == "sha-block":
                total += 4 * hw * c * c + hw * hw * 2 * c
                continue
            total += 9 * hw * c  # CPE
            if b.window_role == "partition-entry":
                windowed = True
            if b.window_role == "reverse-exit":
                windowed = False
            tokens = b.window ** 2 if windowed else hw
            total += 3 * hw * c * c + 2 * hw * c * b.head_dim + hw * c + tokens * hw * (b.head_dim + c)
        c_prev = stage.channels
    return total + c_prev * cfg.num_classes


@pytest.mark.parametrize("name", sorted(PRESETS))
def test_mac_count_matches_closed_form(name):
    cfg = preset_config(name)
    assert count_macs(build_model(cfg, 0)) == macs_from_config(cfg, cfg.resolution)


def test_mac_count_of_preset_m():
    assert abs(count_macs(build_model(preset_config("iformer-m"), 0)) / 1e9 - 1.64) / 1.64 <= 0.05


def conv_only(cfg):
    stages = tuple(
        StageConfig(stage.downsample, tuple(b for b in stage.blocks if b.kind == "conv-block") or
                    (BlockSpec("conv-block", stage.channels, 2, kernel=7),))
        for stage in cfg.stages
    )
    return replace(cfg, stages=stages)


def test_mac_scaling_law():
    m = build_model(conv_only(preset_config("iformer-t")), 0)
    head = m.config.num_classes * m.config.stages[-1].channels
    body = lambda r: count_macs(m, r) - head
    assert body(448) == 4 * body(224)
    att = build_model(preset_config("iformer-t"), 0)
    head = 1000 * 256
    assert count_macs(att, 448) - head > 4 * (count_macs(att, 224) - head)


def test_macs_are_additive():
    m = build_model(preset_config("iformer-s"), 0)
    shape = (1, 3, 224, 224)
    total = 0
    for layer in m.stem:
        macs, shape = layer_macs(layer, shape)
        total += macs
    for stage in m.stages:
        for layer in stage.layers():
            macs, shape = layer_macs(layer, shape)
            total += macs
    total += layer_macs(m.head, shape)[0]
    assert total == count_macs(m)


@settings(max_examples=10, deadline=None)
@given(st.integers(1, 8), st.integers(1, 8), st.sampled_from([1, 2, 3, 4]), st.integers(1, 6),
       st.sampled_from([None, 1, 2]), st.integers(0, 1000))
def test_shma_formula_matches_counter(h, w, r, c_mult, p, seed):
    c = r * c_mult * 2
    if p is not None and (h % p or w % p):
        p = None
    params = shma_params(np.random.default_rng(seed), c, c // r)
    if p is None:
        macs, _ = layer_macs(params, (1, c, h, w))
    else:
        macs, _ = layer_macs(params, ((h // p) * (w // p), c, p, p))
    assert macs == shma_complexity_formula(h, w, c, p, r)


def test_formula_special_cases():
    h, w, c, p = 14, 14, 192, 7
    hwc = h * w * c
    # R = 1: attention term is 2 P^2 HWC
    assert shma_complexity_formula(h, w, c, p, 1) - 5 * hwc * c - hwc == 2 * p * p * hwc
    # R = 2: projections are 4 HWC^2
    assert shma_complexity_formula(h, w, c, None, 2) == 4 * hwc * c + hwc + (h * w) * hwc * 3 // 2
    with pytest.raises(ValueError):
        shma_complexity_formula(14, 14, 192, 5)
    with pytest.raises(ValueError):
        shma_complexity_formula(4, 4, 10, None, 4)


def test_ffn_formula_matches_counter():
    m = build_model(preset_config("iformer-m"), 0)
    block = m.stages[2].blocks[0]
    assert block.ffn.fc1.conv.out_channels == 4 * 192
    assert layer_macs(block.ffn, (1, 192, 14, 14))[0] == ffn_complexity_formula(14, 14, 192) == 8 * 14 * 14 * 192 ** 2


def test_mha_macs():
    rng = np.random.default_rng(0)
    p = mha_params(rng, 8, 2)
    assert isinstance(p, MhaParams)
    assert layer_macs(p, (1, 8, 3, 3))[0] == 4 * 9 * 64 + 81 * 16
