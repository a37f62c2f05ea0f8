import itertools

import numpy as np
import pytest

from diamant.exceptions import ConfigError, ShapeError
from diamant.metrics import combined_loss, count_params, one_hot
from diamant.segnet import (
    ALL_SWITCHES, DiamantNet, SegNetConfig, SkipSwitches, build_network, model_forward,
)
from diamant.tensor import Tape, Tensor, backward, no_grad

from gradsuite import check_model

ABLATION_SWITCHES = ["0000", "0001", "0111", "1111"]


def _inputs(rng, B, C, h, hw, dtype=np.float32):
    return rng.normal(size=(B, C, hw, hw)).astype(dtype), rng.random((B, h, hw, hw)).astype(dtype)


# ------------------------------------------------------------------ switches

def test_switch_parsing_and_orientation():
    s = SkipSwitches.parse("1000")
    assert s[1] and not s[4]
    assert str(SkipSwitches.parse([0, 0, 0, 1])) == "0001"
    assert len(ALL_SWITCHES) == 16 and len(set(ALL_SWITCHES)) == 16
    for bad in ("101", "10a1", [1, 0, 1]):
        with pytest.raises(ConfigError):
            SkipSwitches.parse(bad)


# ------------------------------------------------------------------ build

def test_dual_full_resolution_output_shape():
    cfg = SegNetConfig(in_channels=1, heads=6, classes=9, base_width=2, variant="dual")
    net, store, _ = build_network(cfg)
    x, a = _inputs(np.random.default_rng(0), 1, 1, 6, 224)
    with no_grad():
        out = net.forward(store, x, a)
    assert out.shape == (1, 9, 224, 224)


def test_single_first_conv_sees_image_plus_heads():
    _, store, arch = build_network(SegNetConfig(1, 6, 9, 4, "single"))
    assert store["enc.down1.conv1.w"].shape[1] == 7
    assert arch["layers"][0]["in"] == 7


def _hand_count(C, h, N, b, variant):
    def conv(cin, cout, k, bias):
        return cin * cout * k * k + (cout if bias else 0)

    def block(cin, cout):
        return conv(cin, cout, 3, False) + 2 * cout + conv(cout, cout, 3, False) + 2 * cout

    def encoder(cin):
        return block(cin, b) + block(b, 2 * b) + block(2 * b, 4 * b) + block(4 * b, 8 * b) + block(8 * b, 16 * b)

    skips = 3 if variant == "dual" else 2
    decoder = (conv(16 * b, 8 * b, 2, True) + block(skips * 8 * b, 8 * b)
               + conv(8 * b, 4 * b, 2, True) + block(skips * 4 * b, 4 * b)
               + conv(4 * b, 2 * b, 2, True) + block(skips * 2 * b, 2 * b)
               + conv(2 * b, b, 2, True) + block(skips * b, b)
               + conv(b, N, 1, True))
    if variant == "dual":
        return encoder(C) + encoder(h) + block(32 * b, 16 * b) + decoder
    return encoder(C + h) + decoder


@pytest.mark.parametrize("variant", ["dual", "single"])
def test_toy_param_count_matches_hand_count(variant):
    _, store, _ = build_network(SegNetConfig(1, 6, 9, 8, variant))
    assert count_params(store) == _hand_count(1, 6, 9, 8, variant)


def test_toy_dual_param_count_literal():
    # base 8, C=1, h=6, N=9; see _hand_count for the breakdown
    _, store, _ = build_network(SegNetConfig(1, 6, 9, 8, "dual"))
    assert count_params(store) == 1_274_081


@pytest.mark.parametrize("bad", [dict(variant="triple"), dict(base_width=0), dict(classes=1), dict(heads=0)])
def test_invalid_config(bad):
    with pytest.raises(ConfigError):
        SegNetConfig(**{"in_channels": 1, "heads": 2, "classes": 3, "base_width": 4, **bad})


# ------------------------------------------------------------------ encoder

def test_encoder_skip_resolutions():
    net, store, _ = build_network(SegNetConfig(1, 2, 3, 2, "dual"))
    x, _ = _inputs(np.random.default_rng(0), 2, 1, 2, 64)
    with no_grad():
        b, skips = net.encode(store, Tensor(x), False)
    assert [s.shape[-1] for s in skips] == [64, 32, 16, 8]
    assert [s.shape[1] for s in skips] == [2, 4, 8, 16]
    assert b.shape == (2, 32, 4, 4)


def test_encoder_rejects_indivisible_size():
    net, store, _ = build_network(SegNetConfig(1, 2, 3, 2, "dual"))
    with pytest.raises(ShapeError):
        net.encode(store, Tensor(np.zeros((1, 1, 40, 40), np.float32)), False)


def test_twin_encoders_with_shared_weights_agree():
    cfg = SegNetConfig(in_channels=2, heads=2, classes=3, base_width=2, variant="dual")
    net, store, _ = build_network(cfg)
    for name in store.names():
        if name.startswith("enc_a."):
            store.set(name, store["enc_x." + name[len("enc_a."):]].data)
    x = Tensor(np.random.default_rng(1).normal(size=(2, 2, 32, 32)).astype(np.float32))
    with no_grad():
        bx, sx = net.encode(store, x, False, 0)
        ba, sa = net.encode(store, x, False, 1)
    np.testing.assert_array_equal(bx.data, ba.data)
    for p, q in zip(sx, sa):
        np.testing.assert_array_equal(p.data, q.data)


@pytest.mark.parametrize("train", [False, True])
def test_zero_input_zero_biases_gives_zero_activations(train):
    net, store, _ = build_network(SegNetConfig(1, 2, 3, 2, "dual"))
    with no_grad():
        b, skips = net.encode(store, Tensor(np.zeros((2, 1, 32, 32), np.float32)), train)
    assert not np.any(b.data) and not any(np.any(s.data) for s in skips)


# ------------------------------------------------------------------ gating

@pytest.fixture(scope="module")
def dual64():
    cfg = SegNetConfig(1, 3, 4, 2, "dual")
    net = DiamantNet(cfg)
    return net, net.build(3, np.float64)


def test_all_off_equals_zeroed_attention_skips(dual64):
    net, store = dual64
    x, a = _inputs(np.random.default_rng(0), 2, 1, 3, 32, np.float64)
    with no_grad():
        off = net.forward(store, x, a, "0000")
        bx, sx = net.encode(store, Tensor(x), False, 0)
        ba, sa = net.encode(store, Tensor(a), False, 1)
        zeroed = [Tensor(np.zeros_like(s.data)) for s in sa]
        on = net.decode(store, net.bottleneck(store, [bx, ba], False), sx, zeroed, "1111", False)
    np.testing.assert_array_equal(off.data, on.data)


def test_switches_change_output(dual64):
    net, store = dual64
    x, a = _inputs(np.random.default_rng(1), 2, 1, 3, 32, np.float64)
    with no_grad():
        outs = {s: net.forward(store, x, a, s).data for s in ABLATION_SWITCHES}
    for s, t in itertools.combinations(ABLATION_SWITCHES, 2):
        assert not np.allclose(outs[s], outs[t])


def test_all_off_attention_reaches_logits_only_through_bottleneck(dual64):
    net, store = dual64
    rng = np.random.default_rng(2)
    x, a = _inputs(rng, 2, 1, 3, 32, np.float64)
    a2 = rng.random(a.shape)

    def run(attn, zero_bottleneck_half):
        with no_grad():
            bx, sx = net.encode(store, Tensor(x), False, 0)
            ba, sa = net.encode(store, Tensor(attn), False, 1)
            if zero_bottleneck_half:
                ba = Tensor(np.zeros_like(ba.data))
            return net.decode(store, net.bottleneck(store, [bx, ba], False), sx, sa, "0000", False).data

    assert not np.allclose(run(a, False), run(a2, False))
    np.testing.assert_array_equal(run(a, True), run(a2, True))


def test_param_count_invariant_over_switches():
    cfg = SegNetConfig(1, 3, 4, 4, "dual")
    counts = set()
    for s in ALL_SWITCHES:
        net, store, _ = build_network(cfg)
        x, a = _inputs(np.random.default_rng(0), 2, 1, 3, 16)
        with no_grad():
            assert net.forward(store, x, a, s).shape == (2, 4, 16, 16)
        counts.add(count_params(store))
    assert len(counts) == 1


@pytest.mark.parametrize("switches", ABLATION_SWITCHES)
def test_ablation_switches_train_one_step(switches):
    net, store, _ = build_network(SegNetConfig(1, 2, 3, 2, "dual"))
    rng = np.random.default_rng(0)
    x, a = _inputs(rng, 2, 1, 2, 16)
    y = one_hot(rng.integers(0, 3, (2, 16, 16)), 3)
    with Tape() as tape:
        loss = combined_loss(net.forward(store, x, a, switches, True), y)
    grads = backward(loss, tape)
    assert np.isfinite(loss.item())
    # the attention skip at an open switch receives no gradient through the decoder's skip path,
    # but every trainable tensor still appears (encoder via bottleneck)
    assert all(t in grads for t in store.trainable().values())


# ------------------------------------------------------------------ model_forward

def test_single_variant_is_unet_on_concatenation():
    cfg = SegNetConfig(1, 2, 3, 2, "single")
    net, store, _ = build_network(cfg)
    x, a = _inputs(np.random.default_rng(0), 2, 1, 2, 32)
    with no_grad():
        got = model_forward(x, a, cfg, store, "0101")
        b, skips = net.encode(store, Tensor(np.concatenate([x, a], axis=1)), False)
        ref = net.decode(store, b, skips, None, "1111", False)
    np.testing.assert_array_equal(got.data, ref.data)


@pytest.mark.parametrize("variant", ["single", "dual"])
def test_output_shape_contract(variant):
    cfg = SegNetConfig(2, 3, 5, 2, variant)
    net, store, _ = build_network(cfg)
    for hw in (16, 48):
        x, a = _inputs(np.random.default_rng(hw), 3, 2, 3, hw)
        with no_grad():
            assert net.forward(store, x, a).shape == (3, 5, hw, hw)


def test_head_count_mismatch():
    cfg = SegNetConfig(1, 3, 4, 2, "dual")
    _, store, _ = build_network(cfg)
    x, a = _inputs(np.random.default_rng(0), 1, 1, 2, 16)
    with pytest.raises(ShapeError):
        model_forward(x, a, cfg, store)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_single_model_gradients(seed):
    err64, err32, checked, skipped = check_model("single", seed)
    assert skipped <= 0.2 * checked
    assert err64 < 1e-5
    assert err32 < 1e-3
