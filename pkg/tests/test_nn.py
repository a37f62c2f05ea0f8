import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from diamant.exceptions import ConfigError, ContractError, FormatError, ShapeError
from diamant.nn import (
    ConvBlock, ParamStore, add_conv, add_linear, batchnorm2d, init_params, layernorm, linear,
    load_checkpoint, multi_head_self_attention, patch_embed, patchify, save_checkpoint,
)
from diamant.nn.checkpoint import decode_checkpoint, encode_checkpoint
from diamant.tensor import Tape, Tensor, backward, concat, grad_check_params


def _leaf(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


# ------------------------------------------------------------------ batch norm

def test_batchnorm_identity_on_normalised_input():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(8, 3, 5, 5))
    x = (x - x.mean(axis=(0, 2, 3), keepdims=True)) / x.std(axis=(0, 2, 3), keepdims=True)
    out, _ = batchnorm2d(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)), (np.zeros(3), np.ones(3)))
    # eps=1e-5 inside the sqrt scales values by 1 - 5e-6
    np.testing.assert_allclose(out.data, x, rtol=1e-5, atol=1e-5)


def test_batchnorm_zero_gamma_gives_beta():
    x = Tensor(np.random.default_rng(1).normal(size=(4, 2, 3, 3)))
    beta = np.array([0.5, -2.0])
    out, _ = batchnorm2d(x, Tensor(np.zeros(2)), Tensor(beta), (np.zeros(2), np.ones(2)))
    np.testing.assert_allclose(out.data, np.broadcast_to(beta[None, :, None, None], x.shape))


def test_batchnorm_running_stats_momentum():
    rng = np.random.default_rng(2)
    x = rng.normal(3.0, 2.0, size=(6, 2, 4, 4))
    _, (m, v) = batchnorm2d(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), (np.zeros(2), np.ones(2)))
    n = 6 * 16
    bm = x.mean(axis=(0, 2, 3))
    bv = x.var(axis=(0, 2, 3)) * n / (n - 1)
    np.testing.assert_allclose(m, 0.1 * bm)
    np.testing.assert_allclose(v, 0.9 + 0.1 * bv)


def test_batchnorm_eval_is_pure():
    x = Tensor(np.random.default_rng(3).normal(size=(1, 2, 3, 3)))
    stats = (np.array([1.0, -1.0]), np.array([4.0, 0.25]))
    before = tuple(s.copy() for s in stats)
    out, after = batchnorm2d(x, Tensor(np.ones(2)), Tensor(np.zeros(2)), stats, "eval")
    for a, b in zip(after, before):
        np.testing.assert_array_equal(a, b)
    expected = (x.data - stats[0][None, :, None, None]) / np.sqrt(stats[1][None, :, None, None] + 1e-5)
    np.testing.assert_allclose(out.data, expected)


def test_batchnorm_single_item_train_rejected():
    with pytest.raises(ContractError):
        batchnorm2d(Tensor(np.ones((1, 2, 3, 3))), Tensor(np.ones(2)), Tensor(np.zeros(2)),
                    (np.zeros(2), np.ones(2)))


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_batchnorm_gradients(seed):
    rng = np.random.default_rng(seed)
    x, g, b = _leaf(rng.normal(size=(3, 2, 3, 3))), _leaf(rng.normal(size=2)), _leaf(rng.normal(size=2))
    w = rng.normal(size=(3, 2, 3, 3))

    def f():
        out, _ = batchnorm2d(x, g, b, (np.zeros(2), np.ones(2)))
        return (out * Tensor(w)).sum()

    errs = grad_check_params(f, {"x": x, "gamma": g, "beta": b})
    assert max(errs.values()) < 1e-4, errs


# ------------------------------------------------------------------ layer norm

def test_layernorm_constant_row_gives_beta():
    beta = np.array([1.0, 2.0, 3.0])
    out = layernorm(Tensor(np.full((2, 3), 7.0)), Tensor(np.ones(3)), Tensor(beta))
    np.testing.assert_allclose(out.data, np.tile(beta, (2, 1)))


def test_layernorm_identity_on_normalised_row():
    row = np.array([[-1.0, 1.0, -1.0, 1.0]])
    out = layernorm(Tensor(row), Tensor(np.ones(4)), Tensor(np.zeros(4)))
    np.testing.assert_allclose(out.data, row, atol=1e-5)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_layernorm_gradients(seed):
    rng = np.random.default_rng(seed)
    x, g, b = _leaf(rng.normal(size=(2, 3, 5))), _leaf(rng.normal(size=5)), _leaf(rng.normal(size=5))
    w = rng.normal(size=(2, 3, 5))
    errs = grad_check_params(lambda: (layernorm(x, g, b) * Tensor(w)).sum(), {"x": x, "g": g, "b": b})
    assert max(errs.values()) < 1e-5, errs


# ------------------------------------------------------------------ linear / patches

def test_linear_identity():
    x = np.random.default_rng(0).normal(size=(3, 4))
    np.testing.assert_array_equal(linear(Tensor(x), Tensor(np.eye(4)), Tensor(np.zeros(4))).data, x)


def test_linear_hand_case():
    out = linear(Tensor([1.0, 1.0]), Tensor([[1.0], [2.0]]), Tensor([3.0]))
    np.testing.assert_allclose(out.data, [6.0])


def test_linear_shape_mismatch():
    with pytest.raises(ShapeError):
        linear(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 1))))


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_linear_gradients(seed):
    rng = np.random.default_rng(seed)
    x, W, b = _leaf(rng.normal(size=(4, 3))), _leaf(rng.normal(size=(3, 2))), _leaf(rng.normal(size=2))
    w = rng.normal(size=(4, 2))
    errs = grad_check_params(lambda: (linear(x, W, b) * Tensor(w)).sum(), {"x": x, "W": W, "b": b})
    assert max(errs.values()) < 1e-5


@pytest.mark.parametrize("size, patch, tokens", [(32, 16, 4), (224, 16, 196), (32, 8, 16)])
def test_patch_token_count(size, patch, tokens):
    assert patchify(Tensor(np.zeros((1, 1, size, size), np.float32)), patch).shape == (1, tokens, patch * patch)


def test_patch_embed_identity_weights_recover_patches():
    rng = np.random.default_rng(0)
    img = rng.normal(size=(2, 3, 8, 8))
    p = 4
    dim = 3 * p * p
    W = np.concatenate([np.eye(dim), np.zeros((dim, 5))], axis=1)  # identity-extended
    tok = patch_embed(Tensor(img), p, Tensor(W)).data
    for b in range(2):
        for gi in range(2):
            for gj in range(2):
                raw = img[b, :, gi * p:(gi + 1) * p, gj * p:(gj + 1) * p].reshape(-1)
                np.testing.assert_array_equal(tok[b, gi * 2 + gj, :dim], raw)
                np.testing.assert_array_equal(tok[b, gi * 2 + gj, dim:], 0)


def test_patchify_indivisible():
    with pytest.raises(ShapeError):
        patchify(Tensor(np.zeros((1, 1, 10, 10))), 4)


# ------------------------------------------------------------------ attention

def _attn_params(rng, d):
    return (rng.normal(size=(d, 3 * d)), rng.normal(size=3 * d), rng.normal(size=(d, d)), rng.normal(size=d))


def naive_attention(x, h, wqkv, bqkv, wo, bo):
    B, T, d = x.shape
    dh = d // h
    out = np.zeros_like(x)
    attn = np.zeros((B, h, T, T))
    for b in range(B):
        qkv = x[b] @ wqkv + bqkv
        heads = []
        for i in range(h):
            q = qkv[:, i * dh:(i + 1) * dh]
            k = qkv[:, d + i * dh:d + (i + 1) * dh]
            v = qkv[:, 2 * d + i * dh:2 * d + (i + 1) * dh]
            s = np.zeros((T, T))
            for r in range(T):
                for c in range(T):
                    s[r, c] = sum(q[r, j] * k[c, j] for j in range(dh)) / math.sqrt(dh)
            e = np.exp(s - s.max(axis=1, keepdims=True))
            a = e / e.sum(axis=1, keepdims=True)
            attn[b, i] = a
            heads.append(np.array([[sum(a[r, c] * v[c, j] for c in range(T)) for j in range(dh)]
                                   for r in range(T)]))
        out[b] = np.concatenate(heads, axis=1) @ wo + bo
    return out, attn


@pytest.mark.parametrize("h", [1, 2])
def test_attention_matches_naive_loops(h):
    rng = np.random.default_rng(h)
    x = rng.normal(size=(2, 3, 4))
    params = _attn_params(rng, 4)
    out, attn = multi_head_self_attention(Tensor(x), h, *map(Tensor, params))
    ref_out, ref_attn = naive_attention(x, h, *params)
    assert np.max(np.abs(out.data - ref_out)) < 1e-6
    assert np.max(np.abs(attn.data - ref_attn)) < 1e-6


def test_attention_single_token():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(3, 1, 4))
    wqkv, bqkv, wo, bo = _attn_params(rng, 4)
    out, attn = multi_head_self_attention(Tensor(x), 2, Tensor(wqkv), Tensor(bqkv), Tensor(wo), Tensor(bo))
    np.testing.assert_array_equal(attn.data, np.ones((3, 2, 1, 1)))
    v = (x @ wqkv + bqkv)[..., 8:]
    np.testing.assert_allclose(out.data, v @ wo + bo, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 6), st.integers(0, 10_000), st.floats(0.1, 30.0))
def test_attention_rows_stochastic(T, seed, scale):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, T, 8)) * scale
    _, attn = multi_head_self_attention(Tensor(x), 2, *map(Tensor, _attn_params(rng, 8)))
    np.testing.assert_allclose(attn.data.sum(-1), 1.0, atol=1e-6)


def test_attention_head_divisibility():
    rng = np.random.default_rng(0)
    with pytest.raises(ConfigError):
        multi_head_self_attention(Tensor(rng.normal(size=(1, 2, 6))), 4, *map(Tensor, _attn_params(rng, 6)))


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_attention_gradients(seed):
    rng = np.random.default_rng(seed)
    x = _leaf(rng.normal(size=(2, 3, 4)))
    wqkv, bqkv, wo, bo = (p * 0.5 for p in _attn_params(rng, 4))
    leaves = {"x": x, "wqkv": _leaf(wqkv), "bq": _leaf(bqkv[:4]), "bv": _leaf(bqkv[8:]),
              "wo": _leaf(wo), "bo": _leaf(bo)}
    # the key bias shifts every score in a row equally, so it is held constant here
    bk = Tensor(bqkv[4:8])
    w = rng.normal(size=(2, 3, 4))

    def f():
        b = concat([leaves["bq"], bk, leaves["bv"]], axis=0)
        return (multi_head_self_attention(x, 2, leaves["wqkv"], b, leaves["wo"], leaves["bo"])[0] * Tensor(w)).sum()

    errs = grad_check_params(f, leaves)
    assert max(errs.values()) < 1e-5, errs


def test_attention_key_bias_has_no_gradient():
    rng = np.random.default_rng(5)
    wqkv, bqkv, wo, bo = _attn_params(rng, 4)
    b = _leaf(bqkv)
    with Tape() as tape:
        loss = multi_head_self_attention(Tensor(rng.normal(size=(1, 3, 4))), 2, Tensor(wqkv), b,
                                         Tensor(wo), Tensor(bo))[0].sum()
    g = backward(loss, tape)[b]
    assert np.max(np.abs(g[4:8])) < 1e-12
    assert np.max(np.abs(g[:4])) > 1e-6


# ------------------------------------------------------------------ param store / init

def test_init_deterministic_and_biases_zero():
    def make(seed):
        s = ParamStore()
        add_conv(s, "c", 3, 4, 3)
        add_linear(s, "l", 4, 2)
        return init_params(s, seed)

    a, b = make(7), make(7)
    for k in a.names():
        np.testing.assert_array_equal(a[k].data, b[k].data)
    assert not np.any(a["c.b"].data) and not np.any(a["l.b"].data)
    assert not np.array_equal(a["c.w"].data, make(8)["c.w"].data)


def test_init_weight_std():
    s = ParamStore()
    add_conv(s, "c", 64, 64, 3)
    init_params(s, 0)
    expected = math.sqrt(2 / 576)
    assert abs(s["c.w"].data.std() - expected) < 0.2 * expected


def test_store_counts_only_trainable():
    s = ParamStore()
    ConvBlock("blk", 1, 4).register(s)
    # conv 1->4 (36, no bias), bn (4+4), conv 4->4 (144), bn (4+4)
    assert s.total_params() == 36 + 8 + 144 + 8
    assert not s.is_trainable("blk.bn1.running_mean")


def test_store_order_and_duplicates():
    s = ParamStore()
    s.add("b", (1,))
    s.add("a", (1,))
    assert s.names() == ["b", "a"]
    with pytest.raises(ContractError):
        s.add("a", (2,))


def test_store_set_shape_checked():
    s = ParamStore()
    s.add("w", (2, 2))
    with pytest.raises(ContractError):
        s.set("w", np.zeros(3))


@pytest.mark.parametrize("hw", [(1, 1), (3, 5), (8, 8)])
def test_convblock_preserves_spatial_dims(hw):
    s = ParamStore()
    blk = ConvBlock("b", 2, 3).register(s)
    init_params(s, 0)
    out = blk(s, Tensor(np.ones((2, 2) + hw, np.float32)), train=True)
    assert out.shape == (2, 3) + hw


# ------------------------------------------------------------------ checkpoints

def _mixed_store():
    s = ParamStore(np.float64)
    ConvBlock("blk", 2, 3).register(s)
    add_linear(s, "fc", 3, 1)
    return init_params(s, 3)


def test_checkpoint_roundtrip(tmp_path):
    s = _mixed_store()
    save_checkpoint(tmp_path / "m.dmck", s, {"note": "x"})
    t, header = load_checkpoint(tmp_path / "m.dmck")
    assert header["note"] == "x"
    assert t.names() == s.names()
    assert set(header["frozen"]) == {k for k in s.names() if not s.is_trainable(k)}
    for k in s.names():
        assert t[k].data.tobytes() == s[k].data.tobytes()
        assert t.is_trainable(k) == s.is_trainable(k)


def test_checkpoint_magic_and_truncation():
    buf = encode_checkpoint(_mixed_store())
    assert buf[:4] == b"DMCK" and buf[4] == 1
    with pytest.raises(FormatError):
        decode_checkpoint(b"XXXX" + buf[4:])
    with pytest.raises(FormatError, match="offset"):
        decode_checkpoint(buf[:-3])
