import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from diamant.dino import (
    DinoState, DistillConfig, cosine_lambda, dino_loss, dino_train, dino_train_step, ema_update,
    make_views, project, sharpen,
)
from diamant.exceptions import ConfigError, ContractError
from diamant.nn import ParamStore
from diamant.tensor import Tape, Tensor, backward, no_grad
from diamant.vit import ViTConfig


def _softmax(z):
    e = np.exp(z - z.max(-1, keepdims=True))
    return e / e.sum(-1, keepdims=True)


def test_sharpen_equal_logits_uniform():
    np.testing.assert_allclose(sharpen(Tensor(np.full((2, 5), 3.0)), 0.07).data, 0.2)


def test_sharpen_hand_value():
    # softmax([2, 0]) = [e^2, 1] / (e^2 + 1)
    p = sharpen(Tensor([[1.0, 0.0]]), 0.5).data[0]
    np.testing.assert_allclose(p, [0.8807970779778823, 0.11920292202211755], atol=1e-10)


@pytest.mark.parametrize("tau", [0.04, 0.07, 0.1, 1.0])
def test_sharpen_is_tempered_softmax(tau):
    logits = np.random.default_rng(0).normal(size=(4, 16))
    p = sharpen(Tensor(logits), tau).data
    assert np.max(np.abs(p - _softmax(logits / tau))) < 1e-7
    np.testing.assert_allclose(p.sum(-1), 1, atol=1e-6)


@pytest.mark.parametrize("tau", [0.0, -1.0])
def test_sharpen_rejects_bad_temperature(tau):
    with pytest.raises(ConfigError):
        sharpen(Tensor([[1.0, 2.0]]), tau)


def test_loss_uniform_is_log_k():
    u = Tensor(np.full((3, 4), 0.25))
    assert abs(dino_loss(u, u, u, u).item() - math.log(4)) < 1e-6


def test_loss_matched_one_hot_near_zero():
    d = 1e-12
    p = np.full((2, 3), d / 2)
    p[0, 1] = p[1, 2] = 1 - d
    t = Tensor(p)
    assert dino_loss(t, t, t, t).item() <= 1e-6


def test_loss_symmetric_in_views():
    rng = np.random.default_rng(0)
    a, b, c, d = (Tensor(_softmax(rng.normal(size=(3, 5)))) for _ in range(4))
    assert dino_loss(a, b, c, d).item() == pytest.approx(dino_loss(b, a, d, c).item(), abs=1e-12)


def test_loss_rejects_non_stochastic_rows():
    u = Tensor(np.full((1, 4), 0.25))
    with pytest.raises(ContractError):
        dino_loss(Tensor(np.full((1, 4), 0.3)), u, u, u)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_loss_non_negative(seed):
    rng = np.random.default_rng(seed)
    ps = [Tensor(_softmax(rng.normal(size=(2, 6)) * 3)) for _ in range(4)]
    assert dino_loss(*ps).item() >= 0


def test_no_gradient_reaches_teacher():
    rng = np.random.default_rng(1)
    s1, s2 = (Tensor(rng.normal(size=(2, 4)), requires_grad=True) for _ in range(2))
    t1, t2 = (Tensor(rng.normal(size=(2, 4)), requires_grad=True) for _ in range(2))
    with Tape() as tape:
        loss = dino_loss(sharpen(s1, 0.1), sharpen(s2, 0.1), sharpen(t1, 0.04), sharpen(t2, 0.04))
    g = backward(loss, tape)
    assert s1 in g and s2 in g
    assert t1 not in g and t2 not in g


def _pair():
    a, b = ParamStore(np.float64), ParamStore(np.float64)
    for s, v in ((a, 2.0), (b, 4.0)):
        s.add("w", (2, 3))
        s.add("b", (3,))
        s.set("w", np.full((2, 3), v))
        s.set("b", np.full(3, v))
    return a, b


def test_ema_fixed_points_and_arithmetic():
    t, s = _pair()
    ema_update(t, s, 1.0)
    assert np.all(t["w"].data == 2.0)
    ema_update(t, s, 0.5)
    assert np.all(t["w"].data == 3.0) and t.names() == ["w", "b"] and t["w"].shape == (2, 3)
    ema_update(t, s, 0.0)
    assert np.all(t["w"].data == s["w"].data) and np.all(t["b"].data == 4.0)


def test_ema_mismatch_rejected():
    t, s = _pair()
    s.add("extra", (1,))
    with pytest.raises(ContractError):
        ema_update(t, s, 0.9)


def test_cosine_lambda_schedule():
    assert cosine_lambda(0, 100) == 0.996
    assert cosine_lambda(100, 100) == 1.0
    assert cosine_lambda(50, 100) == pytest.approx(0.998, abs=1e-15)
    assert cosine_lambda(150, 100) == 1.0
    vals = [cosine_lambda(i, 37) for i in range(38)]
    assert all(b >= a for a, b in zip(vals, vals[1:]))


def test_views_deterministic_and_constant():
    img = np.random.default_rng(0).random((1, 40, 40))
    a, b = make_views(img, 5, 32), make_views(img, 5, 32)
    np.testing.assert_array_equal(a.x1, b.x1)
    np.testing.assert_array_equal(a.x2, b.x2)
    assert a.x1.shape == (1, 32, 32)
    c = make_views(np.full((1, 40, 40), 0.7), 1, 32)
    assert np.all(c.x1 == 0.7) and np.all(c.x2 == 0.7)


def test_views_are_nearest_subwindows():
    img = np.arange(12 * 12, dtype=np.float64).reshape(1, 12, 12)
    for seed in range(20):
        v = make_views(img, seed, 8)
        for view, rec in ((v.x1, v.params[0]), (v.x2, v.params[1])):
            assert np.isin(view, img).all()
            window = img[:, rec["top"]:rec["top"] + rec["side"], rec["left"]:rec["left"] + rec["side"]]
            assert np.isin(view, window).all()
            assert 0.5 * 144 - 12 <= rec["side"] ** 2 <= 144


def test_config_invariants():
    with pytest.raises(ConfigError):
        DistillConfig(tau_s=0.04, tau_t=0.1)
    with pytest.raises(ConfigError):
        DistillConfig(K=1)
    with pytest.raises(ConfigError):
        DistillConfig(lambda_start=0.999, lambda_end=0.99)


def _tiny_state(**kw):
    vcfg = ViTConfig(image_size=16, patch=8, width=16, depth=1, heads=2)
    return vcfg, DinoState.init(vcfg, DistillConfig(K=8, **kw), dtype=np.float64)


def test_first_step_loss_matches_closed_form():
    vcfg, state = _tiny_state()
    rng = np.random.default_rng(0)
    x = rng.random((1, 16, 16))
    views = [make_views(x, 0, 16), make_views(x, 1, 16)]
    # teacher == student at step 0, so both distributions come from one forward pass
    both = Tensor(np.concatenate([np.stack([v.x1 for v in views]), np.stack([v.x2 for v in views])]))
    with no_grad():
        z = project(both, vcfg, state.student, state.student_head, 3).data
    ps, pt = _softmax(z / 0.1), _softmax(z / 0.04)
    B = 2
    expected = -0.5 / B * ((pt[:B] * np.log(ps[B:])).sum() + (pt[B:] * np.log(ps[:B])).sum())
    loss = dino_train_step(state, views, 0)
    assert loss == pytest.approx(expected, rel=1e-10)


def test_step_updates_student_not_teacher_when_lambda_one():
    vcfg, state = _tiny_state(lambda_start=1.0, lambda_end=1.0)
    before_t = {k: v.data.copy() for k, v in state.teacher.items()}
    before_s = {k: v.data.copy() for k, v in state.student.items()}
    x = np.random.default_rng(3).random((1, 16, 16))
    dino_train_step(state, [make_views(x, 0, 16), make_views(x, 1, 16)], 0)
    for k in before_t:
        np.testing.assert_array_equal(state.teacher[k].data, before_t[k])
    assert any(not np.array_equal(state.student[k].data, before_s[k]) for k in before_s)


def test_train_reproducible():
    imgs = np.random.default_rng(0).random((6, 1, 16, 16))
    vcfg = ViTConfig(image_size=16, patch=8, width=16, depth=1, heads=2)
    cfg = DistillConfig(K=8, total_steps=4, batch_size=2)
    a = dino_train(imgs, vcfg, cfg)
    b = dino_train(imgs, vcfg, cfg)
    assert a.losses == b.losses
    for k in a.teacher.names():
        np.testing.assert_array_equal(a.teacher[k].data, b.teacher[k].data)
