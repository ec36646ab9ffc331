import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from metasd.models import BACKBONES
from metasd.objectives import (LossConfig, kd_teacher_grad, kl_div, n3_reg, softmax_ce,
                               student_loss, teacher_loss)
from metasd.pruning import compute_mask

from oracles import loss_gradient_errors, random_loss_instance, random_store, random_triples

logit_vectors = st.lists(st.floats(-30, 30), min_size=2, max_size=8)


def test_softmax_ce_worked_values():
    loss, grad = softmax_ce([0.0, 0.0, 0.0], 0)
    assert loss == pytest.approx(math.log(3))
    np.testing.assert_allclose(grad, [-2 / 3, 1 / 3, 1 / 3])
    assert softmax_ce([100.0, 0.0, 0.0], 0)[0] == pytest.approx(0.0, abs=1e-40)
    assert softmax_ce([1.0, 0.0, 0.0], 1)[0] == pytest.approx(1.5514, abs=1e-4)


def test_softmax_ce_rejects_bad_input():
    with pytest.raises(FloatingPointError):
        softmax_ce([np.nan, 0.0], 0)
    with pytest.raises(IndexError):
        softmax_ce([0.0, 1.0], 2)


def test_kl_worked_values():
    loss, ds, dt = kl_div([0.0, 0.0], [math.log(3), 0.0])
    # p = (.5, .5), q = (.75, .25)
    assert loss == pytest.approx(0.5 * math.log(0.5 / 0.75) + 0.5 * math.log(0.5 / 0.25))
    assert loss == pytest.approx(0.1438, abs=1e-4)
    loss, ds, dt = kl_div([1.0, 2.0, 3.0], [1.0, 2.0, 3.0])
    assert loss == pytest.approx(0.0, abs=1e-15)
    assert not ds.any() and not np.abs(dt).max() > 1e-15
    with pytest.raises(ValueError):
        kl_div([0.0, 1.0], [0.0])


def test_kl_direction_switch_swaps_arguments():
    s, t = np.array([0.3, -1.0, 2.0]), np.array([1.0, 0.0, -0.5])
    fwd, ds_f, dt_f = kl_div(s, t, direction="student_teacher")
    rev, ds_r, dt_r = kl_div(s, t, direction="teacher_student")
    back, dt_b, ds_b = kl_div(t, s)
    assert rev == pytest.approx(back) and fwd != pytest.approx(rev)
    np.testing.assert_allclose(ds_r, ds_b)
    np.testing.assert_allclose(dt_r, dt_b)


def test_n3_worked_values():
    value, grad = n3_reg(np.array([1.0, -2.0]))
    assert value == 9.0
    np.testing.assert_array_equal(grad, [3.0, -12.0])
    assert n3_reg(np.zeros((0, 4)))[0] == 0.0


@settings(max_examples=100, deadline=None)
@given(logit_vectors, st.floats(-50, 50), st.data())
def test_ce_shift_invariance_and_zero_sum_gradient(logits, shift, data):
    target = data.draw(st.integers(0, len(logits) - 1))
    a, ga = softmax_ce(logits, target)
    b, gb = softmax_ce(np.array(logits) + shift, target)
    assert a == pytest.approx(b, abs=1e-10)
    np.testing.assert_allclose(ga, gb, atol=1e-10)
    assert abs(ga.sum()) < 1e-12


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 8).flatmap(lambda n: st.tuples(
    st.lists(st.floats(-20, 20), min_size=n, max_size=n),
    st.lists(st.floats(-20, 20), min_size=n, max_size=n))), st.floats(-50, 50),
    st.floats(0.2, 5.0))
def test_kl_is_nonnegative_and_shift_invariant(pair, shift, tau):
    s, t = map(np.array, pair)
    loss, ds, dt = kl_div(s, t, tau)
    assert loss >= -1e-12
    assert kl_div(s + shift, t - shift, tau)[0] == pytest.approx(loss, abs=1e-10)
    assert abs(ds.sum()) < 1e-10 and abs(dt.sum()) < 1e-10


@pytest.mark.parametrize("backbone", BACKBONES)
@pytest.mark.parametrize("seed", range(5))
def test_loss_gradients_match_finite_differences(backbone, seed):
    assert max(loss_gradient_errors(backbone, seed)) < 1e-5


def _batch():
    rng = np.random.default_rng(0)
    store = random_store("ComplEx", 6, 2, 3, rng)
    return store, random_triples(rng, 5, 6, 4)


def test_alpha_one_is_plain_ce_with_zero_teacher_partial():
    store, batch = _batch()
    cfg = LossConfig(alpha=1.0, rp_weight=0.0)
    value, _, g_t = student_loss(batch, store, None, cfg)
    assert value.total == pytest.approx(value.components["ce"])
    assert all(not g.any() for g in g_t.values())
    assert all(not g.any() for g in kd_teacher_grad(batch, store, None, cfg).values())


def test_identical_models_have_zero_kd():
    store, batch = _batch()
    cfg = LossConfig(alpha=0.0, beta=0.0, rp_weight=0.0)
    value, _, g_st = student_loss(batch, store, None, cfg)
    assert value.components["kd"] == pytest.approx(0.0, abs=1e-15)
    value_t, g_t = teacher_loss(batch, store, None, cfg)
    assert value_t.total == pytest.approx(0.0, abs=1e-15)
    assert max(np.abs(g).max() for g in g_t.values()) < 1e-15


def test_beta_one_is_plain_teacher_ce_and_components_are_weighted():
    store, batch = _batch()
    mask = compute_mask(store, 0.5)
    value, _ = teacher_loss(batch, store, mask, LossConfig(beta=1.0, rp_weight=0.0))
    assert value.total == pytest.approx(value.components["ce"])
    assert "n3" not in value.components and "rp" not in value.components
    cfg = LossConfig(alpha=0.3, rp_weight=0.2, n3_weight=0.1)
    value, _, _ = student_loss(batch, store, mask, cfg)
    c = value.components
    assert value.total == pytest.approx(0.3 * c["ce"] + 0.7 * c["kd"] + 0.2 * c["rp"] + 0.1 * c["n3"])


def test_kd_teacher_grad_equals_student_loss_partial():
    store, student, mask, batch, cfg = random_loss_instance("RESCAL", 11)
    _, _, g = student_loss(batch, store, mask, cfg, student)
    fast = kd_teacher_grad(batch, store, mask, cfg, student)
    for k in g:
        np.testing.assert_allclose(fast[k], g[k], rtol=1e-12, atol=1e-15)


def test_student_gradient_vanishes_on_pruned_entries():
    store, student, mask, batch, cfg = random_loss_instance("CP", 4)
    mask = compute_mask(store, 0.7)
    _, g_s, _ = student_loss(batch, store, mask, cfg, student)
    for name, bits in mask.bits.items():
        assert not g_s[name][~bits].any()


def test_empty_batch_and_bad_config_raise():
    store, _ = _batch()
    with pytest.raises(ValueError):
        student_loss(np.zeros((0, 3), dtype=int), store, None, LossConfig())
    with pytest.raises(ValueError):
        LossConfig(alpha=1.5)
    with pytest.raises(ValueError):
        LossConfig(temperature=0.0)
