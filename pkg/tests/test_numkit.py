import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from medusa_lab.errors import ContractError, DegenerateVectorError, UnsupportedPrimitiveError
from medusa_lab.numkit import (
    Rng,
    Tape,
    as_tensor,
    backward,
    cosine_sim,
    fd_gradient,
    hvp,
    lp_norm,
    max_rel_error,
    project_lp,
)

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


# -- cosine_sim -------------------------------------------------------------


@pytest.mark.parametrize("a,b,want", [
    ((1, 0), (1, 0), 1.0),
    ((1, 0), (0, 1), 0.0),
    ((1, 0), (1, 1), 0.7071067811865475),
])
def test_cosine_examples(a, b, want):
    assert cosine_sim(a, b) == pytest.approx(want, abs=1e-15)


def test_cosine_zero_norm():
    with pytest.raises(DegenerateVectorError):
        cosine_sim((0, 0), (1, 0))


def test_cosine_length_mismatch():
    with pytest.raises(ContractError):
        cosine_sim((1, 0), (1, 0, 0))


@given(arrays(np.float64, 5, elements=finite), arrays(np.float64, 5, elements=finite))
def test_cosine_symmetric_and_bounded(a, b):
    if np.linalg.norm(a) < 1e-6 or np.linalg.norm(b) < 1e-6:
        return
    s = cosine_sim(a, b)
    assert s == cosine_sim(b, a)
    assert -1 - 1e-12 <= s <= 1 + 1e-12
    assert cosine_sim(a, a) == pytest.approx(1.0, abs=1e-12)


# -- backward / hvp -----------------------------------------------------------


def test_backward_identity():
    t = Tape()
    x = t.input(np.array(3.0))
    assert backward(t, x, x) == pytest.approx(1.0)


def test_backward_sum_of_squares():
    t = Tape()
    x = t.input(np.array([1.0, 2.0]))
    out = t.dot(x, x)
    np.testing.assert_allclose(backward(t, out, x), [2.0, 4.0])


def test_backward_nonscalar_rejected():
    t = Tape()
    x = t.input(np.ones(3))
    with pytest.raises(ContractError):
        backward(t, t.tanh(x), x)


def test_hvp_half_norm_squared_is_identity(rng):
    t = Tape()
    x = t.input(rng.normal(size=4))
    out = t.scale(t.dot(x, x), 0.5)
    d = rng.normal(size=4)
    np.testing.assert_allclose(hvp(t, out, x, d), d, rtol=1e-14)


def test_hvp_product():
    t = Tape()
    x = t.input(np.array([0.3, -1.7]))
    x1, x2 = t.take(x, 0), t.take(x, 1)
    out = t.dot(x1, x2)
    np.testing.assert_allclose(hvp(t, out, x, np.array([1.0, 0.0])), [0.0, 1.0], atol=1e-15)


def test_hvp_direction_shape_checked():
    t = Tape()
    x = t.input(np.ones(3))
    with pytest.raises(ContractError):
        hvp(t, t.sum(t.tanh(x)), x, np.ones(2))


def test_hvp_without_tangent_rule_raises():
    t = Tape()
    x = t.input(np.ones(3))
    y = t.custom("cube", lambda v: v**3, lambda g, v: (3 * v**2 * g,), x)
    out = t.sum(y)
    np.testing.assert_allclose(backward(t, out, x), 3.0)
    with pytest.raises(UnsupportedPrimitiveError):
        hvp(t, out, x, np.ones(3))


def test_normalize_guard_has_zero_gradient():
    t = Tape()
    x = t.input(np.zeros(3))
    out = t.sum(t.normalize(x))
    np.testing.assert_array_equal(backward(t, out, x), 0.0)
    assert np.all(np.isfinite(t.normalize(x).value))


def test_tape_replay_is_bit_exact(rng):
    t = Tape()
    x = t.input(rng.normal(size=(2, 5)))
    w = rng.normal(size=(3, 5))
    out = t.sum(t.logsumexp(t.tanh(t.affine(x, w, np.zeros(3)))))
    first = [v.copy() for v in t._values]
    again = t.replay()
    assert len(again) == len(first) == len(t)
    for a, b in zip(first, again):
        np.testing.assert_array_equal(a, b)
    assert out.value.shape == ()


def test_tape_rejects_nonfinite_input():
    with pytest.raises(ContractError):
        Tape().input(np.array([np.nan]))
    with pytest.raises(ContractError):
        as_tensor([1.0, np.inf])


def _composite(tape, x, w1, w2, t_pos, t_negs):
    h = tape.tanh(tape.affine(x, w1, np.zeros(len(w1))))
    v = tape.normalize(tape.affine(h, w2, np.zeros(len(w2))))
    s_pos = tape.dot(v, t_pos)
    s_neg = tape.dot(tape.reshape(v, (v.shape[0], 1, v.shape[1])), t_negs)
    return tape.sum(tape.softplus(tape.sub(tape.scale(s_pos, 10.0), tape.logsumexp(tape.scale(s_neg, 10.0)))))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_backward_and_hvp_match_finite_differences(seed):
    r = Rng(seed)
    w1, w2 = r.normal(size=(6, 8)), r.normal(size=(4, 6))
    t_pos = r.normal(size=4)
    t_pos /= np.linalg.norm(t_pos)
    t_negs = r.normal(size=(3, 4))
    t_negs /= np.linalg.norm(t_negs, axis=1, keepdims=True)
    x0 = r.normal(size=(1, 8))

    def grad_at(x):
        t = Tape()
        xi = t.input(x)
        return backward(t, _composite(t, xi, w1, w2, t_pos, t_negs), xi)

    def f(x):
        t = Tape()
        return float(_composite(t, t.const(x), w1, w2, t_pos, t_negs).value)

    assert max_rel_error(grad_at(x0), fd_gradient(f, x0)) <= 1e-5
    d = r.normal(size=x0.shape)
    t = Tape()
    xi = t.input(x0)
    got = hvp(t, _composite(t, xi, w1, w2, t_pos, t_negs), xi, d)
    h = 1e-4
    want = (grad_at(x0 + h * d) - grad_at(x0 - h * d)) / (2 * h)
    assert max_rel_error(got, want) <= 1e-4


# -- project_lp ---------------------------------------------------------------


def test_project_linf_example():
    np.testing.assert_array_equal(project_lp(np.array([0.2, -0.01]), math.inf, 0.05), [0.05, -0.01])


def test_project_l2_example():
    np.testing.assert_allclose(project_lp(np.array([3.0, 4.0]), 2, 1.0), [0.6, 0.8], rtol=1e-15)


@pytest.mark.parametrize("p", [2, math.inf])
def test_project_inside_unchanged(p):
    d = np.array([0.01, -0.02, 0.005])
    np.testing.assert_array_equal(project_lp(d, p, 0.5), d)


def test_project_rejects_bad_p_and_eps():
    with pytest.raises(ContractError):
        project_lp(np.ones(2), 1, 0.1)
    with pytest.raises(ContractError):
        project_lp(np.ones(2), 2, 0.0)


@given(arrays(np.float64, (3, 4), elements=finite), st.sampled_from([2, math.inf]),
       st.floats(1e-3, 5.0))
def test_project_in_ball_and_idempotent(d, p, eps):
    once = project_lp(d, p, eps)
    assert lp_norm(once, p) <= eps
    np.testing.assert_array_equal(project_lp(once, p, eps), once)
    rows = project_lp(d, p, eps, per_row=True)
    assert np.all(lp_norm(rows, p, per_row=True) <= eps)


# -- fd_gradient ---------------------------------------------------------------


def test_fd_constant_is_zero():
    np.testing.assert_allclose(fd_gradient(lambda x: 3.0, np.array([1.0, 2.0])), 0.0, atol=1e-12)


def test_fd_sum_of_squares():
    np.testing.assert_allclose(fd_gradient(lambda x: float(np.sum(x * x)), np.array([1.0, 2.0])),
                               [2.0, 4.0], atol=1e-8)


# -- Rng -----------------------------------------------------------------------


def test_rng_reproducible_and_independent():
    a = Rng(7).child("x", 1).normal(size=5)
    b = Rng(7).child("x", 1).normal(size=5)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, Rng(7).child("x", 2).normal(size=5))
    assert not np.array_equal(a, Rng(8).child("x", 1).normal(size=5))


def test_rng_children_ignore_sibling_consumption():
    root = Rng(3)
    root.child("a").normal(size=100)
    np.testing.assert_array_equal(root.child("b").uniform(size=3), Rng(3).child("b").uniform(size=3))


def test_rng_frozen_draw():
    # Philox keyed by sha256 of (seed, path); guards against silent stream changes
    assert Rng(0).child("frozen").integers(0, 1000, 4).tolist() == [612, 959, 709, 716]
