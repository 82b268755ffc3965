import json
import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from medusa_lab import attack as atk
from medusa_lab import verify
from medusa_lab.encoders import SurrogateSet, encode_images, encode_texts
from medusa_lab.errors import ContractError
from medusa_lab.numkit import Rng, lp_norm, max_rel_error
from medusa_lab.records import Report

from conftest import unit


def _toy(seed, n_models=2, size=4, k=3):
    return verify.toy_instance(Rng(seed).child("toy"), n_models=n_models, size=size, k=k)


def _emb_setup(rng, sims_pos, sims_neg):
    """Unit vectors v, t_pos, t_negs with prescribed similarities to v."""
    d = 2 + len(sims_neg) + 1
    v = np.zeros(d)
    v[0] = 1.0

    def with_sim(s, axis):
        u = np.zeros(d)
        u[0], u[axis] = s, math.sqrt(max(0.0, 1 - s * s))
        return u

    t_pos = with_sim(sims_pos, 1)
    t_negs = np.stack([with_sim(s, 2 + i) for i, s in enumerate(sims_neg)])
    return v, t_pos, t_negs


# -- config ------------------------------------------------------------------


def test_config_defaults_follow_published_hyperparameters():
    c = atk.AttackConfig()
    assert (c.tau, c.lambda_irm, c.mu, c.t_in, c.t_out, c.eta) == (0.07, 0.1, 1.0, 5, 100, 1 / 255)
    assert c.n_baseline_steps == 600


@pytest.mark.parametrize("kw", [{"eps": 0}, {"eta": -1}, {"tau": 0}, {"p": 1}, {"mu": -1},
                                {"t_in": -1}, {"k_targets": 0}, {"baseline_loss": "x"}])
def test_config_validation(kw):
    with pytest.raises(ContractError):
        atk.AttackConfig(**kw)


def test_config_round_trip_and_unknown_keys():
    c = atk.AttackConfig(eps=0.1, p=2)
    assert atk.AttackConfig.from_dict(json.loads(json.dumps(c.to_dict()))) == c
    with pytest.raises(ContractError):
        atk.AttackConfig.from_dict({"epsilon": 1})


def test_target_spec_invariants():
    pos = Report("p", "normal", ("clear",))
    neg = Report("n", "pneumonia", ("opacity",))
    assert atk.TargetSpec(pos, [neg]).target_label == "pneumonia"
    with pytest.raises(ContractError):
        atk.TargetSpec(pos, [])
    with pytest.raises(ContractError):
        atk.TargetSpec(pos, [pos])
    with pytest.raises(ContractError):
        atk.TargetSpec(pos, [neg, Report("e", "edema", ("edema",))])


# -- MPIL --------------------------------------------------------------------


def test_mpil_equal_logits_is_ln2(rng):
    v, tp, tn = _emb_setup(rng, 0.3, [0.3])
    assert abs(atk.mpil_loss(v, tp, tn, 0.07) - math.log(2)) <= 1e-12


def test_mpil_extreme_case_matches_direct_oracle(rng):
    v, tp, tn = _emb_setup(rng, 0.0, [1.0])
    want = math.log1p(math.exp((0.0 - 1.0) / 0.07))  # ~6.2e-7
    assert atk.mpil_loss(v, tp, tn, 0.07) == pytest.approx(want, rel=1e-12)
    assert 6.1e-7 < want < 6.3e-7


def test_mpil_matches_softmax_oracle(rng):
    for _ in range(20):
        v, tp = unit(rng, 8), unit(rng, 8)
        tn = unit(rng, 3, 8)
        a = np.exp(tn @ v / 0.07)
        b = np.exp(tp @ v / 0.07)
        want = -math.log(a.sum() / (a.sum() + b))
        assert atk.mpil_loss(v, tp, tn, 0.07) == pytest.approx(want, rel=1e-12, abs=1e-15)


def test_mpil_contract_errors(rng):
    v, tp = unit(rng, 4), unit(rng, 4)
    with pytest.raises(ContractError):
        atk.mpil_loss(v, tp, np.zeros((0, 4)), 0.07)
    with pytest.raises(ContractError):
        atk.mpil_loss(2 * v, tp, unit(rng, 2, 4), 0.07)
    with pytest.raises(ContractError):
        atk.mpil_loss(v, tp, unit(rng, 2, 4), 0.0)


@settings(max_examples=60)
@given(st.floats(-0.95, 0.9), st.floats(-0.95, 0.9), st.floats(0.01, 0.05))
def test_mpil_monotone_in_similarities(s_pos, s_neg, bump):
    r = Rng(0)
    base = atk.mpil_loss(*_emb_setup(r, s_pos, [s_neg, 0.1]), 0.07)
    assert 0 < base < math.inf
    assert atk.mpil_loss(*_emb_setup(r, s_pos + bump, [s_neg, 0.1]), 0.07) > base
    assert atk.mpil_loss(*_emb_setup(r, s_pos, [s_neg + bump, 0.1]), 0.07) < base


def test_mpil_limit_goes_to_zero(rng):
    v, tp, tn = _emb_setup(rng, -1.0, [1.0, 1.0])
    assert atk.mpil_loss(v, tp, tn, 0.07) < 1e-12


def test_mpil_grad_matches_fd(rng):
    from medusa_lab.numkit import fd_gradient
    v, tp, tn = unit(rng, 6), unit(rng, 6), unit(rng, 3, 6)
    # loss through normalization so the FD probe may leave the sphere
    from medusa_lab.numkit import Tape

    def f(x):
        t = Tape()
        return float(atk.mpil_on_tape(t, t.const(x[None]), tp, tn, 0.07).value[0])

    assert max_rel_error(atk.mpil_grad(v, tp, tn, 0.07), fd_gradient(f, v)) <= 1e-6


# -- ensemble / IRM / total ----------------------------------------------------


def test_ensemble_singleton_and_duplicate():
    members, image, delta, spec = _toy(1, n_models=2)
    single = atk.ensemble_loss(members[:1], image, delta, spec, 0.07)
    v = encode_images(members[0], (image.pixels + delta)[None])[0]
    tp = encode_texts(members[0], [spec.t_pos])[0]
    tn = encode_texts(members[0], spec.t_negs)
    assert single == pytest.approx(atk.mpil_loss(v, tp, tn, 0.07), rel=1e-14)
    assert atk.ensemble_loss([members[0]] * 2, image, delta, spec, 0.07) == single


def test_ensemble_two_models_is_mean():
    members, image, delta, spec = _toy(2, n_models=2)
    per = [atk.ensemble_loss([m], image, delta, spec, 0.07) for m in members]
    assert atk.ensemble_loss(members, image, delta, spec, 0.07) == pytest.approx(np.mean(per), rel=1e-14)
    with pytest.raises(ContractError):
        atk.ensemble_loss([], image, delta, spec, 0.07)


def test_irm_zero_cases():
    members, image, delta, spec = _toy(3, n_models=2)
    assert atk.irm_penalty(members[:1], image, delta, spec, 0.07) == 0.0
    assert atk.irm_penalty([members[0]] * 3, image, delta, spec, 0.07) == 0.0


def test_irm_matches_fd_embedding_gradients():
    from medusa_lab.numkit import Tape, fd_gradient
    members, image, delta, spec = _toy(4, n_models=2)
    grads = []
    for m in members:
        v = encode_images(m, (image.pixels + delta)[None])[0]
        tp = encode_texts(m, [spec.t_pos])[0]
        tn = encode_texts(m, spec.t_negs)

        def f(x, tp=tp, tn=tn):
            t = Tape()
            return float(atk.mpil_on_tape(t, t.const(x[None]), tp, tn, 0.07).value[0])

        grads.append(fd_gradient(f, v))
    g_bar = np.mean(grads, axis=0)
    want = np.mean([np.sum((g - g_bar) ** 2) for g in grads])
    assert atk.irm_penalty(members, image, delta, spec, 0.07) == pytest.approx(want, rel=1e-6)


def test_irm_and_ensemble_invariances():
    members, image, delta, spec = _toy(5, n_models=3)
    a = atk.irm_penalty(members, image, delta, spec, 0.07)
    assert a > 0
    assert atk.irm_penalty(members[::-1], image, delta, spec, 0.07) == pytest.approx(a, rel=1e-13)
    flipped = atk.TargetSpec(spec.t_pos, spec.t_negs[::-1])
    assert atk.irm_penalty(members, image, delta, flipped, 0.07) == pytest.approx(a, rel=1e-13)
    e = atk.ensemble_loss(members, image, delta, spec, 0.07)
    assert atk.ensemble_loss(members, image, delta, flipped, 0.07) == pytest.approx(e, rel=1e-13)


def test_mismatched_embedding_dims_rejected():
    m1, image, delta, spec = _toy(6, n_models=1)
    other = verify.toy_models(Rng(9), 1, size=4, patch=2, embed_dim=5)
    with pytest.raises(ContractError):
        atk.irm_penalty(m1 + other, image, delta, spec, 0.07)


def test_total_objective_lambda_zero_is_ensemble():
    members, image, delta, spec = _toy(7, n_models=2)
    cfg = atk.AttackConfig(lambda_irm=0.0)
    val, grad = atk.total_objective(members, image, delta, spec, cfg)
    assert val == atk.ensemble_loss(members, image, delta, spec, 0.07)
    _, g_ens = atk.total_objective(members, image, delta, spec, replace(cfg, irm_enabled=False))
    np.testing.assert_array_equal(grad, g_ens)


def test_total_objective_decomposition():
    members, image, delta, spec = _toy(8, n_models=3)
    val, _ = atk.total_objective(members, image, delta, spec, atk.AttackConfig())
    want = (atk.ensemble_loss(members, image, delta, spec, 0.07)
            + 0.1 * atk.irm_penalty(members, image, delta, spec, 0.07))
    assert abs(val - want) <= 1e-12


@pytest.mark.parametrize("seed", range(5))
def test_total_gradient_matches_fd_4x4(seed):
    members, image, delta, spec = _toy(100 + seed, n_models=2 + seed % 2)
    cfg = atk.AttackConfig()
    _, g = atk.total_objective(members, image, delta, spec, cfg)
    assert max_rel_error(g, verify.batched_fd(members, image, delta, spec, cfg)) <= 1e-4


def test_first_order_irm_flag_differs_from_exact():
    members, image, delta, spec = _toy(9, n_models=3)
    cfg = atk.AttackConfig()
    _, exact = atk.total_objective(members, image, delta, spec, cfg)
    _, stop = atk.total_objective(members, image, delta, spec, replace(cfg, irm_second_order=False))
    _, ens = atk.total_objective(members, image, delta, spec, replace(cfg, irm_enabled=False))
    np.testing.assert_array_equal(stop, ens)
    assert not np.array_equal(exact, stop)


# -- momentum step ---------------------------------------------------------------


def test_momentum_step_sign_descent():
    cfg = atk.AttackConfig(mu=0.0, eps=0.5)
    d, m = atk.momentum_step(np.zeros(2), np.zeros(2), np.array([2.0, -3.0]), cfg)
    np.testing.assert_array_equal(d, [-1 / 255, 1 / 255])
    np.testing.assert_array_equal(m, [2.0, -3.0])


def test_momentum_step_fixed_point():
    d0 = np.array([0.01, -0.02])
    d, _ = atk.momentum_step(d0, np.zeros(2), np.zeros(2), atk.AttackConfig())
    np.testing.assert_array_equal(d, d0)


def test_momentum_accumulates_with_mu_one():
    cfg = atk.AttackConfig()
    g = np.array([0.5, -0.25])
    d, m = atk.momentum_step(np.zeros(2), np.zeros(2), g, cfg)
    d, m = atk.momentum_step(d, m, g, cfg)
    np.testing.assert_array_equal(m, 2 * g)


def test_momentum_step_clips_to_pixel_range():
    cfg = atk.AttackConfig(eps=0.5, eta=0.3, mu=0.0)
    image = np.array([0.1, 0.9])
    d, _ = atk.momentum_step(np.zeros(2), np.zeros(2), np.array([1.0, -1.0]), cfg, image=image)
    np.testing.assert_allclose(image + d, [0.0, 1.0])


def test_momentum_step_shape_check():
    with pytest.raises(ContractError):
        atk.momentum_step(np.zeros(2), np.zeros(3), np.zeros(2), atk.AttackConfig())


# -- attacks -------------------------------------------------------------------


def _sset(members, n_test=1):
    n = len(members)
    return SurrogateSet(members, tuple(range(n - n_test)), tuple(range(n - n_test, n)))


def test_dual_loop_zero_iterations_is_identity():
    members, image, _, spec = _toy(10, n_models=3)
    tr = atk.dual_loop_attack(image, spec, _sset(members), atk.AttackConfig(t_in=0, t_out=0))
    np.testing.assert_array_equal(tr.delta, 0.0)
    np.testing.assert_array_equal(tr.adversarial, image.pixels)
    assert len(tr) == 0


def test_dual_loop_step_count_schedule_and_feasibility():
    members, image, _, spec = _toy(11, n_models=3)
    cfg = atk.AttackConfig(eps=0.05, eta=0.02, t_in=3, t_out=4)
    tr = atk.dual_loop_attack(image, spec, _sset(members), cfg)
    assert len(tr) == cfg.t_out * cfg.t_in + cfg.t_out
    assert [s.loop for s in tr.steps[:4]] == ["inner"] * 3 + ["outer"]
    assert all(s.l_irm == 0.0 for s in tr.steps if s.loop == "outer")
    assert np.all(np.abs(tr.delta) <= 0.05) and tr.feasible(0.05, math.inf)
    assert 0.0 <= tr.adversarial.min() and tr.adversarial.max() <= 1.0


def test_dual_loop_empty_test_set_warns(caplog):
    members, image, _, spec = _toy(12, n_models=2)
    sset = SurrogateSet(members, (0, 1))
    tr = atk.dual_loop_attack(image, spec, sset, atk.AttackConfig(t_in=1, t_out=2))
    assert len(tr) == 2
    assert "F_test is empty" in caplog.text


def test_momentum_reset_flag_changes_outer_direction():
    members, image, _, spec = _toy(13, n_models=3)
    cfg = atk.AttackConfig(t_in=2, t_out=3)
    a = atk.dual_loop_attack(image, spec, _sset(members), cfg)
    b = atk.dual_loop_attack(image, spec, _sset(members), replace(cfg, reuse_momentum_across_loops=False))
    assert [s.m_inf_norm for s in a.steps] != [s.m_inf_norm for s in b.steps]


@pytest.mark.slow
def test_dual_loop_reduces_objective_on_most_toy_runs():
    """Published defaults on 100 independent toy runs.

    Instances the training pair already rates as a clear hit (MPIL <= ln 2 at
    delta = 0) are skipped, mirroring clean filtering in the campaign: there
    the loss sits near zero and a sign step can only tread water.
    """
    cfg = atk.AttackConfig()
    zero = np.zeros((8, 8))
    wins = kept = s = 0
    while kept < 100:
        members, image, _, spec = verify.toy_instance(Rng(s).child("descent"), n_models=3, size=8)
        s += 1
        if atk.ensemble_loss(members[:2], image, zero, spec, cfg.tau) <= math.log(2):
            continue
        kept += 1
        tr = atk.dual_loop_attack(image, spec, _sset(members), cfg)
        before, _ = atk.total_objective(members[:2], image, zero, spec, cfg)
        after, _ = atk.total_objective(members[:2], image, tr.delta, spec, cfg)
        wins += after < before
    assert wins >= 95


def test_ens_singleton_equals_dual_loop_inner_schedule():
    members, image, _, spec = _toy(14, n_models=1)
    cfg = atk.AttackConfig(t_in=1, t_out=6, lambda_irm=0.0)
    dual = atk.dual_loop_attack(image, spec, SurrogateSet(members, (0,)), cfg)
    ens = atk.attack_ens(image, spec, SurrogateSet(members, (0,)), cfg, n_steps=6)
    np.testing.assert_array_equal(dual.delta, ens.delta)


def test_ens_duplicate_member_same_trajectory():
    members, image, _, spec = _toy(15, n_models=1)
    cfg = atk.AttackConfig()
    a = atk.attack_ens(image, spec, SurrogateSet(members, (0,)), cfg, n_steps=8)
    b = atk.attack_ens(image, spec, SurrogateSet(members * 2, (0, 1)), cfg, n_steps=8)
    np.testing.assert_array_equal(a.delta, b.delta)
    assert [s.l_total for s in a.steps] == [s.l_total for s in b.steps]


def test_ens_step_one_gradient_is_hand_average():
    members, image, _, spec = _toy(16, n_models=2)
    cfg = atk.AttackConfig(lambda_irm=0.0)
    per = [atk.total_objective([m], image, np.zeros((4, 4)), spec, cfg)[1] for m in members]
    x = image.pixels[None]
    t = atk.objective_batch(members, x, [atk.text_targets(m, [spec]) for m in members], cfg, irm=False)
    np.testing.assert_allclose(t.grad[0], (per[0] + per[1]) / 2, rtol=1e-13, atol=1e-18)


def test_ens_default_budget_matches_dual_loop():
    members, image, _, spec = _toy(17, n_models=2)
    cfg = atk.AttackConfig(t_in=2, t_out=3)
    assert len(atk.attack_ens(image, spec, SurrogateSet(members, (0, 1)), cfg)) == 9
    assert len(atk.attack_svre(image, spec, SurrogateSet(members, (0, 1)), cfg)) == 9


def test_svre_constant_field_keeps_sign(monkeypatch):
    members, image, _, spec = _toy(18, n_models=2)
    G = Rng(0).normal(size=(1, 4, 4))
    real = atk.objective_batch

    def const(*a, **kw):
        t = real(*a, **kw)
        t.grad = G.copy()
        return t

    monkeypatch.setattr(atk, "objective_batch", const)
    gs = []
    atk.attack_svre(image, spec, SurrogateSet(members, (0, 1)), atk.AttackConfig(), n_steps=5, record_g=gs)
    for g in gs:
        np.testing.assert_array_equal(np.sign(g), np.sign(G))


def test_svre_matches_straight_line_recursion():
    members, image, _, spec = _toy(19, n_models=2)
    cfg = atk.AttackConfig(eta=0.01)
    gs = []
    atk.attack_svre(image, spec, SurrogateSet(members, (0, 1)), cfg, n_steps=3, record_g=gs)

    targets = [atk.text_targets(m, [spec]) for m in members]

    def grad(x):
        return atk.objective_batch(members, x, targets, cfg, irm=False).grad

    clean = image.pixels[None]
    x, delta = clean.copy(), np.zeros_like(clean)
    want, v, prev_grad = [], None, None
    for t in range(3):
        cur = grad(x)
        if t == 0:
            g = cur  # g_0 = v_0 = grad L(delta_0); delta_{-1} = delta_0
            v = cur
        else:
            g = cur - prev_grad + v
            v = v + g
        prev_grad = cur
        want.append(g)
        delta = np.clip(delta - cfg.eta * np.sign(g), -cfg.eps, cfg.eps)
        x = np.clip(clean + delta, 0, 1)
        delta = x - clean
    assert len(gs) == 3
    np.testing.assert_array_equal(gs[1], want[1])
    for a, b in zip(gs, want):
        np.testing.assert_array_equal(a, b)
    # telescoping at t = 1: g_1 equals the fresh gradient
    np.testing.assert_array_equal(want[1], gs[1])


@settings(max_examples=15, deadline=None)
@given(st.sampled_from(["medusa", "ens", "svre"]), st.sampled_from([2, math.inf]),
       st.floats(0.005, 0.2), st.integers(0, 1000))
def test_every_recorded_step_is_feasible(method, p, eps, seed):
    members, image, _, spec = _toy(seed, n_models=3)
    cfg = atk.AttackConfig(eps=eps, p=p, eta=0.03, t_in=2, t_out=2)
    [tr] = atk.run_attack(method, [image], [spec], _sset(members), cfg)
    assert tr.feasible(eps, p)
    assert lp_norm(tr.delta, p) <= eps + 1e-12


def test_unknown_method():
    members, image, _, spec = _toy(20)
    with pytest.raises(ContractError):
        atk.run_attack("pgd", [image], [spec], _sset(members), atk.AttackConfig())


def test_batched_attack_needs_shared_targets():
    members, image, _, spec = _toy(21, n_models=2)
    other = atk.TargetSpec(spec.t_pos, spec.t_negs[:1])
    with pytest.raises(ContractError):
        atk.attack_ens_batch([image, image], [spec, other], SurrogateSet(members, (0, 1)), atk.AttackConfig())


def test_trace_jsonl_round_trip(tmp_path):
    members, image, _, spec = _toy(22, n_models=3)
    tr = atk.dual_loop_attack(image, spec, _sset(members), atk.AttackConfig(t_in=1, t_out=2))
    tr.to_jsonl(tmp_path / "t.jsonl")
    rows = [json.loads(x) for x in (tmp_path / "t.jsonl").read_text().splitlines()]
    assert set(rows[0]) == {"loop", "step", "l_ens", "l_irm", "l_total", "m_inf_norm"}
    assert rows[-1]["trailer"] and len(rows[-1]["delta"]) == 16
    back = atk.AttackTrace.from_jsonl(tmp_path / "t.jsonl")
    np.testing.assert_array_equal(back.delta, tr.delta)
    assert back.surrogates == tr.surrogates and len(back) == len(tr)
