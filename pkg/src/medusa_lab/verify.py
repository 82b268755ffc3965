"""Oracle suites: gradients against finite differences, loss identities,
retrieval against a full sort, projection properties, kernel backend parity."""

import math
import time
from dataclasses import dataclass, replace

import numpy as np

from . import attack as atk
from . import kernels, ragsim
from .encoders import EncoderArch, image_branch, init_pair
from .numkit import Rng, Tape, backward, fd_gradient, hvp, max_rel_error, project_lp
from .records import Image, Report
from .vocab import VOCAB

SUITES = ("losses", "projection", "retrieval", "kernels", "gradients")


@dataclass
class Check:
    suite: str
    name: str
    measured: float
    tolerance: float
    passed: bool
    seconds: float = 0.0

    def line(self):
        mark = "PASS" if self.passed else "FAIL"
        return (f"[{mark}] {self.suite}/{self.name}: measured={self.measured:.3e} "
                f"tol={self.tolerance:.1e} ({self.seconds:.2f}s)")


@dataclass
class VerifyReport:
    checks: list

    @property
    def ok(self):
        return all(c.passed for c in self.checks)

    def format(self):
        lines = [c.line() for c in self.checks]
        lines.append(f"{sum(c.passed for c in self.checks)}/{len(self.checks)} checks passed")
        return "\n".join(lines)


# ---------------------------------------------------------------------------
# toy instances


def _unit(rng, *shape):
    x = rng.normal(size=shape)
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def random_report(rng, id, label, n=6):
    return Report(id, label, tuple(VOCAB[i] for i in rng.integers(0, len(VOCAB), n)))


def toy_models(rng, n_models, size=8, patch=2, hidden=8, embed_dim=6, scale=1.0):
    arch = EncoderArch(height=size, width=size, patch=patch, hidden=hidden, embed_dim=embed_dim)
    out = []
    for j in range(n_models):
        p = init_pair(arch, int(rng.integers(0, 2**31)), name=f"toy{j}")
        if scale != 1.0:
            iw = {k: v * scale for k, v in p.image_weights.items()}
            p = type(p)(arch, iw, p.text_weights, p.seed, p.tag, p.name)
        out.append(p)
    return out


def toy_instance(rng, n_models=2, size=8, k=3):
    """Random encoders, image, perturbation and target spec."""
    members = toy_models(rng, n_models, size=size, patch=2 if size % 2 == 0 else 1, scale=3.0)
    image = Image("toy", "normal", rng.uniform(0.2, 0.8, (size, size)))
    delta = rng.uniform(-0.03, 0.03, (size, size))
    spec = atk.TargetSpec(random_report(rng, "pos", "normal"),
                          [random_report(rng, f"neg{i}", "pneumonia") for i in range(k)])
    return members, image, delta, spec


def batched_fd(members, image, delta, spec, cfg, h=1e-5):
    """Central differences of the total objective, every probe in one batch."""
    n = delta.size
    probes = np.eye(n).reshape((n,) + delta.shape) * h
    x = image.pixels + delta
    xs = np.concatenate([x + probes, x - probes])
    targets = [atk.text_targets(m, [spec] * len(xs)) for m in members]
    vals = atk.objective_batch(members, xs, targets, cfg, irm=cfg.irm_enabled, grad=False).l_total
    return ((vals[:n] - vals[n:]) / (2 * h)).reshape(delta.shape)


# ---------------------------------------------------------------------------
# suites


def _timed(suite, name, fn, tol, cmp=lambda m, t: m <= t):
    t0 = time.perf_counter()
    measured = float(fn())
    return Check(suite, name, measured, tol, bool(cmp(measured, tol)), time.perf_counter() - t0)


def _mpil_oracle(sp, sn, tau):
    logits = [s / tau for s in list(sn) + [sp]]
    m = max(logits)
    every = m + math.log(math.fsum(math.exp(x - m) for x in logits))
    mn = max(logits[:-1])
    attract = mn + math.log(math.fsum(math.exp(x - mn) for x in logits[:-1]))
    return every - attract


def suite_losses(rng):
    s = "losses"
    checks = []
    t = _unit(rng, 4)
    checks.append(_timed(s, "mpil_equal_logits_is_ln2",
                         lambda: abs(atk.mpil_loss(t, t, [t], 0.07) - math.log(2)), 1e-12))
    e0, e1 = np.eye(4)[0], np.eye(4)[1]
    checks.append(_timed(s, "mpil_k1_extreme_vs_log1p_relative",
                         lambda: abs(atk.mpil_loss(e0, e1, [e0], 0.07) / math.log1p(math.exp(-1 / 0.07)) - 1),
                         1e-12))

    def k3():
        worst = 0.0
        for _ in range(200):
            v, tp = _unit(rng, 8), _unit(rng, 8)
            tn = _unit(rng, 3, 8)
            got = atk.mpil_loss(v, tp, tn, 0.07)
            want = _mpil_oracle(float(v @ tp), tn @ v, 0.07)
            worst = max(worst, abs(got - want) / max(1.0, abs(want)))
        return worst

    checks.append(_timed(s, "mpil_k3_vs_softmax_oracle", k3, 1e-12))
    members, image, delta, spec = toy_instance(rng, 2)
    checks.append(_timed(s, "irm_singleton_zero",
                         lambda: atk.irm_penalty(members[:1], image, delta, spec, 0.07), 0.0))
    checks.append(_timed(s, "irm_duplicates_zero",
                         lambda: atk.irm_penalty([members[0]] * 3, image, delta, spec, 0.07), 0.0))

    def lam0():
        cfg = atk.AttackConfig(lambda_irm=0.0)
        val, g = atk.total_objective(members, image, delta, spec, cfg)
        ens = atk.ensemble_loss(members, image, delta, spec, cfg.tau)
        ens_cfg = replace(cfg, irm_enabled=False)
        _, g_ens = atk.total_objective(members, image, delta, spec, ens_cfg)
        return abs(val - ens) + float(np.max(np.abs(g - g_ens)))

    checks.append(_timed(s, "lambda0_reduces_to_ensemble_bit_exact", lam0, 0.0))

    def decomposition():
        cfg = atk.AttackConfig(lambda_irm=0.1)
        val, _ = atk.total_objective(members, image, delta, spec, cfg)
        ens = atk.ensemble_loss(members, image, delta, spec, cfg.tau)
        irm = atk.irm_penalty(members, image, delta, spec, cfg.tau)
        return abs(val - (ens + 0.1 * irm))

    checks.append(_timed(s, "total_equals_ens_plus_0.1_irm", decomposition, 1e-12))
    return checks


def suite_projection(rng, projection=project_lp):
    s = "projection"
    checks = []
    for p in (2, math.inf):
        def idem(p=p):
            worst = 0.0
            for _ in range(200):
                d = rng.normal(0, 0.1, (8, 8))
                eps = float(rng.uniform(0.01, 0.2))
                once = projection(d, p, eps)
                worst = max(worst, float(np.max(np.abs(projection(once, p, eps) - once))))
            return worst

        def inside(p=p):
            worst = 0.0
            for _ in range(200):
                d = rng.normal(0, 0.1, (8, 8))
                eps = float(rng.uniform(0.01, 0.2))
                norm = np.max(np.abs(projection(d, p, eps))) if p == math.inf else np.linalg.norm(projection(d, p, eps))
                worst = max(worst, norm / eps - 1.0)
            return worst

        def fixed(p=p):
            worst = 0.0
            for _ in range(200):
                d = rng.normal(0, 0.01, (8, 8))
                eps = 2.0 * (np.max(np.abs(d)) if p == math.inf else np.linalg.norm(d))
                worst = max(worst, float(np.max(np.abs(projection(d, p, eps) - d))))
            return worst

        tag = "inf" if p == math.inf else "2"
        checks.append(_timed(s, f"l{tag}_idempotent_bit_exact", idem, 0.0))
        checks.append(_timed(s, f"l{tag}_inside_ball", inside, 1e-12))
        checks.append(_timed(s, f"l{tag}_interior_unchanged", fixed, 0.0))
    checks.append(_timed(s, "linf_clamp_example",
                         lambda: np.max(np.abs(projection(np.array([0.2, -0.01]), math.inf, 0.05)
                                               - np.array([0.05, -0.01]))), 0.0))
    checks.append(_timed(s, "l2_rescale_example",
                         lambda: np.max(np.abs(projection(np.array([3.0, 4.0]), 2, 1.0)
                                               - np.array([0.6, 0.8]))), 1e-15))
    return checks


def suite_retrieval(rng, n_queries=1000, n_reports=200, d=32):
    def mismatches():
        ids = [f"r{i:04d}" for i in range(n_reports)]
        m = _unit(rng, n_reports, d)
        # duplicate a few rows to exercise the tie rule
        m[5] = m[17]
        m[40] = m[3]
        index = ragsim.EmbeddingIndex("oracle", ids, m)
        bad = 0
        for _ in range(n_queries):
            q = _unit(rng, d)
            got = ragsim.retrieve_topk(index, q, 5).ids
            scores = m @ q
            order = sorted(range(n_reports), key=lambda j: (-scores[j], ids[j]))
            bad += got != [ids[j] for j in order[:5]]
        return bad

    return [_timed("retrieval", f"topk_vs_full_sort_{n_queries}_queries", mismatches, 0)]


def suite_kernels(rng):
    s = "kernels"
    prev = kernels.backend()
    cases = {
        "patch_mean": lambda: kernels.patch_mean(x3, 4),
        "patch_mean_adjoint": lambda: kernels.patch_mean_adjoint(g3, 4),
        "bilinear_resize": lambda: kernels.bilinear_resize(x3[0], 29, 29),
        "quantize": lambda: kernels.quantize(x3, 15),
        "topk_indices": lambda: kernels.topk_indices(np.round(x3[0], 1), 5).astype(np.float64),
    }
    x3 = rng.uniform(0, 1, (3, 32, 32))
    g3 = rng.normal(size=(3, 8, 8))
    checks = []
    try:
        for name, fn in cases.items():
            def diff(fn=fn):
                kernels.set_backend("numpy")
                a = fn()
                kernels.set_backend("numba")
                b = fn()
                return float(np.max(np.abs(a - b)))
            checks.append(_timed(s, f"{name}_numba_matches_numpy", diff, 0.0))
    finally:
        kernels.set_backend(prev)
    return checks


def suite_gradients(rng, n_instances=100):
    s = "gradients"

    def encoder_backward():
        worst = 0.0
        for _ in range(n_instances):
            (pair,) = toy_models(rng, 1, size=4, patch=1, hidden=8, embed_dim=6, scale=3.0)
            x0 = rng.uniform(0, 1, (4, 4))
            tp, tn = _unit(rng, 6), _unit(rng, 3, 6)

            def f(x):
                tape = Tape()
                xin = tape.input(x[None])
                v = image_branch(tape, pair, xin)
                out = tape.sum(atk.mpil_on_tape(tape, v, tp, tn, 0.07))
                return out, tape, xin

            out, tape, xin = f(x0)
            g = backward(tape, out, xin)[0]
            fd = fd_gradient(lambda x: float(f(x)[0].value), x0, 1e-5)
            worst = max(worst, max_rel_error(g, fd))
        return worst

    def mpil_hvp():
        worst = 0.0
        for _ in range(n_instances):
            v0, d = _unit(rng, 6), _unit(rng, 6)
            tp, tn = _unit(rng, 6), _unit(rng, 3, 6)
            tape = Tape()
            vin = tape.input(v0[None])
            out = tape.sum(atk.mpil_on_tape(tape, vin, tp, tn, 0.07))
            h = hvp(tape, out, vin, d[None])[0]
            h_step = 1e-4
            fd = (atk.mpil_grad(v0 + h_step * d, tp, tn, 0.07)
                  - atk.mpil_grad(v0 - h_step * d, tp, tn, 0.07)) / (2 * h_step)
            worst = max(worst, max_rel_error(h, fd))
        return worst

    def total_gradient():
        worst = 0.0
        for i in range(n_instances):
            members, image, delta, spec = toy_instance(rng, n_models=2 + i % 2)
            cfg = atk.AttackConfig(lambda_irm=0.1 if i % 2 else 1.0)
            _, g = atk.total_objective(members, image, delta, spec, cfg)
            worst = max(worst, max_rel_error(g, batched_fd(members, image, delta, spec, cfg)))
        return worst

    return [
        _timed(s, "mpil_encoder_backward_vs_fd_4x4", encoder_backward, 1e-5),
        _timed(s, "mpil_hvp_vs_fd_of_gradient", mpil_hvp, 1e-4),
        _timed(s, "opt2_total_gradient_vs_fd_8x8_with_irm", total_gradient, 1e-4),
    ]


def run_verify(suites=SUITES, seed=0, projection=project_lp, n_instances=100):
    rng = Rng(seed).child("verify")
    checks = []
    for name in suites:
        sub = rng.child(name)
        if name == "losses":
            checks += suite_losses(sub)
        elif name == "projection":
            checks += suite_projection(sub, projection)
        elif name == "retrieval":
            checks += suite_retrieval(sub)
        elif name == "kernels":
            checks += suite_kernels(sub)
        elif name == "gradients":
            checks += suite_gradients(sub, n_instances)
        else:
            raise ValueError(f"unknown suite {name!r}; choose from {SUITES}")
    return VerifyReport(checks)
