"""Adversarial objectives and optimizers.

Losses are evaluated for a batch of images at once: every per-image quantity
is independent of the others, so batching only amortizes interpreter
overhead. The single-image functions (``mpil_loss``, ``ensemble_loss``,
``irm_penalty``, ``total_objective``, ``dual_loop_attack``...) wrap the batch
versions.

Naming follows the attack's conventions: ``t_pos`` is the ground-truth report
embedding the perturbation pushes away from, ``t_negs`` are the attacker's
target reports it pulls toward.
"""

import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .encoders import encode_texts, image_branch
from .errors import ContractError
from .numkit import Tape, backward, hvp, lp_norm, project_lp, vjp

log = logging.getLogger(__name__)

UNIT_TOL = 1e-6


@dataclass(frozen=True)
class AttackConfig:
    eps: float = 8 / 255
    p: float = math.inf
    eta: float = 1 / 255
    tau: float = 0.07
    lambda_irm: float = 0.1
    mu: float = 1.0
    t_in: int = 5
    t_out: int = 100
    reuse_momentum_across_loops: bool = True
    irm_enabled: bool = True
    k_targets: int = 5
    # False: the IRM penalty is reported but contributes no gradient
    irm_second_order: bool = True
    # ENS/SVRE step budget; None matches the dual loop (t_out * (t_in + 1))
    baseline_steps: int = None
    # "mpil" or "neg_sim" (push away from the ground-truth report only)
    baseline_loss: str = "mpil"

    def __post_init__(self):
        if self.p in ("inf", "linf"):
            object.__setattr__(self, "p", math.inf)
        self.validate()

    def validate(self):
        if not self.eps > 0:
            raise ContractError("eps must be > 0")
        if not self.eta > 0:
            raise ContractError("eta must be > 0")
        if not self.tau > 0:
            raise ContractError("tau must be > 0")
        if self.p not in (2, math.inf):
            raise ContractError(f"p must be 2 or inf, got {self.p!r}")
        if self.lambda_irm < 0 or self.mu < 0:
            raise ContractError("lambda_irm and mu must be >= 0")
        for name in ("t_in", "t_out", "k_targets"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v < 0:
                raise ContractError(f"{name} must be a nonnegative integer")
        if self.k_targets < 1:
            raise ContractError("k_targets must be >= 1")
        if self.baseline_loss not in ("mpil", "neg_sim"):
            raise ContractError(f"unknown baseline loss {self.baseline_loss!r}")

    @property
    def n_baseline_steps(self):
        if self.baseline_steps is not None:
            return int(self.baseline_steps)
        return self.t_out * (self.t_in + 1)

    @property
    def irm_weight(self):
        return self.lambda_irm if self.irm_enabled else 0.0

    def to_dict(self):
        d = {f: getattr(self, f) for f in self.__dataclass_fields__}
        d["p"] = "inf" if self.p == math.inf else 2
        return d

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ContractError(f"unknown attack keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class TargetSpec:
    t_pos: object
    t_negs: tuple

    def __post_init__(self):
        object.__setattr__(self, "t_negs", tuple(self.t_negs))
        if not self.t_negs:
            raise ContractError("need at least one attacker report")
        if self.t_pos.id in {r.id for r in self.t_negs}:
            raise ContractError("ground-truth report is among the attacker reports")
        labels = {r.label for r in self.t_negs}
        if len(labels) != 1:
            raise ContractError(f"attacker reports carry mixed labels {sorted(labels)}")

    @property
    def target_label(self):
        return self.t_negs[0].label


# ---------------------------------------------------------------------------
# losses on the tape


def mpil_on_tape(tape, v, t_pos, t_negs, tau):
    """Per-row MPIL for embeddings ``v`` (B, d); returns a (B,) node.

    ``t_pos`` is (B, d) or (d,), ``t_negs`` is (K, d) or (B, K, d).
    """
    b, d = v.shape
    vn = tape.normalize(v)
    s_pos = tape.dot(vn, t_pos)
    s_neg = tape.dot(tape.reshape(vn, (b, 1, d)), t_negs)
    inv = 1.0 / tau
    # -log(A / (A + B)) = softplus(log B - log A); no cancellation when tiny
    attract = tape.logsumexp(tape.scale(s_neg, inv))
    return tape.softplus(tape.sub(tape.scale(s_pos, inv), attract))


def neg_sim_on_tape(tape, v, t_pos, t_negs, tau):
    """Similarity to the ground-truth report (minimized by the attack)."""
    return tape.dot(tape.normalize(v), t_pos)


def _check_unit(name, arr):
    n = np.linalg.norm(np.atleast_2d(arr), axis=-1)
    if np.any(np.abs(n - 1.0) > UNIT_TOL):
        raise ContractError(f"{name} must be unit-norm (got norms {n})")


def mpil_loss(v, t_pos, t_negs, tau):
    v = np.asarray(v, dtype=np.float64)
    t_pos = np.asarray(t_pos, dtype=np.float64)
    t_negs = np.atleast_2d(np.asarray(t_negs, dtype=np.float64))
    if t_negs.shape[0] == 0 or t_negs.size == 0:
        raise ContractError("t_negs is empty")
    if not tau > 0:
        raise ContractError("tau must be > 0")
    if not (v.shape == t_pos.shape == t_negs.shape[1:]):
        raise ContractError("embedding dimensions differ")
    for name, arr in (("v", v), ("t_pos", t_pos), ("t_negs", t_negs)):
        _check_unit(name, arr)
    tape = Tape()
    out = mpil_on_tape(tape, tape.input(v[None]), t_pos, t_negs, tau)
    return float(out.value[0])


def mpil_grad(v, t_pos, t_negs, tau):
    """Gradient of MPIL w.r.t. the embedding ``v``."""
    tape = Tape()
    vin = tape.input(np.asarray(v, dtype=np.float64)[None])
    loss = tape.sum(mpil_on_tape(tape, vin, t_pos, np.atleast_2d(t_negs), tau))
    return backward(tape, loss, vin)[0]


# ---------------------------------------------------------------------------
# per-model passes and the combined objective


@dataclass
class TextTargets:
    """Text embeddings of one target configuration under one encoder."""

    pos: np.ndarray  # (B, d)
    negs: np.ndarray  # (K, d)


def text_targets(pair, specs):
    pos = encode_texts(pair, [s.t_pos for s in specs])
    negs = encode_texts(pair, specs[0].t_negs)
    return TextTargets(pos, negs)


def _shared_negs(specs):
    ids = tuple(r.id for r in specs[0].t_negs)
    if any(tuple(r.id for r in s.t_negs) != ids for s in specs):
        raise ContractError("batched attacks need one shared attacker report set")


class _ModelPass:
    """Forward through one encoder and the loss, keeping both tapes."""

    def __init__(self, pair, x, targets, tau, loss_fn=mpil_on_tape):
        self.enc = Tape()
        self.x = self.enc.input(x)
        self.v = image_branch(self.enc, pair, self.x)
        self.loss_tape = Tape()
        self.v_in = self.loss_tape.input(self.v.value)
        per = loss_fn(self.loss_tape, self.v_in, targets.pos, targets.negs, tau)
        self.per_image = per.value.copy()
        self.total = self.loss_tape.sum(per)
        self.g = backward(self.loss_tape, self.total, self.v_in)

    def hvp(self, direction):
        return hvp(self.loss_tape, self.total, self.v_in, direction)

    def pullback(self, cotangent):
        return vjp(self.enc, self.v, cotangent, self.x)


@dataclass
class ObjectiveTerms:
    l_ens: np.ndarray  # (B,)
    l_irm: np.ndarray  # (B,)
    l_total: np.ndarray  # (B,)
    grad: np.ndarray = None  # (B, H, W)
    embed_grads: list = field(default_factory=list)


def objective_batch(members, x, targets, cfg, *, irm=True, grad=True, loss_fn=mpil_on_tape):
    """Ensemble loss + lambda * IRM penalty for a batch of adversarial images.

    ``targets`` holds one TextTargets per member. With ``irm`` false the
    penalty is still reported but takes no part in the total or the gradient.
    The IRM gradient uses, for each member j,
    d L_IRM / d v_j = (2 / F) H_j (g_j - g_bar),
    which holds because the deviations g_i - g_bar sum to zero.
    """
    if not members:
        raise ContractError("surrogate subset is empty")
    dims = {m.arch.embed_dim for m in members}
    if len(dims) != 1:
        raise ContractError(f"members disagree on embedding dimension: {sorted(dims)}")
    f = len(members)
    passes = [_ModelPass(m, x, t, cfg.tau, loss_fn) for m, t in zip(members, targets)]
    l_ens = _mean([p.per_image for p in passes])
    g_bar = _mean([p.g for p in passes])
    devs = [p.g - g_bar for p in passes]
    l_irm = _mean([np.sum(dv * dv, axis=-1) for dv in devs])
    lam = cfg.lambda_irm if irm else 0.0
    terms = ObjectiveTerms(l_ens, l_irm, l_ens + lam * l_irm, embed_grads=[p.g for p in passes])
    if not grad:
        return terms
    second = lam > 0 and cfg.irm_second_order and f > 1
    # per-model gradient of L_j + lambda * F * (IRM share of model j)
    parts = []
    for p, dv in zip(passes, devs):
        cot = p.g + (2.0 * lam) * p.hvp(dv) if second else p.g
        parts.append(p.pullback(cot))
    terms.grad = _mean(parts)
    return terms


def _mean(xs):
    """Mean anchored at the first term: exact when every term is identical."""
    x0 = xs[0]
    if len(xs) == 1:
        return x0
    return x0 + sum(x - x0 for x in xs[1:]) / len(xs)


def _stack(images):
    return np.stack([im.pixels for im in images])


def _single(members, image, delta, spec, cfg):
    x = image.pixels + np.asarray(delta, dtype=np.float64)
    targets = [text_targets(m, [spec]) for m in members]
    return x[None], targets


def ensemble_loss(members, image, delta, spec, tau):
    cfg = AttackConfig(tau=tau)
    x, targets = _single(members, image, delta, spec, cfg)
    return float(objective_batch(members, x, targets, cfg, irm=False, grad=False).l_ens[0])


def irm_penalty(members, image, delta, spec, tau):
    cfg = AttackConfig(tau=tau)
    x, targets = _single(members, image, delta, spec, cfg)
    return float(objective_batch(members, x, targets, cfg, irm=False, grad=False).l_irm[0])


def total_objective(members, image, delta, spec, cfg):
    """``(ensemble + lambda * irm, gradient w.r.t. delta)`` for one image."""
    x, targets = _single(members, image, delta, spec, cfg)
    t = objective_batch(members, x, targets, cfg, irm=cfg.irm_enabled)
    return float(t.l_total[0]), t.grad[0]


# ---------------------------------------------------------------------------
# update rule


def momentum_step(delta, m, grad, cfg, image=None):
    """``m' = mu m + grad``; ``delta' = Proj(delta - eta sign(m'))``.

    With ``image`` given, ``delta'`` is also trimmed so that image + delta'
    stays inside [0, 1]. Leading axis of a 3-D ``delta`` indexes images.
    """
    delta = np.asarray(delta, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if delta.shape != grad.shape or np.shape(m) != delta.shape:
        raise ContractError("delta, momentum and gradient shapes differ")
    m_new = cfg.mu * m + grad
    batched = delta.ndim == 3
    d_new = project_lp(delta - cfg.eta * np.sign(m_new), cfg.p, cfg.eps, per_row=batched)
    if image is not None:
        # re-project: the subtraction can land an ulp outside the ball
        d_new = project_lp(np.clip(image + d_new, 0.0, 1.0) - image, cfg.p, cfg.eps, per_row=batched)
    return d_new, m_new


def _sign_step(delta, direction, cfg, clean):
    d_new = project_lp(delta - cfg.eta * np.sign(direction), cfg.p, cfg.eps, per_row=True)
    x = np.clip(clean + d_new, 0.0, 1.0)
    # x - clean can exceed eps by an ulp; keep the stored perturbation in the ball
    return project_lp(x - clean, cfg.p, cfg.eps, per_row=True), x


# ---------------------------------------------------------------------------
# traces


@dataclass
class StepRecord:
    loop: str
    step: int
    l_ens: float
    l_irm: float
    l_total: float
    m_inf_norm: float
    delta_norm: float = 0.0
    x_min: float = 0.0
    x_max: float = 1.0

    EXPORT = ("loop", "step", "l_ens", "l_irm", "l_total", "m_inf_norm")

    def export(self):
        return {k: getattr(self, k) for k in self.EXPORT}


@dataclass
class AttackTrace:
    image_id: str
    method: str
    surrogates: list
    steps: list = field(default_factory=list)
    delta: np.ndarray = None
    adversarial: np.ndarray = None

    def __len__(self):
        return len(self.steps)

    def feasible(self, eps, p, tol=1e-12):
        ok = all(s.delta_norm <= eps + tol and s.x_min >= 0.0 and s.x_max <= 1.0 for s in self.steps)
        return ok and lp_norm(self.delta, p) <= eps + tol

    def to_jsonl(self, path):
        lines = [json.dumps(s.export()) for s in self.steps]
        lines.append(json.dumps({
            "trailer": True,
            "image_id": self.image_id,
            "method": self.method,
            "surrogates": list(self.surrogates),
            "shape": list(self.delta.shape),
            "delta": [float(v) for v in self.delta.ravel()],
        }))
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def from_jsonl(cls, path):
        rows = [json.loads(line) for line in Path(path).read_text().splitlines() if line]
        trailer = rows[-1]
        if not trailer.get("trailer"):
            raise ContractError(f"{path}: missing trailer record")
        steps = [StepRecord(**r) for r in rows[:-1]]
        delta = np.asarray(trailer["delta"], dtype=np.float64).reshape(trailer["shape"])
        return cls(trailer["image_id"], trailer["method"], trailer["surrogates"], steps, delta)


class _Recorder:
    def __init__(self, images, method, surrogates, cfg):
        self.traces = [AttackTrace(im.id, method, list(surrogates)) for im in images]
        self.cfg = cfg

    def add(self, loop, step, terms_ens, terms_irm, terms_total, m, delta, x):
        m_inf = np.max(np.abs(m.reshape(len(m), -1)), axis=1)
        dn = lp_norm(delta, self.cfg.p, per_row=True)
        xmin = x.reshape(len(x), -1).min(axis=1)
        xmax = x.reshape(len(x), -1).max(axis=1)
        for i, tr in enumerate(self.traces):
            tr.steps.append(StepRecord(
                loop, step, float(terms_ens[i]), float(terms_irm[i]), float(terms_total[i]),
                float(m_inf[i]), float(dn[i]), float(xmin[i]), float(xmax[i]),
            ))

    def finish(self, delta, x):
        for i, tr in enumerate(self.traces):
            tr.delta = delta[i].copy()
            tr.adversarial = x[i].copy()
        return self.traces


# ---------------------------------------------------------------------------
# attacks


def dual_loop_attack_batch(images, specs, sset, cfg):
    """Nested dual loop: each outer iteration runs ``t_in`` IRM-regularized
    steps on the train surrogates, then one ensemble-only step on the test
    surrogates. Returns one AttackTrace per image.
    """
    cfg.validate()
    _shared_negs(specs)
    train, test = sset.train, sset.test
    if cfg.t_out > 0 and not test:
        log.warning("F_test is empty: outer refinement is a no-op")
    clean = _stack(images)
    delta = np.zeros_like(clean)
    x = clean.copy()
    m = np.zeros_like(clean)
    t_train = [text_targets(mem, specs) for mem in train]
    t_test = [text_targets(mem, specs) for mem in test]
    rec = _Recorder(images, "medusa", sset.names, cfg)
    step = 0
    for _ in range(cfg.t_out):
        for _ in range(cfg.t_in):
            terms = objective_batch(train, x, t_train, cfg, irm=cfg.irm_enabled)
            m = cfg.mu * m + terms.grad
            delta, x = _sign_step(delta, m, cfg, clean)
            rec.add("inner", step, terms.l_ens, terms.l_irm, terms.l_total, m, delta, x)
            step += 1
        if test:
            terms = objective_batch(test, x, t_test, cfg, irm=False)
            if cfg.reuse_momentum_across_loops:
                m = cfg.mu * m + terms.grad
                direction = m
            else:
                direction = terms.grad
            delta, x = _sign_step(delta, direction, cfg, clean)
            rec.add("outer", step, terms.l_ens, np.zeros(len(x)), terms.l_ens, direction, delta, x)
            step += 1
    return rec.finish(delta, x)


def dual_loop_attack(image, spec, sset, cfg):
    return dual_loop_attack_batch([image], [spec], sset, cfg)[0]


def _baseline_loss_fn(cfg):
    return mpil_on_tape if cfg.baseline_loss == "mpil" else neg_sim_on_tape


def attack_ens_batch(images, specs, sset, cfg, n_steps=None):
    """Momentum sign attack on the uniform average over every surrogate."""
    cfg.validate()
    _shared_negs(specs)
    members = list(sset.members)
    n_steps = cfg.n_baseline_steps if n_steps is None else n_steps
    clean = _stack(images)
    delta, x, m = np.zeros_like(clean), clean.copy(), np.zeros_like(clean)
    targets = [text_targets(mem, specs) for mem in members]
    loss_fn = _baseline_loss_fn(cfg)
    rec = _Recorder(images, "ens", sset.names, cfg)
    for step in range(n_steps):
        terms = objective_batch(members, x, targets, cfg, irm=False, loss_fn=loss_fn)
        m = cfg.mu * m + terms.grad
        delta, x = _sign_step(delta, m, cfg, clean)
        rec.add("inner", step, terms.l_ens, terms.l_irm, terms.l_total, m, delta, x)
    return rec.finish(delta, x)


def attack_ens(image, spec, sset, cfg, n_steps=None):
    return attack_ens_batch([image], [spec], sset, cfg, n_steps)[0]


def attack_svre_batch(images, specs, sset, cfg, n_steps=None, record_g=None):
    """Variance-reduced recursion on the ensemble gradient.

    g_0 = v_0 = grad L(delta_0); for t >= 1
    g_t = grad L(delta_t) - grad L(delta_{t-1}) + v_{t-1},  v_t = v_{t-1} + g_t.
    Each step moves along -sign(g_t).
    """
    cfg.validate()
    _shared_negs(specs)
    members = list(sset.members)
    n_steps = cfg.n_baseline_steps if n_steps is None else n_steps
    clean = _stack(images)
    delta, x = np.zeros_like(clean), clean.copy()
    targets = [text_targets(mem, specs) for mem in members]
    loss_fn = _baseline_loss_fn(cfg)
    rec = _Recorder(images, "svre", sset.names, cfg)
    v = prev = None
    for step in range(n_steps):
        terms = objective_batch(members, x, targets, cfg, irm=False, loss_fn=loss_fn)
        cur = terms.grad
        if v is None:
            g = v = cur
        else:
            g = cur - prev + v
            v = v + g
        prev = cur
        if record_g is not None:
            record_g.append(g.copy())
        delta, x = _sign_step(delta, g, cfg, clean)
        rec.add("inner", step, terms.l_ens, terms.l_irm, terms.l_total, v, delta, x)
    return rec.finish(delta, x)


def attack_svre(image, spec, sset, cfg, n_steps=None, record_g=None):
    return attack_svre_batch([image], [spec], sset, cfg, n_steps, record_g)[0]


METHODS = {
    "medusa": dual_loop_attack_batch,
    "ens": attack_ens_batch,
    "svre": attack_svre_batch,
}


def run_attack(method, images, specs, sset, cfg):
    try:
        fn = METHODS[method]
    except KeyError:
        raise ContractError(f"unknown attack method {method!r}") from None
    return fn(images, specs, sset, cfg)


def with_overrides(cfg, **kw):
    return replace(cfg, **kw)
