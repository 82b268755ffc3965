"""Dense helpers that sit outside the tape."""

import math

import numpy as np

from ..errors import ContractError, DegenerateVectorError

NORM_FLOOR = 1e-12


def as_tensor(x):
    """Float64 copy of ``x``; rejects NaN/Inf."""
    arr = np.array(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ContractError("tensor contains non-finite entries")
    return arr


def cosine_sim(a, b):
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ContractError(f"length mismatch: {a.size} vs {b.size}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na <= NORM_FLOOR or nb <= NORM_FLOOR:
        raise DegenerateVectorError("cosine similarity of a zero-norm vector")
    return float(np.dot(a, b) / (na * nb))


def _check_p(p):
    if p == 2:
        return 2
    if p == math.inf or p in ("inf", "linf"):
        return math.inf
    raise ContractError(f"unsupported norm order {p!r}; use 2 or inf")


def lp_norm(delta, p, per_row=False):
    p = _check_p(p)
    d = np.asarray(delta, dtype=np.float64)
    flat = d.reshape(d.shape[0], -1) if per_row else d.reshape(1, -1)
    if p == 2:
        n = np.sqrt(np.sum(flat * flat, axis=1))
    else:
        n = np.max(np.abs(flat), axis=1) if flat.shape[1] else np.zeros(flat.shape[0])
    return n if per_row else float(n[0])


def _shrink_l2(flat, eps):
    """Radially rescale rows with norm > eps; guarantees the result norm <= eps."""
    out = flat.copy()
    norms = np.sqrt(np.sum(flat * flat, axis=1))
    for i in np.nonzero(norms > eps)[0]:
        row = flat[i] * (eps / norms[i])
        # floating rounding can leave the norm a few ulps above eps
        while np.sqrt(np.sum(row * row)) > eps:
            row = row * (1.0 - 2.0**-52)
        out[i] = row
    return out


def project_lp(delta, p, eps, per_row=False):
    """Project onto the ``p``-norm ball of radius ``eps``.

    With ``per_row`` the leading axis indexes independent perturbations.
    Points already inside are returned unchanged, so the map is idempotent.
    """
    p = _check_p(p)
    if not eps > 0:
        raise ContractError(f"eps must be positive, got {eps}")
    d = np.asarray(delta, dtype=np.float64)
    if p == math.inf:
        return np.clip(d, -eps, eps)
    flat = d.reshape(d.shape[0], -1) if per_row else d.reshape(1, -1)
    return _shrink_l2(flat, eps).reshape(d.shape)


def fd_gradient(f, x, h=1e-5):
    """Central finite-difference gradient of scalar ``f`` at ``x``. Oracle only."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return g


def max_rel_error(approx, exact, floor=1e-8):
    """``max|approx - exact| / max(max|exact|, floor)``."""
    approx = np.asarray(approx, dtype=np.float64)
    exact = np.asarray(exact, dtype=np.float64)
    scale = max(float(np.max(np.abs(exact))) if exact.size else 0.0, floor)
    return float(np.max(np.abs(approx - exact))) / scale if exact.size else 0.0
