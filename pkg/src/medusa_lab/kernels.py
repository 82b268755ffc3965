"""Hot loop kernels with a numba path and a pure-numpy path.

The numba path is used when numba imports and ``MEDUSA_LAB_NO_JIT`` is unset
(or ``0``). Both paths must return bit-identical results; the test suite runs
them side by side and ``benchmarks/bench_kernels.py`` times them.
"""

import os

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

__all__ = [
    "backend",
    "set_backend",
    "patch_mean",
    "patch_mean_adjoint",
    "bilinear_resize",
    "quantize",
    "topk_indices",
]

_BACKEND = (
    "numba"
    if numba is not None and os.environ.get("MEDUSA_LAB_NO_JIT", "0") in ("", "0")
    else "numpy"
)


def backend():
    return _BACKEND


def set_backend(name):
    """Switch kernel implementation at runtime; returns the previous backend."""
    global _BACKEND
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "numba" and numba is None:
        raise RuntimeError("numba is not installed")
    prev, _BACKEND = _BACKEND, name
    return prev


def _njit(fn):
    if numba is None:
        return fn
    return numba.njit(cache=True, nogil=True)(fn)


# --------------------------------------------------------------------------
# patch pooling


def _patch_mean_np(x, p):
    # sequential sum in the jitted loop's order, so both paths agree exactly
    b, h, w = x.shape
    acc = np.zeros((b, h // p, w // p))
    for u in range(p):
        for v in range(p):
            acc += x[:, u::p, v::p][:, : h // p, : w // p]
    return acc * (1.0 / (p * p))


@_njit
def _patch_mean_nb(x, p):
    b, h, w = x.shape
    hp, wp = h // p, w // p
    out = np.zeros((b, hp, wp))
    inv = 1.0 / (p * p)
    for n in range(b):
        for i in range(hp):
            for j in range(wp):
                acc = 0.0
                for u in range(p):
                    for v in range(p):
                        acc += x[n, i * p + u, j * p + v]
                out[n, i, j] = acc * inv
    return out


def _patch_mean_adjoint_np(g, p):
    return np.repeat(np.repeat(g, p, axis=1), p, axis=2) * (1.0 / (p * p))


@_njit
def _patch_mean_adjoint_nb(g, p):
    b, hp, wp = g.shape
    out = np.empty((b, hp * p, wp * p))
    inv = 1.0 / (p * p)
    for n in range(b):
        for i in range(hp * p):
            for j in range(wp * p):
                out[n, i, j] = g[n, i // p, j // p] * inv
    return out


def patch_mean(x, p):
    """Mean over non-overlapping ``p x p`` patches of a ``(B, H, W)`` stack."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    if _BACKEND == "numba":
        return _patch_mean_nb(x, p)
    return _patch_mean_np(x, p)


def patch_mean_adjoint(g, p):
    g = np.ascontiguousarray(g, dtype=np.float64)
    if _BACKEND == "numba":
        return _patch_mean_adjoint_nb(g, p)
    return _patch_mean_adjoint_np(g, p)


# --------------------------------------------------------------------------
# bilinear resize (half-pixel centres, clamped edges)


def _bilinear_np(img, out_h, out_w):
    h, w = img.shape
    ys = np.clip((np.arange(out_h) + 0.5) * (h / out_h) - 0.5, 0.0, h - 1.0)
    xs = np.clip((np.arange(out_w) + 0.5) * (w / out_w) - 0.5, 0.0, w - 1.0)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    top = img[y0][:, x0] * (1.0 - wx) + img[y0][:, x1] * wx
    bot = img[y1][:, x0] * (1.0 - wx) + img[y1][:, x1] * wx
    return top * (1.0 - wy) + bot * wy


@_njit
def _bilinear_nb(img, out_h, out_w):
    h, w = img.shape
    out = np.empty((out_h, out_w))
    for i in range(out_h):
        sy = (i + 0.5) * (h / out_h) - 0.5
        sy = min(max(sy, 0.0), h - 1.0)
        y0 = int(np.floor(sy))
        y1 = min(y0 + 1, h - 1)
        wy = sy - y0
        for j in range(out_w):
            sx = (j + 0.5) * (w / out_w) - 0.5
            sx = min(max(sx, 0.0), w - 1.0)
            x0 = int(np.floor(sx))
            x1 = min(x0 + 1, w - 1)
            wx = sx - x0
            top = img[y0, x0] * (1.0 - wx) + img[y0, x1] * wx
            bot = img[y1, x0] * (1.0 - wx) + img[y1, x1] * wx
            out[i, j] = top * (1.0 - wy) + bot * wy
    return out


def bilinear_resize(img, out_h, out_w):
    img = np.ascontiguousarray(img, dtype=np.float64)
    if _BACKEND == "numba":
        return _bilinear_nb(img, int(out_h), int(out_w))
    return _bilinear_np(img, int(out_h), int(out_w))


# --------------------------------------------------------------------------
# quantization, round half away from zero


def _quantize_np(x, levels):
    y = x * levels
    return np.sign(y) * np.floor(np.abs(y) + 0.5) / levels


@_njit
def _quantize_nb(x, levels):
    flat = x.ravel()
    out = np.empty_like(flat)
    for i in range(flat.size):
        y = flat[i] * levels
        if y >= 0.0:
            out[i] = np.floor(y + 0.5) / levels
        else:
            out[i] = -np.floor(-y + 0.5) / levels
    return out.reshape(x.shape)


def quantize(x, levels):
    """Snap ``x`` to the grid ``{n / levels}``."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    if _BACKEND == "numba":
        out = _quantize_nb(x, float(levels))
    else:
        out = _quantize_np(x, float(levels))
    # -0.0 -> 0.0 so both paths serialize identically
    return out + 0.0


# --------------------------------------------------------------------------
# top-k rows; ties go to the lower column index


def _topk_np(scores, k):
    order = np.argsort(-scores, axis=1, kind="stable")
    return order[:, :k]


@_njit
def _topk_nb(scores, k):
    q, n = scores.shape
    out = np.empty((q, k), dtype=np.int64)
    best = np.empty(k)
    for r in range(q):
        filled = 0
        for j in range(n):
            s = scores[r, j]
            if filled == k and not s > best[k - 1]:
                continue
            pos = filled if filled < k else k - 1
            while pos > 0 and s > best[pos - 1]:
                if pos < k:
                    best[pos] = best[pos - 1]
                    out[r, pos] = out[r, pos - 1]
                pos -= 1
            best[pos] = s
            out[r, pos] = j
            if filled < k:
                filled += 1
    return out


def topk_indices(scores, k):
    """Column indices of the ``k`` largest entries per row, best first."""
    scores = np.ascontiguousarray(np.atleast_2d(scores), dtype=np.float64)
    k = min(int(k), scores.shape[1])
    if _BACKEND == "numba":
        return _topk_nb(scores, k)
    return _topk_np(scores, k)
