"""A small reverse-mode tape over numpy arrays.

Every primitive knows its forward value and vector-Jacobian product. The ones
used by the encoders and the contrastive losses also carry a tangent rule
(``jvp``) and the tangent of their VJP, which is what forward-over-reverse
Hessian-vector products need. Leading axes are treated as a batch: a scalar
output that sums per-example losses yields per-example gradients, and an HVP
with a stacked direction yields per-example Hessian products.
"""

import numpy as np

from ..errors import ContractError, UnsupportedPrimitiveError

NORM_FLOOR = 1e-12


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _add(a, b):
    if a is None:
        return b
    if b is None:
        return a
    return a + b


class Node:
    __slots__ = ("tape", "index")

    def __init__(self, tape, index):
        self.tape = tape
        self.index = index

    @property
    def value(self):
        return self.tape._values[self.index]

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        op = self.tape._ops[self.index]
        name = op[0].name if op is not None else "leaf"
        return f"Node({self.index}, {name}, shape={self.shape})"


# ---------------------------------------------------------------------------
# primitives


class Primitive:
    name = "primitive"
    second_order = True

    def forward(self, vals, attrs):
        raise NotImplementedError

    def vjp(self, g, vals, out, attrs):
        raise NotImplementedError

    def jvp(self, dots, vals, out, attrs):
        raise UnsupportedPrimitiveError(f"{self.name} has no tangent rule")

    def vjp_tangent(self, g, gd, vals, dots, out, outdot, attrs):
        raise UnsupportedPrimitiveError(f"{self.name} has no tangent rule")


class _Linear(Primitive):
    """Primitives linear in their inputs: tangents reuse the forward map."""

    def jvp(self, dots, vals, out, attrs):
        filled = [d if d is not None else np.zeros_like(v) for d, v in zip(dots, vals)]
        return self.forward(filled, attrs)

    def vjp_tangent(self, g, gd, vals, dots, out, outdot, attrs):
        if gd is None:
            return (None,) * len(vals)
        return self.vjp(gd, vals, out, attrs)


class Affine(Primitive):
    name = "affine"

    def forward(self, vals, attrs):
        x, w, b = vals
        return x @ w.T + b

    def vjp(self, g, vals, out, attrs):
        x, w, b = vals
        m, n = w.shape
        g2 = g.reshape(-1, m)
        return g @ w, g2.T @ x.reshape(-1, n), _unbroadcast(g, b.shape)

    def jvp(self, dots, vals, out, attrs):
        x, w, b = vals
        dx, dw, db = dots
        r = None
        if dx is not None:
            r = dx @ w.T
        if dw is not None:
            r = _add(r, x @ dw.T)
        if db is not None:
            r = _add(r, np.broadcast_to(db, out.shape))
        return r

    def vjp_tangent(self, g, gd, vals, dots, out, outdot, attrs):
        x, w, b = vals
        dx, dw, _ = dots
        m, n = w.shape
        gx = gw = gb = None
        if gd is not None:
            gx, gw, gb = self.vjp(gd, vals, out, attrs)
        if dw is not None:
            gx = _add(gx, g @ dw)
        if dx is not None:
            gw = _add(gw, g.reshape(-1, m).T @ dx.reshape(-1, n))
        return gx, gw, gb


class Tanh(Primitive):
    name = "tanh"

    def forward(self, vals, attrs):
        return np.tanh(vals[0])

    def vjp(self, g, vals, out, attrs):
        return (g * (1.0 - out * out),)

    def jvp(self, dots, vals, out, attrs):
        return dots[0] * (1.0 - out * out)

    def vjp_tangent(self, g, gd, vals, dots, out, outdot, attrs):
        r = None if gd is None else gd * (1.0 - out * out)
        if outdot is not None:
            r = _add(r, -2.0 * g * out * outdot)
        return (r,)


class Softplus(Primitive):
    """log(1 + e^x), evaluated without cancellation for large |x|."""

    name = "softplus"

    @staticmethod
    def _sig(x):
        e = np.exp(-np.abs(x))
        return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))

    def forward(self, vals, attrs):
        x = vals[0]
        return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))

    def vjp(self, g, vals, out, attrs):
        return (g * self._sig(vals[0]),)

    def jvp(self, dots, vals, out, attrs):
        return dots[0] * self._sig(vals[0])

    def vjp_tangent(self, g, gd, vals, dots, out, outdot, attrs):
        s = self._sig(vals[0])
        r = None if gd is None else gd * s
        if dots[0] is not None:
            r = _add(r, g * s * (1.0 - s) * dots[0])
        return (r,)


class Normalize(Primitive):
    """Row-wise L2 normalization; rows under the norm floor get zero gradient."""

    name = "normalize"

    def forward(self, vals, attrs):
        x = vals[0]
        n = np.linalg.norm(x, axis=-1, keepdims=True)
        return x / np.maximum(n, NORM_FLOOR)

    @staticmethod
    def _norm(x):
        n = np.linalg.norm(x, axis=-1, keepdims=True)
        live = n > NORM_FLOOR
        return np.where(live, n, 1.0), live

    def vjp(self, g, vals, out, attrs):
        n, live = self._norm(vals[0])
        s = np.sum(out * g, axis=-1, keepdims=True)
        return (np.where(live, (g - out * s) / n, 0.0),)

    def jvp(self, dots, vals, out, attrs):
        dx = dots[0]
        n, live = self._norm(vals[0])
        s = np.sum(out * dx, axis=-1, keepdims=True)
        return np.where(live, (dx - out * s) / n, 0.0)

    def vjp_tangent(self, g, gd, vals, dots, out, outdot, attrs):
        dx = dots[0]
        n, live = self._norm(vals[0])
        gd = np.zeros_like(g) if gd is None else gd
        s = np.sum(out * g, axis=-1, keepdims=True)
        if dx is None:
            sd = np.sum(out * gd, axis=-1, keepdims=True)
            return (np.where(live, (gd - out * sd) / n, 0.0),)
        gx = (g - out * s) / n
        nd = np.sum(out * dx, axis=-1, keepdims=True)
        sd = np.sum(outdot * g, axis=-1, keepdims=True) + np.sum(out * gd, axis=-1, keepdims=True)
        r = (gd - outdot * s - out * sd) / n - gx * nd / n
        return (np.where(live, r, 0.0),)


class Dot(Primitive):
    """Inner product over the last axis with numpy broadcasting."""

    name = "dot"

    def forward(self, vals, attrs):
        a, b = vals
        return np.sum(a * b, axis=-1)

    def vjp(self, g, vals, out, attrs):
        a, b = vals
        ge = g[..., None]
        return _unbroadcast(ge * b, a.shape), _unbroadcast(ge * a, b.shape)

    def jvp(self, dots, vals, out, attrs):
        a, b = vals
        da, db = dots
        r = None
        if da is not None:
            r = np.sum(da * b, axis=-1)
        if db is not None:
            r = _add(r, np.sum(a * db, axis=-1))
        return r

    def vjp_tangent(self, g, gd, vals, dots, out, outdot, attrs):
        a, b = vals
        da, db = dots
        ge = g[..., None]
        ga = gb = None
        if gd is not None:
            ga, gb = self.vjp(gd, vals, out, attrs)
        if db is not None:
            ga = _add(ga, _unbroadcast(ge * db, a.shape))
        if da is not None:
            gb = _add(gb, _unbroadcast(ge * da, b.shape))
        return ga, gb


class LogSumExp(Primitive):
    name = "logsumexp"

    def forward(self, vals, attrs):
        x = vals[0]
        m = np.max(x, axis=-1, keepdims=True)
        return (m + np.log(np.sum(np.exp(x - m), axis=-1, keepdims=True)))[..., 0]

    @staticmethod
    def _probs(x, out):
        return np.exp(x - out[..., None])

    def vjp(self, g, vals, out, attrs):
        return (g[..., None] * self._probs(vals[0], out),)

    def jvp(self, dots, vals, out, attrs):
        return np.sum(self._probs(vals[0], out) * dots[0], axis=-1)

    def vjp_tangent(self, g, gd, vals, dots, out, outdot, attrs):
        p = self._probs(vals[0], out)
        r = None if gd is None else gd[..., None] * p
        if dots[0] is not None:
            pd = p * (dots[0] - outdot[..., None])
            r = _add(r, g[..., None] * pd)
        return (r,)


class Scale(_Linear):
    name = "scale"

    def forward(self, vals, attrs):
        return vals[0] * attrs["c"]

    def vjp(self, g, vals, out, attrs):
        return (g * attrs["c"],)


class Add(_Linear):
    name = "add"

    def forward(self, vals, attrs):
        return vals[0] + vals[1]

    def vjp(self, g, vals, out, attrs):
        return _unbroadcast(g, vals[0].shape), _unbroadcast(g, vals[1].shape)


class Sub(_Linear):
    name = "sub"

    def forward(self, vals, attrs):
        return vals[0] - vals[1]

    def vjp(self, g, vals, out, attrs):
        return _unbroadcast(g, vals[0].shape), -_unbroadcast(g, vals[1].shape)


class Sum(_Linear):
    name = "sum"

    def forward(self, vals, attrs):
        return np.sum(vals[0], axis=attrs["axis"])

    def vjp(self, g, vals, out, attrs):
        x = vals[0]
        axis = attrs["axis"]
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)


class Reshape(_Linear):
    name = "reshape"

    def forward(self, vals, attrs):
        return vals[0].reshape(attrs["shape"])

    def vjp(self, g, vals, out, attrs):
        return (g.reshape(vals[0].shape),)


class Concat(_Linear):
    name = "concat"

    def forward(self, vals, attrs):
        shape = np.broadcast_shapes(vals[0].shape[:-1], vals[1].shape[:-1])
        parts = [np.broadcast_to(v, shape + v.shape[-1:]) for v in vals]
        return np.concatenate(parts, axis=-1)

    def vjp(self, g, vals, out, attrs):
        k = vals[0].shape[-1]
        return _unbroadcast(g[..., :k], vals[0].shape), _unbroadcast(g[..., k:], vals[1].shape)


class Take(_Linear):
    name = "take"

    def forward(self, vals, attrs):
        return np.take(vals[0], attrs["idx"], axis=-1)

    def vjp(self, g, vals, out, attrs):
        r = np.zeros_like(vals[0])
        np.add.at(r, (..., attrs["idx"]), g)
        return (r,)


class PatchMean(_Linear):
    name = "patch_mean"

    def forward(self, vals, attrs):
        from .. import kernels

        return kernels.patch_mean(vals[0], attrs["p"])

    def vjp(self, g, vals, out, attrs):
        from .. import kernels

        return (kernels.patch_mean_adjoint(g, attrs["p"]),)


class Custom(Primitive):
    """User-supplied first-order primitive; has no tangent rule."""

    second_order = False

    def __init__(self, name, fwd, bwd):
        self.name = name
        self._fwd = fwd
        self._bwd = bwd

    def forward(self, vals, attrs):
        return self._fwd(*vals)

    def vjp(self, g, vals, out, attrs):
        return tuple(self._bwd(g, *vals))


_AFFINE = Affine()
_TANH = Tanh()
_NORMALIZE = Normalize()
_DOT = Dot()
_LSE = LogSumExp()
_SOFTPLUS = Softplus()
_SCALE = Scale()
_ADD = Add()
_SUB = Sub()
_SUM = Sum()
_RESHAPE = Reshape()
_CONCAT = Concat()
_TAKE = Take()
_PATCH = PatchMean()


# ---------------------------------------------------------------------------
# tape


class Tape:
    """Ordered record of primitive applications. Confined to one thread."""

    def __init__(self):
        self._ops = []
        self._values = []
        self._marked = []

    def __len__(self):
        return len(self._values)

    def _push(self, op, value):
        self._ops.append(op)
        self._values.append(value)
        return Node(self, len(self._values) - 1)

    def input(self, value, mark=True):
        value = np.array(value, dtype=np.float64)
        if not np.all(np.isfinite(value)):
            raise ContractError("tape inputs must be finite")
        node = self._push(None, value)
        if mark:
            self._marked.append(node)
        return node

    def const(self, value):
        return self.input(value, mark=False)

    @property
    def marked(self):
        return list(self._marked)

    def _as_node(self, x):
        if isinstance(x, Node):
            if x.tape is not self:
                raise ContractError("node belongs to a different tape")
            return x
        return self.const(x)

    def apply(self, prim, *parents, **attrs):
        parents = tuple(self._as_node(p) for p in parents)
        vals = [self._values[p.index] for p in parents]
        out = prim.forward(vals, attrs)
        return self._push((prim, tuple(p.index for p in parents), attrs), np.asarray(out))

    # thin wrappers -------------------------------------------------------
    def affine(self, x, w, b):
        return self.apply(_AFFINE, x, w, b)

    def tanh(self, x):
        return self.apply(_TANH, x)

    def normalize(self, x):
        return self.apply(_NORMALIZE, x)

    def dot(self, a, b):
        return self.apply(_DOT, a, b)

    def logsumexp(self, x):
        return self.apply(_LSE, x)

    def softplus(self, x):
        return self.apply(_SOFTPLUS, x)

    def scale(self, x, c):
        return self.apply(_SCALE, x, c=float(c))

    def add(self, a, b):
        return self.apply(_ADD, a, b)

    def sub(self, a, b):
        return self.apply(_SUB, a, b)

    def sum(self, x, axis=None):
        return self.apply(_SUM, x, axis=axis)

    def reshape(self, x, shape):
        return self.apply(_RESHAPE, x, shape=tuple(shape))

    def concat(self, a, b):
        return self.apply(_CONCAT, a, b)

    def take(self, x, idx):
        return self.apply(_TAKE, x, idx=np.asarray(idx))

    def patch_mean(self, x, p):
        return self.apply(_PATCH, x, p=int(p))

    def custom(self, name, fwd, bwd, *parents):
        return self.apply(Custom(name, fwd, bwd), *parents)

    # ---------------------------------------------------------------------
    def replay(self):
        """Recompute every value from the leaves; returns the new value list."""
        vals = []
        for op, v in zip(self._ops, self._values):
            if op is None:
                vals.append(v)
            else:
                prim, parents, attrs = op
                vals.append(np.asarray(prim.forward([vals[i] for i in parents], attrs)))
        return vals

    def _reverse(self, out_index, seed, tangents=None, seed_dot=None):
        """Reverse sweep; with ``tangents`` also sweeps the adjoint tangents."""
        adj = {out_index: seed}
        adj_dot = {out_index: seed_dot} if seed_dot is not None else {}
        for i in range(out_index, -1, -1):
            op = self._ops[i]
            if op is None or (i not in adj and i not in adj_dot):
                continue
            prim, parents, attrs = op
            vals = [self._values[p] for p in parents]
            out = self._values[i]
            g = adj.get(i)
            if g is None:
                g = np.zeros_like(out)
            grads = prim.vjp(g, vals, out, attrs)
            for p, gp in zip(parents, grads):
                if gp is not None:
                    adj[p] = gp if p not in adj else adj[p] + gp
            if tangents is None:
                continue
            dots = [tangents.get(p) for p in parents]
            gd = adj_dot.get(i)
            if all(d is None for d in dots):
                if gd is None:
                    continue
                gds = prim.vjp(gd, vals, out, attrs)
            else:
                if not prim.second_order:
                    raise UnsupportedPrimitiveError(
                        f"primitive {prim.name!r} has no tangent rule"
                    )
                gds = prim.vjp_tangent(g, gd, vals, dots, out, tangents.get(i), attrs)
            for p, gp in zip(parents, gds):
                if gp is not None:
                    adj_dot[p] = gp if p not in adj_dot else adj_dot[p] + gp
        return adj, adj_dot

    def _forward_tangents(self, start, direction, stop):
        tangents = {start: direction}
        for i in range(start + 1, stop + 1):
            op = self._ops[i]
            if op is None:
                continue
            prim, parents, attrs = op
            dots = [tangents.get(p) for p in parents]
            if all(d is None for d in dots):
                continue
            if not prim.second_order:
                raise UnsupportedPrimitiveError(f"primitive {prim.name!r} has no tangent rule")
            vals = [self._values[p] for p in parents]
            t = prim.jvp(dots, vals, self._values[i], attrs)
            if t is not None:
                tangents[i] = t
        return tangents


def _resolve_wrt(tape, wrt):
    if wrt is None:
        return tape.marked, False
    if isinstance(wrt, Node):
        return [wrt], True
    return list(wrt), False


def _collect(adj, nodes, single):
    out = []
    for n in nodes:
        g = adj.get(n.index)
        out.append(np.zeros_like(n.value) if g is None else np.asarray(g, dtype=np.float64))
    return out[0] if single else out


def backward(tape, output, wrt=None):
    """Gradients of a scalar ``output`` w.r.t. ``wrt`` (default: marked inputs).

    Returns one array when ``wrt`` is a single node, else a list.
    """
    if output.tape is not tape:
        raise ContractError("output node belongs to a different tape")
    if output.value.ndim != 0:
        raise ContractError(f"backward needs a scalar output, got shape {output.shape}")
    nodes, single = _resolve_wrt(tape, wrt)
    adj, _ = tape._reverse(output.index, np.float64(1.0))
    return _collect(adj, nodes, single)


def vjp(tape, node, cotangent, wrt=None):
    """Vector-Jacobian product seeded with ``cotangent`` at ``node``."""
    cotangent = np.asarray(cotangent, dtype=np.float64)
    if cotangent.shape != node.shape:
        raise ContractError(f"cotangent shape {cotangent.shape} != node shape {node.shape}")
    nodes, single = _resolve_wrt(tape, wrt)
    adj, _ = tape._reverse(node.index, cotangent)
    return _collect(adj, nodes, single)


def hvp(tape, output, input, direction):
    """Hessian of scalar ``output`` w.r.t. leaf ``input`` applied to ``direction``."""
    if output.value.ndim != 0:
        raise ContractError(f"hvp needs a scalar output, got shape {output.shape}")
    direction = np.asarray(direction, dtype=np.float64)
    if direction.shape != input.shape:
        raise ContractError(
            f"direction shape {direction.shape} != input shape {input.shape}"
        )
    if tape._ops[input.index] is not None:
        raise ContractError("hvp input must be a leaf node")
    tangents = tape._forward_tangents(input.index, direction, output.index)
    _, adj_dot = tape._reverse(output.index, np.float64(1.0), tangents=tangents)
    r = adj_dot.get(input.index)
    return np.zeros_like(input.value) if r is None else r
