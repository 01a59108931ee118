"""A small reverse-mode gradient tape over batched numpy primitives.

Only the operators the model needs are provided. Values are float64 arrays.
Parameters enter the tape either densely (:meth:`Tape.param`) or as a set of
unique table rows (:meth:`Tape.take`); gradients of the latter stay sparse.

Example::

    tape = Tape()
    x = tape.param("x", np.array([1.0, 2.0]))
    loss = dot(x, x)
    grads = tape.backward(loss)      # grads["x"] == [2, 4]
"""
from __future__ import annotations

import numpy as np

from . import _kernels


class NonScalarLoss(ValueError):
    pass


class NonDeterministicLoss(RuntimeError):
    pass


class Var:
    """A tape node. ``fresh`` marks ops whose backward returns newly allocated,
    unaliased arrays, which the tape may then accumulate into in place."""

    __slots__ = ("value", "tape", "slot", "parents", "backward_fn", "leaf", "fresh")

    def __init__(self, value, tape, parents=(), backward_fn=None, leaf=None, fresh=False):
        self.value = value
        self.tape = tape
        self.parents = parents
        self.backward_fn = backward_fn
        self.leaf = leaf
        self.fresh = fresh
        self.slot = len(tape.nodes)
        tape.nodes.append(self)

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(slot={self.slot}, shape={self.value.shape})"


class RowsVar(Var):
    """Leaf standing for ``table[rows]``; the copy is only made if someone asks
    for ``value``. Fused kernels read the table through ``rows`` instead."""

    __slots__ = ("table", "_cache")

    def __init__(self, table, rows, tape, name):
        self.table = table
        self._cache = None
        super().__init__(None, tape, leaf=(name, rows))

    @property
    def value(self):
        if self._cache is None:
            self._cache = self.table[self.leaf[1]]
        return self._cache

    @value.setter
    def value(self, v):
        self._cache = v

    @property
    def shape(self):
        return (len(self.leaf[1]),) + self.table.shape[1:]


def table_and_index(x: Var):
    """``(array, index)`` with ``array[index]`` equal to ``x.value``, without copying rows."""
    if isinstance(x, RowsVar):
        return x.table, x.leaf[1]
    return x.value, np.arange(x.value.shape[0], dtype=np.int64)


class SparseRows:
    """Gradient of an embedding table restricted to the rows that were touched.

    The gradient may carry a pending ``decay * table[rows]`` term (the L2
    gradient of those rows). It is added on first access to ``values``;
    :func:`semignn.training.sgd_update` applies it without materializing.
    """

    __slots__ = ("rows", "_values", "table", "decay")

    def __init__(self, rows, values, table=None, decay=0.0):
        self.rows = rows
        self._values = values
        self.table = table
        self.decay = decay

    @property
    def values(self):
        if self.decay:
            _kernels.rows_axpy_gather(self._values, self.table, self.rows, self.decay)
            self.decay = 0.0
        return self._values

    @property
    def partial_values(self):
        """The gradient without the pending decay term."""
        return self._values

    def coalesce(self) -> "SparseRows":
        if len(self.rows) < 2 or np.all(self.rows[1:] > self.rows[:-1]):
            return self
        uniq, inv = np.unique(self.rows, return_inverse=True)
        if len(uniq) == len(self.rows) and np.all(uniq == self.rows):
            return self
        out = np.zeros((len(uniq),) + self.values.shape[1:])
        np.add.at(out, inv, self.values)
        return SparseRows(uniq, out)

    def dense(self, shape) -> np.ndarray:
        out = np.zeros(shape)
        np.add.at(out, self.rows, self.values)
        return out


class GradMap(dict):
    """Parameter name -> dense ndarray or :class:`SparseRows`.

    Parameters the loss never reached are absent.
    """

    def dense(self, name, shape) -> np.ndarray:
        g = self.get(name)
        if g is None:
            return np.zeros(shape)
        return g.dense(shape) if isinstance(g, SparseRows) else g


class Tape:
    def __init__(self):
        self.nodes: list = []
        self._params: dict = {}
        self.takes: list = []

    def const(self, value) -> Var:
        return Var(np.asarray(value, dtype=np.float64), self)

    def param(self, name, array) -> Var:
        """Dense parameter leaf; one leaf per name per tape."""
        v = self._params.get(name)
        if v is None:
            v = Var(array, self, leaf=(name, None))
            self._params[name] = v
        return v

    def take(self, name, table, rows) -> Var:
        """Leaf holding ``table[rows]``; ``rows`` should be unique for cheap backward."""
        rows = np.asarray(rows, dtype=np.int64)
        v = RowsVar(table, rows, self, name)
        self.takes.append(v)
        return v

    def leaves(self):
        return [n for n in self.nodes if n.leaf is not None]

    def reachable(self, out: Var) -> set:
        """Slots of every node the value of ``out`` depends on."""
        seen = {out.slot}
        stack = [out]
        while stack:
            n = stack.pop()
            for p in n.parents:
                if p.slot not in seen:
                    seen.add(p.slot)
                    stack.append(p)
        return seen

    def backward(self, loss: Var) -> GradMap:
        if loss.value.size != 1:
            raise NonScalarLoss(f"loss has shape {loss.value.shape}")
        if not np.isfinite(loss.value).all():
            raise FloatingPointError("loss is not finite")
        grads = {loss.slot: np.ones_like(loss.value)}
        owned = set()
        out = GradMap()
        for node in reversed(self.nodes[: loss.slot + 1]):
            g = grads.pop(node.slot, None)
            if g is None:
                continue
            if isinstance(g, _Decayed):
                if node.leaf is not None and node.leaf[0] not in out:
                    out[node.leaf[0]] = SparseRows(node.leaf[1], g.values, node.table, g.scaled.c)
                    continue
                g = g.fold()
            g = _materialize(g)
            if node.leaf is not None:
                name, rows = node.leaf
                if rows is None:
                    out[name] = out[name] + g if name in out else g
                elif name in out:
                    prev = out[name]
                    out[name] = SparseRows(np.concatenate([prev.rows, rows]),
                                           np.concatenate([prev.values, g]))
                else:
                    out[name] = SparseRows(rows, g)
                continue
            if node.backward_fn is None:
                continue
            for parent, pg in zip(node.parents, node.backward_fn(g)):
                if pg is None:
                    continue
                slot = parent.slot
                prev = grads.get(slot)
                if isinstance(prev, _Decayed):
                    prev = prev.fold()
                if prev is None:
                    grads[slot] = pg
                    if node.fresh and not isinstance(pg, ScaledRows):
                        owned.add(slot)
                    continue
                if isinstance(prev, ScaledRows):
                    prev, pg = pg, prev
                    if not (node.fresh and not isinstance(prev, ScaledRows)):
                        prev = _materialize(prev).copy()
                    owned.add(slot)
                elif slot not in owned:
                    # backward functions may hand out views of their input, so
                    # only buffers allocated here are updated in place
                    prev = prev.copy()
                    owned.add(slot)
                if isinstance(pg, ScaledRows):
                    if (isinstance(parent, RowsVar) and pg.table is parent.table
                            and pg.idx is parent.leaf[1]):
                        # L2 gradient of the leaf's own rows: keep it pending
                        grads[slot] = _Decayed(prev, pg)
                        continue
                    pg.add_into(prev)
                else:
                    prev += pg
                grads[slot] = prev
        for name, g in out.items():
            if isinstance(g, SparseRows):
                out[name] = g.coalesce()
        return out


class ScaledRows:
    """Deferred gradient ``c * table[idx]``, folded into another gradient buffer
    when one arrives so the product is never allocated on its own."""

    __slots__ = ("table", "idx", "c")

    def __init__(self, table, idx, c):
        self.table = table
        self.idx = idx
        self.c = c

    def materialize(self) -> np.ndarray:
        out = np.empty((len(self.idx), self.table.shape[1]))
        _kernels.rows_scaled(self.table, self.idx, self.c, out)
        return out

    def add_into(self, buf) -> None:
        _kernels.rows_axpy_gather(buf, self.table, self.idx, self.c)


class _Decayed:
    """Owned gradient buffer plus a pending :class:`ScaledRows` of the leaf's own rows."""

    __slots__ = ("values", "scaled")

    def __init__(self, values, scaled):
        self.values = values
        self.scaled = scaled

    def fold(self):
        self.scaled.add_into(self.values)
        return self.values


def _materialize(g):
    return g.materialize() if isinstance(g, ScaledRows) else g


def _new(value, parents, fn, fresh=False):
    return Var(value, parents[0].tape, tuple(parents), fn, fresh=fresh)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# --- elementwise ----------------------------------------------------------

def add(x: Var, y: Var) -> Var:
    return _new(x.value + y.value, (x, y),
                lambda g: (_unbroadcast(g, x.shape), _unbroadcast(g, y.shape)))


def sub(x: Var, y: Var) -> Var:
    return _new(x.value - y.value, (x, y),
                lambda g: (_unbroadcast(g, x.shape), -_unbroadcast(g, y.shape)))


def mul(x: Var, y: Var) -> Var:
    return _new(x.value * y.value, (x, y),
                lambda g: (_unbroadcast(g * y.value, x.shape), _unbroadcast(g * x.value, y.shape)))


def neg(x: Var) -> Var:
    return _new(-x.value, (x,), lambda g: (-g,))


def scale(x: Var, c) -> Var:
    """Multiply by a constant (scalar or broadcastable array)."""
    c = np.asarray(c, dtype=np.float64)
    return _new(x.value * c, (x,), lambda g: (_unbroadcast(g * c, x.shape),))


def add_bias(x: Var, b: Var) -> Var:
    return _new(x.value + b.value, (x, b), lambda g: (g, g.sum(axis=0)))


def relu(x: Var) -> Var:
    mask = x.value > 0  # subgradient 0 at 0
    return _new(np.maximum(x.value, 0.0), (x,), lambda g: (g * mask,), fresh=True)


def dense_relu(x: Var, W: Var, b: Var) -> Var:
    """``relu(x @ W + b)`` as one node; same values and gradients as the composition."""
    y = x.value @ W.value
    y += b.value
    np.maximum(y, 0.0, out=y)

    def fn(g):
        gz = g * (y > 0)  # y > 0 exactly where the pre-activation is positive
        return None if _is_const(x) else gz @ W.value.T, x.value.T @ gz, gz.sum(axis=0)

    return _new(y, (x, W, b), fn, fresh=True)


def sigmoid(x: Var) -> Var:
    s = _sigmoid(x.value)
    return _new(s, (x,), lambda g: (g * s * (1.0 - s),))


def log(x: Var) -> Var:
    return _new(np.log(x.value), (x,), lambda g: (g / x.value,))


def clip(x: Var, lo: float, hi: float) -> Var:
    inside = (x.value >= lo) & (x.value <= hi)
    return _new(np.clip(x.value, lo, hi), (x,), lambda g: (g * inside,))


def log_sigmoid(x: Var) -> Var:
    """``log(sigmoid(x))`` evaluated stably."""
    v = x.value
    out = -np.logaddexp(0.0, -v)
    return _new(out, (x,), lambda g: (g * _sigmoid(-v),))


def _sigmoid(v):
    return np.exp(-np.logaddexp(0.0, -v))


# --- reductions -----------------------------------------------------------

def sum_all(x: Var) -> Var:
    return _new(np.asarray(x.value.sum()), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean_all(x: Var) -> Var:
    n = x.value.size
    return _new(np.asarray(x.value.mean()), (x,),
                lambda g: (np.full(x.shape, float(g) / n),))


def sumsq(x: Var) -> Var:
    if isinstance(x, RowsVar) and x._cache is None and x.table.ndim == 2:
        table, idx = table_and_index(x)
        return _new(np.asarray(_kernels.rows_sumsq(table, idx)), (x,),
                    lambda g: (ScaledRows(table, idx, 2.0 * float(g)),), fresh=True)
    flat = x.value.ravel()
    return _new(np.asarray(np.dot(flat, flat)), (x,), lambda g: ((2.0 * float(g)) * x.value,), fresh=True)


def dot(x: Var, y: Var) -> Var:
    """Inner product of two vectors of equal shape."""
    return _new(np.asarray(np.dot(x.value.ravel(), y.value.ravel())), (x, y),
                lambda g: (g * y.value, g * x.value))


def rowdot(x: Var, y: Var) -> Var:
    """Row-wise inner product of two ``(n, d)`` matrices, or matrix with a vector."""
    if y.value.ndim == 1:
        return _new(x.value @ y.value, (x, y),
                    lambda g: (np.outer(g, y.value), g @ x.value))
    return _new(np.einsum("ij,ij->i", x.value, y.value), (x, y),
                lambda g: (g[:, None] * y.value, g[:, None] * x.value))


# --- linear algebra and indexing -----------------------------------------

def _is_const(v: Var) -> bool:
    return v.leaf is None and v.backward_fn is None


def matmul(x: Var, W: Var) -> Var:
    return _new(x.value @ W.value, (x, W),
                lambda g: (None if _is_const(x) else g @ W.value.T, x.value.T @ g), fresh=True)


def gather(x: Var, idx) -> Var:
    """Rows (or entries) ``x[idx]``; duplicate indices accumulate on backward."""
    idx = np.asarray(idx, dtype=np.int64)

    def fn(g):
        if x.value.ndim == 1:
            return (np.bincount(idx, weights=g, minlength=x.shape[0]),)
        if x.value.ndim == 2:
            out = np.zeros(x.shape)
            _kernels.scatter_rows(idx, np.ascontiguousarray(g, dtype=np.float64), out)
            return (out,)
        out = np.zeros(x.shape)
        np.add.at(out, idx, g)
        return (out,)

    return _new(x.value[idx], (x,), fn, fresh=True)


def column(x: Var, j: int) -> Var:
    def fn(g):
        out = np.zeros(x.shape)
        out[:, j] = g
        return (out,)

    return _new(x.value[:, j].copy(), (x,), fn)


def mul_col(x: Var, c: Var) -> Var:
    """``x * c[:, None]`` for a matrix ``x`` and a per-row scalar ``c``."""
    return _new(x.value * c.value[:, None], (x, c),
                lambda g: (g * c.value[:, None], np.einsum("ij,ij->i", g, x.value)))


def concat_cols(xs) -> Var:
    widths = [x.shape[1] for x in xs]
    edges = np.cumsum([0] + widths)

    def fn(g):
        return tuple(g[:, edges[i]:edges[i + 1]] for i in range(len(xs)))

    return _new(np.concatenate([x.value for x in xs], axis=1), tuple(xs), fn)


def stack_cols(xs) -> Var:
    """Stack ``k`` vectors of length ``n`` into an ``(n, k)`` matrix."""
    def fn(g):
        return tuple(g[:, i].copy() for i in range(len(xs)))

    return _new(np.stack([x.value for x in xs], axis=1), tuple(xs), fn)


def softmax_rows(x: Var) -> Var:
    z = x.value - x.value.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    return _new(p, (x,), lambda g: (p * (g - np.sum(g * p, axis=1, keepdims=True)),))


def log_softmax_rows(x: Var) -> Var:
    z = x.value - x.value.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return _new(out, (x,), lambda g: (g - p * g.sum(axis=1, keepdims=True),))


def pick(x: Var, cols) -> Var:
    """``x[i, cols[i]]`` for every row ``i``."""
    cols = np.asarray(cols, dtype=np.int64)
    rows = np.arange(len(cols))

    def fn(g):
        out = np.zeros(x.shape)
        out[rows, cols] = g
        return (out,)

    return _new(x.value[rows, cols], (x,), fn)


# --- segment (neighborhood) operators -------------------------------------

def segment_starts(seg, n):
    """CSR-style pointer array for sorted segment ids in ``[0, n)``."""
    ptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(np.bincount(seg, minlength=n), out=ptr[1:])
    return ptr


def seg_softmax(s: Var, seg, n: int) -> Var:
    """Softmax of ``s`` within each segment; ``seg`` must be sorted ascending."""
    seg = np.asarray(seg, dtype=np.int64)
    v = s.value
    if len(v) == 0:
        return _new(v.copy(), (s,), lambda g: (g,))
    ptr = segment_starts(seg, n)
    nonempty = np.flatnonzero(ptr[1:] > ptr[:-1])
    seg_max = np.maximum.reduceat(v, ptr[nonempty])
    full_max = np.zeros(n)
    full_max[nonempty] = seg_max
    e = np.exp(v - full_max[seg])
    tot = np.bincount(seg, weights=e, minlength=n)
    p = e / tot[seg]

    def fn(g):
        inner = np.bincount(seg, weights=g * p, minlength=n)
        return (p * (g - inner[seg]),)

    return _new(p, (s,), fn)


def spmm(vals: Var, rows, cols, n_rows: int, X: Var) -> Var:
    """``out[r] = sum_{e: rows[e] == r} vals[e] * X[cols[e]]`` (sparse times dense)."""
    rows = np.ascontiguousarray(rows, dtype=np.int64)
    cols = np.ascontiguousarray(cols, dtype=np.int64)
    out = np.zeros((n_rows, X.shape[1]))
    _kernels.spmm_forward(vals.value, rows, cols, X.value, out)

    def fn(g):
        gv, gX = np.empty(len(rows)), np.zeros(X.shape)
        _kernels.spmm_backward(np.ascontiguousarray(g), vals.value, rows, cols, X.value, gv, gX)
        return gv, gX

    return _new(out, (vals, X), fn)


def neighbor_attention(Mu: Var, Hu: Var, seg, cols, w, n: int):
    """Node-level attention aggregate, fused.

    For segment ``r`` (one user) with edges ``e``: ``score_e = w_e * Mu[c] . Hu[c]``
    where ``c = cols[e]``, ``alpha = softmax(score)`` within the segment, and
    ``out[r] = sum_e alpha_e * w_e * Mu[c]``. Returns ``(out Var, alpha array)``.
    Equivalent to composing :func:`rowdot`, :func:`gather`, :func:`scale`,
    :func:`seg_softmax` and :func:`spmm`.
    """
    seg = np.asarray(seg, dtype=np.int64)
    cols = np.ascontiguousarray(cols, dtype=np.int64)
    w = np.ascontiguousarray(w, dtype=np.float64)
    ptr = segment_starts(seg, n)
    M, im = table_and_index(Mu)
    H, ih = table_and_index(Hu)
    out, alpha = np.zeros((n, M.shape[1])), np.empty(len(cols))
    _kernels.attend_forward(M, H, im, ih, ptr, cols, w, out, alpha)

    def fn(g):
        cptr, order, rowof = _kernels.column_order(ptr, cols, len(im))
        gMu, gHu = np.zeros((len(im), M.shape[1])), np.empty((len(im), M.shape[1]))
        _kernels.attend_backward(np.ascontiguousarray(g), M, H, im, ih, ptr, cols, w, alpha,
                                 cptr, order, rowof, gMu, gHu)
        return gMu, gHu

    return _new(out, (Mu, Hu), fn, fresh=True), alpha


# --- finite-difference oracle ---------------------------------------------

class FDReport(dict):
    """Parameter name -> max relative error, plus ``kinks``: name -> flat
    indices where the loss is not differentiable at the probed point (the two
    one-sided slopes disagree). Kinked entries are left out of the maxima;
    callers move the point (re-seed) and check again."""

    def __init__(self, *args, kinks=None, fd=None):
        super().__init__(*args)
        self.kinks = kinks or {}
        self.fd = fd or {}

    def ok(self, tol: float) -> bool:
        return all(v < tol for v in self.values())


def fd_check(loss_fn, params: dict, epsilon: float = 1e-4, grads: dict | None = None,
             abs_floor: float = 1e-8, names=None, kink_tol: float = 1e-2) -> FDReport:
    """Central-difference gradient check.

    ``loss_fn(params) -> float`` must be deterministic. ``params`` is a dict of
    arrays that are perturbed in place and restored. The central difference
    ``(f(p + eps) - f(p - eps)) / 2 eps`` of every scalar entry is kept in
    ``report.fd``. When ``grads`` (name -> dense array) is given, the report
    maps each parameter to its max relative error
    ``|fd - g| / max(|fd|, |g|, abs_floor)``.
    """
    base = loss_fn(params)
    if loss_fn(params) != base:
        raise NonDeterministicLoss("two evaluations at the same point disagree")
    fd, kinks = {}, {}
    for name in names or params:
        p = params[name]
        g = np.zeros_like(p)
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        bad = []
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + epsilon
            up = loss_fn(params)
            flat[i] = old - epsilon
            down = loss_fn(params)
            flat[i] = old
            gflat[i] = (up - down) / (2 * epsilon)
            right = (up - base) / epsilon
            left = (base - down) / epsilon
            if abs(right - left) > kink_tol * max(abs(right), abs(left), 1.0):
                bad.append(i)
        fd[name] = g
        if bad:
            kinks[name] = bad
    report = FDReport(kinks=kinks, fd=fd)
    if grads is None:
        return report
    for name, g in fd.items():
        a = np.asarray(grads[name], dtype=np.float64).reshape(g.shape)
        denom = np.maximum(np.maximum(np.abs(g), np.abs(a)), abs_floor)
        err = np.abs(g - a) / denom
        # entries where both are below the absolute floor count as agreeing
        err[np.maximum(np.abs(g), np.abs(a)) < abs_floor] = 0.0
        err.reshape(-1)[kinks.get(name, [])] = 0.0
        report[name] = float(err.max()) if err.size else 0.0
    return report
