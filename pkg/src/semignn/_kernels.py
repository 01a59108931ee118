"""Compiled loops for the sparse neighborhood primitives and row-sparse updates.

Kernels with large outputs write into arrays the caller allocates with numpy.
Arrays allocated inside compiled code bypass numpy's allocator and pay fresh
page faults on every call, which costs more than the arithmetic here.
"""
import numba
import numpy as np


@numba.njit(cache=True, fastmath=True)
def spmm_forward(vals, rows, cols, X, out):
    """``out[rows[e]] += vals[e] * X[cols[e]]``; ``out`` starts at zero."""
    d = X.shape[1]
    for e in range(len(vals)):
        r = rows[e]
        c = cols[e]
        v = vals[e]
        for j in range(d):
            out[r, j] += v * X[c, j]


@numba.njit(cache=True, fastmath=True)
def spmm_backward(g, vals, rows, cols, X, gv, gX):
    """Fills ``gv`` and accumulates into the zeroed ``gX``."""
    d = X.shape[1]
    for e in range(len(vals)):
        r = rows[e]
        c = cols[e]
        v = vals[e]
        acc = 0.0
        for j in range(d):
            acc += g[r, j] * X[c, j]
            gX[c, j] += v * g[r, j]
        gv[e] = acc


@numba.njit(cache=True, fastmath=True)
def rows_axpy_decay(table, rows, values, scale, decay):
    """``table[r] += scale * (values[i] + decay * table[r])`` for ``r = rows[i]``, unique."""
    d = table.shape[1]
    keep = 1.0 + scale * decay
    for i in range(len(rows)):
        r = rows[i]
        for j in range(d):
            table[r, j] = keep * table[r, j] + scale * values[i, j]


@numba.njit(cache=True)
def sub_csr(indptr, indices, weights, users):
    """Edges of ``users`` in order: (local row, neighbor, weight) arrays."""
    total = 0
    for u in users:
        total += indptr[u + 1] - indptr[u]
    rows = np.empty(total, np.int64)
    nodes = np.empty(total, np.int64)
    w = np.empty(total)
    k = 0
    for r in range(len(users)):
        u = users[r]
        for e in range(indptr[u], indptr[u + 1]):
            rows[k] = r
            nodes[k] = indices[e]
            w[k] = weights[e]
            k += 1
    return rows, nodes, w


@numba.njit(cache=True)
def scatter_rows(idx, values, out):
    """``out[idx[i]] += values[i]``."""
    for i in range(len(idx)):
        r = idx[i]
        for j in range(values.shape[1]):
            out[r, j] += values[i, j]


@numba.njit(cache=True, fastmath=True)
def rows_sumsq(table, idx):
    acc = 0.0
    for i in range(len(idx)):
        r = idx[i]
        for j in range(table.shape[1]):
            acc += table[r, j] * table[r, j]
    return acc


@numba.njit(cache=True, fastmath=True)
def rows_scaled(table, idx, c, out):
    """``out[i] = c * table[idx[i]]``."""
    for i in range(len(idx)):
        r = idx[i]
        for j in range(table.shape[1]):
            out[i, j] = c * table[r, j]


@numba.njit(cache=True, fastmath=True)
def rows_axpy_gather(buf, table, idx, c):
    """``buf[i] += c * table[idx[i]]``."""
    for i in range(len(idx)):
        r = idx[i]
        for j in range(table.shape[1]):
            buf[i, j] += c * table[r, j]


@numba.njit(cache=True)
def column_order(ptr, inv, nu):
    """Counting-sort transpose of CSR segments: edges grouped by column.

    Returns ``(cptr, order, rowof)``: the edges of column ``c`` are
    ``order[cptr[c]:cptr[c + 1]]`` and ``rowof[e]`` is the segment of edge ``e``.
    """
    nnz = len(inv)
    rowof = np.empty(nnz, np.int64)
    for r in range(len(ptr) - 1):
        for e in range(ptr[r], ptr[r + 1]):
            rowof[e] = r
    cptr = np.zeros(nu + 1, np.int64)
    for e in range(nnz):
        cptr[inv[e] + 1] += 1
    for c in range(nu):
        cptr[c + 1] += cptr[c]
    fill = cptr[:-1].copy()
    order = np.empty(nnz, np.int64)
    for e in range(nnz):
        c = inv[e]
        order[fill[c]] = e
        fill[c] += 1
    return cptr, order, rowof


@numba.njit(cache=True, fastmath=True)
def attend_forward(M, H, im, ih, ptr, inv, w, h, alpha):
    """Fused node-level attention over CSR segments ``ptr``.

    With ``Mu = M[im]`` and ``Hu = H[ih]``: score_e = w_e * (Mu[c] . Hu[c]) for
    c = inv[e]; alpha = segment softmax; h_r = sum_e alpha_e * w_e * Mu[c].
    Writes the aggregate into the zeroed ``h`` and the weights into ``alpha``.
    """
    nu = len(im)
    d = M.shape[1]
    n = len(ptr) - 1
    s = np.empty(nu)
    for c in range(nu):
        a = im[c]
        b = ih[c]
        acc = 0.0
        for j in range(d):
            acc += M[a, j] * H[b, j]
        s[c] = acc
    for r in range(n):
        lo = ptr[r]
        hi = ptr[r + 1]
        if lo == hi:
            continue
        mx = -np.inf
        for e in range(lo, hi):
            v = w[e] * s[inv[e]]
            alpha[e] = v
            if v > mx:
                mx = v
        tot = 0.0
        for e in range(lo, hi):
            alpha[e] = np.exp(alpha[e] - mx)
            tot += alpha[e]
        for e in range(lo, hi):
            alpha[e] /= tot
            a = im[inv[e]]
            coef = alpha[e] * w[e]
            for j in range(d):
                h[r, j] += coef * M[a, j]


@numba.njit(cache=True, fastmath=True)
def attend_backward(gh, M, H, im, ih, ptr, inv, w, alpha, cptr, order, rowof, gMu, gHu):
    """Gradients of :func:`attend_forward` w.r.t. ``Mu`` and ``Hu``.

    ``gMu[c] = sum_e alpha_e w_e gh[r_e] + ds_c Hu[c]`` and ``gHu[c] = ds_c Mu[c]``
    where ``ds`` is the score gradient. The first sum needs no ``ds``, so it
    shares the by-column edge pass that computes ``d loss / d alpha``.
    ``gMu`` must start at zero; ``gHu`` is overwritten.
    """
    nu = len(im)
    d = M.shape[1]
    n = len(ptr) - 1
    nnz = len(inv)
    dal = np.empty(nnz)
    for c in range(nu):
        a = im[c]
        for k in range(cptr[c], cptr[c + 1]):
            e = order[k]
            r = rowof[e]
            cf = alpha[e] * w[e]
            acc = 0.0
            for j in range(d):
                g = gh[r, j]
                acc += g * M[a, j]
                gMu[c, j] += cf * g
            dal[e] = w[e] * acc
    ds = np.zeros(nu)
    for r in range(n):
        inner = 0.0
        for e in range(ptr[r], ptr[r + 1]):
            inner += alpha[e] * dal[e]
        for e in range(ptr[r], ptr[r + 1]):
            ds[inv[e]] += alpha[e] * (dal[e] - inner) * w[e]
    for c in range(nu):
        a = im[c]
        b = ih[c]
        sc = ds[c]
        for j in range(d):
            gMu[c, j] += sc * H[b, j]
            gHu[c, j] = sc * M[a, j]
