"""Hot numeric kernels, each in a numba flavour and a numpy flavour.

Both flavours accumulate in float64 and return arrays in the input dtype
(integer outputs excepted). ``NUMBA_KERNELS`` and ``NUMPY_KERNELS`` expose
the two sets explicitly; the module-level names are bound to whichever set
the ``CONSISTMMT_KERNELS`` flag selects.
"""

from types import SimpleNamespace

import numpy as np

from ._accel import USE_NUMBA, njit

# --------------------------------------------------------------------------
# relaxed OT: nearest-target assignment


@njit
def _nearest_target_nb(src, tgt):
    rows, d = src.shape
    m = tgt.shape[1]
    idx = np.empty((rows, d), dtype=np.int64)
    for r in range(rows):
        for i in range(d):
            best = 0
            best_cost = abs(src[r, i] - tgt[r, 0])
            for j in range(1, m):
                c = abs(src[r, i] - tgt[r, j])
                if c < best_cost:
                    best_cost = c
                    best = j
            idx[r, i] = best
    return idx


def _nearest_target_np(src, tgt):
    cost = np.abs(src[:, :, None] - tgt[:, None, :])
    return cost.argmin(axis=-1).astype(np.int64)


# --------------------------------------------------------------------------
# exact 1-D OT between weighted atoms (quantile coupling)


@njit
def _quantile_coupling_nb(x, mx, y, my):
    n = x.shape[0]
    m = y.shape[0]
    ox = np.argsort(x, kind="mergesort")
    oy = np.argsort(y, kind="mergesort")
    plan = np.zeros((n, m), dtype=np.float64)
    cost = 0.0
    i = 0
    j = 0
    ri = float(mx[ox[0]])
    rj = float(my[oy[0]])
    while i < n and j < m:
        a = ox[i]
        b = oy[j]
        t = min(ri, rj)
        if t > 0.0:
            plan[a, b] += t
            cost += t * abs(float(x[a]) - float(y[b]))
        if ri < rj:
            rj -= ri
            i += 1
            if i < n:
                ri = float(mx[ox[i]])
        elif rj < ri:
            ri -= rj
            j += 1
            if j < m:
                rj = float(my[oy[j]])
        else:
            i += 1
            j += 1
            if i < n:
                ri = float(mx[ox[i]])
            if j < m:
                rj = float(my[oy[j]])
    return cost, plan


def _quantile_coupling_np(x, mx, y, my):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    ox = np.argsort(x, kind="mergesort")
    oy = np.argsort(y, kind="mergesort")
    cu = np.cumsum(np.asarray(mx, dtype=np.float64)[ox])
    cv = np.cumsum(np.asarray(my, dtype=np.float64)[oy])
    top = min(cu[-1], cv[-1])
    qs = np.unique(np.concatenate([cu, cv]))
    qs = qs[qs <= top]
    lo = np.concatenate([[0.0], qs[:-1]])
    delta = qs - lo
    keep = delta > 0
    lo, qs, delta = lo[keep], qs[keep], delta[keep]
    mid = 0.5 * (lo + qs)
    iu = np.minimum(np.searchsorted(cu, mid, side="left"), len(x) - 1)
    iv = np.minimum(np.searchsorted(cv, mid, side="left"), len(y) - 1)
    plan = np.zeros((len(x), len(y)), dtype=np.float64)
    np.add.at(plan, (ox[iu], oy[iv]), delta)
    cost = float(np.sum(delta * np.abs(x[ox[iu]] - y[oy[iv]])))
    return cost, plan


# --------------------------------------------------------------------------
# layer norm over the last axis of a 2-D view


@njit
def _layer_norm_fwd_nb(x, gamma, beta, eps):
    rows, d = x.shape
    y = np.empty_like(x)
    xhat = np.empty_like(x)
    rstd = np.empty(rows, dtype=np.float64)
    for r in range(rows):
        s = 0.0
        for k in range(d):
            s += x[r, k]
        mu = s / d
        v = 0.0
        for k in range(d):
            t = x[r, k] - mu
            v += t * t
        inv = 1.0 / np.sqrt(v / d + eps)
        rstd[r] = inv
        for k in range(d):
            h = (x[r, k] - mu) * inv
            xhat[r, k] = h
            y[r, k] = h * gamma[k] + beta[k]
    return y, xhat, rstd


def _layer_norm_fwd_np(x, gamma, beta, eps):
    x64 = x.astype(np.float64)
    mu = x64.mean(axis=1, keepdims=True)
    var = ((x64 - mu) ** 2).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat64 = (x64 - mu) * rstd
    y = (xhat64 * gamma + beta).astype(x.dtype)
    return y, xhat64.astype(x.dtype), rstd[:, 0]


@njit
def _layer_norm_bwd_nb(dy, xhat, rstd, gamma):
    rows, d = dy.shape
    dx = np.empty_like(dy)
    dgamma = np.zeros(d, dtype=np.float64)
    dbeta = np.zeros(d, dtype=np.float64)
    for r in range(rows):
        mg = 0.0
        mgx = 0.0
        for k in range(d):
            g = float(dy[r, k]) * gamma[k]
            mg += g
            mgx += g * xhat[r, k]
            dgamma[k] += float(dy[r, k]) * xhat[r, k]
            dbeta[k] += dy[r, k]
        mg /= d
        mgx /= d
        for k in range(d):
            g = float(dy[r, k]) * gamma[k]
            dx[r, k] = rstd[r] * (g - mg - xhat[r, k] * mgx)
    return dx, dgamma, dbeta


def _layer_norm_bwd_np(dy, xhat, rstd, gamma):
    dy64 = dy.astype(np.float64)
    xh64 = xhat.astype(np.float64)
    g = dy64 * gamma
    mg = g.mean(axis=1, keepdims=True)
    mgx = (g * xh64).mean(axis=1, keepdims=True)
    dx = rstd[:, None] * (g - mg - xh64 * mgx)
    return dx.astype(dy.dtype), (dy64 * xh64).sum(axis=0), dy64.sum(axis=0)


# --------------------------------------------------------------------------
# masked softmax over the last axis of a 2-D view


@njit
def _masked_softmax_fwd_nb(scores, mask):
    rows, n = scores.shape
    out = np.zeros_like(scores)
    for r in range(rows):
        mx = -np.inf
        for k in range(n):
            if mask[r, k] and scores[r, k] > mx:
                mx = scores[r, k]
        s = 0.0
        for k in range(n):
            if mask[r, k]:
                s += np.exp(float(scores[r, k]) - mx)
        for k in range(n):
            if mask[r, k]:
                out[r, k] = np.exp(float(scores[r, k]) - mx) / s
    return out


def _masked_softmax_fwd_np(scores, mask):
    s64 = np.where(mask, scores.astype(np.float64), -np.inf)
    s64 = s64 - s64.max(axis=1, keepdims=True)
    e = np.exp(s64)
    return (e / e.sum(axis=1, keepdims=True)).astype(scores.dtype)


@njit
def _softmax_bwd_nb(dy, p):
    rows, n = dy.shape
    dx = np.empty_like(dy)
    for r in range(rows):
        s = 0.0
        for k in range(n):
            s += float(dy[r, k]) * p[r, k]
        for k in range(n):
            dx[r, k] = p[r, k] * (dy[r, k] - s)
    return dx


def _softmax_bwd_np(dy, p):
    s = (dy.astype(np.float64) * p).sum(axis=1, keepdims=True)
    return (p * (dy - s)).astype(dy.dtype)


# --------------------------------------------------------------------------
# scatter-add of rows (embedding / gather backward)


@njit
def _scatter_add_rows_nb(out, idx, src):
    n, d = src.shape
    for r in range(n):
        row = idx[r]
        for k in range(d):
            out[row, k] += src[r, k]
    return out


def _scatter_add_rows_np(out, idx, src):
    np.add.at(out, idx, src)
    return out


NUMPY_KERNELS = SimpleNamespace(
    name="numpy",
    nearest_target=_nearest_target_np,
    quantile_coupling=_quantile_coupling_np,
    layer_norm_fwd=_layer_norm_fwd_np,
    layer_norm_bwd=_layer_norm_bwd_np,
    masked_softmax_fwd=_masked_softmax_fwd_np,
    softmax_bwd=_softmax_bwd_np,
    scatter_add_rows=_scatter_add_rows_np,
)

NUMBA_KERNELS = SimpleNamespace(
    name="numba",
    nearest_target=_nearest_target_nb,
    quantile_coupling=_quantile_coupling_nb,
    layer_norm_fwd=_layer_norm_fwd_nb,
    layer_norm_bwd=_layer_norm_bwd_nb,
    masked_softmax_fwd=_masked_softmax_fwd_nb,
    softmax_bwd=_softmax_bwd_nb,
    scatter_add_rows=_scatter_add_rows_nb,
)

ACTIVE = NUMBA_KERNELS if USE_NUMBA else NUMPY_KERNELS
BACKEND = ACTIVE.name


def nearest_target(src, tgt):
    """Index of the closest ``tgt`` entry (absolute difference) for every ``src`` entry.

    Rows are independent; ties resolve to the lowest target index.
    """
    src = np.ascontiguousarray(src, dtype=np.float64)
    tgt = np.ascontiguousarray(tgt, dtype=np.float64)
    return ACTIVE.nearest_target(src, tgt)


def quantile_coupling(x, mx, y, my):
    """Exact 1-D Wasserstein-1 between atoms ``x`` (masses ``mx``) and ``y`` (``my``).

    Returns ``(cost, plan)`` with ``plan`` an ``len(x) x len(y)`` float64 matrix.
    """
    args = [np.ascontiguousarray(a, dtype=np.float64) for a in (x, mx, y, my)]
    return ACTIVE.quantile_coupling(*args)


def layer_norm_fwd(x, gamma, beta, eps):
    g = np.ascontiguousarray(gamma, dtype=np.float64)
    b = np.ascontiguousarray(beta, dtype=np.float64)
    return ACTIVE.layer_norm_fwd(np.ascontiguousarray(x), g, b, float(eps))


def layer_norm_bwd(dy, xhat, rstd, gamma):
    g = np.ascontiguousarray(gamma, dtype=np.float64)
    return ACTIVE.layer_norm_bwd(np.ascontiguousarray(dy), xhat, rstd, g)


def masked_softmax_fwd(scores, mask):
    return ACTIVE.masked_softmax_fwd(np.ascontiguousarray(scores), np.ascontiguousarray(mask))


def softmax_bwd(dy, p):
    return ACTIVE.softmax_bwd(np.ascontiguousarray(dy), np.ascontiguousarray(p))


def scatter_add_rows(n_rows, idx, src, dtype):
    """Return an ``[n_rows, d]`` array with ``src[r]`` added into row ``idx[r]``."""
    src = np.ascontiguousarray(src, dtype=dtype).reshape(len(idx), -1)
    out = np.zeros((n_rows, src.shape[1]), dtype=dtype)
    return ACTIVE.scatter_add_rows(out, np.ascontiguousarray(idx, dtype=np.int64), src)
