# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Cython implementations of the hot kernels.

Mirrors the interface of ``_pykernels``; each function fuses what numpy does
in several passes into one C loop.  Arrays are float64 and C-contiguous.
Negative indices are never used (wraparound is compiled out).
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, sqrt, INFINITY

cnp.import_array()


cdef inline Py_ssize_t _last_dim(object a):
    shp = a.shape
    return shp[len(shp) - 1]


def softmax_rows_fwd(x):
    xa = np.asarray(x)
    cdef Py_ssize_t d = _last_dim(xa)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] x2 = np.ascontiguousarray(xa).reshape(-1, d)
    cdef Py_ssize_t n = x2.shape[0], i, j
    cdef cnp.ndarray[cnp.float64_t, ndim=2] y = np.empty_like(x2)
    cdef double m, s
    for i in range(n):
        m = x2[i, 0]
        for j in range(1, d):
            if x2[i, j] > m:
                m = x2[i, j]
        s = 0.0
        for j in range(d):
            y[i, j] = exp(x2[i, j] - m)
            s += y[i, j]
        for j in range(d):
            y[i, j] /= s
    return y.reshape(xa.shape)


def softmax_rows_bwd(y, dy):
    ya = np.asarray(y)
    cdef Py_ssize_t d = _last_dim(ya)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] y2 = np.ascontiguousarray(ya).reshape(-1, d)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] dy2 = np.ascontiguousarray(dy).reshape(-1, d)
    cdef Py_ssize_t n = y2.shape[0], i, j
    cdef cnp.ndarray[cnp.float64_t, ndim=2] dx = np.empty_like(y2)
    cdef double inner
    for i in range(n):
        inner = 0.0
        for j in range(d):
            inner += dy2[i, j] * y2[i, j]
        for j in range(d):
            dx[i, j] = y2[i, j] * (dy2[i, j] - inner)
    return dx.reshape(ya.shape)


def masked_softmax_rows_fwd(x, mask):
    xa = np.asarray(x)
    keep_b = np.broadcast_to(np.asarray(mask) != 0, xa.shape)
    cdef Py_ssize_t d = _last_dim(xa)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] x2 = np.ascontiguousarray(xa).reshape(-1, d)
    cdef cnp.ndarray[cnp.uint8_t, ndim=2] k2 = np.ascontiguousarray(keep_b, dtype=np.uint8).reshape(-1, d)
    cdef Py_ssize_t n = x2.shape[0], i, j
    cdef cnp.ndarray[cnp.float64_t, ndim=2] y = np.zeros_like(x2)
    cdef double m, s
    cdef bint any_kept
    for i in range(n):
        any_kept = False
        m = -INFINITY
        for j in range(d):
            if k2[i, j]:
                any_kept = True
                if x2[i, j] > m:
                    m = x2[i, j]
        if not any_kept:
            raise ValueError("masked softmax: a row has no unmasked position")
        s = 0.0
        for j in range(d):
            if k2[i, j]:
                y[i, j] = exp(x2[i, j] - m)
                s += y[i, j]
        for j in range(d):
            if k2[i, j]:
                y[i, j] /= s
    return y.reshape(xa.shape)


def layer_norm_fwd(x, gain, bias, double eps):
    xa = np.asarray(x)
    cdef Py_ssize_t d = _last_dim(xa)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] x2 = np.ascontiguousarray(xa).reshape(-1, d)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] gn = np.ascontiguousarray(gain)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] bs = np.ascontiguousarray(bias)
    cdef Py_ssize_t n = x2.shape[0], i, j
    cdef cnp.ndarray[cnp.float64_t, ndim=2] y = np.empty_like(x2)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] mu = np.empty((n, 1))
    cdef cnp.ndarray[cnp.float64_t, ndim=2] rstd = np.empty((n, 1))
    cdef double m, v, r, xc
    for i in range(n):
        m = 0.0
        for j in range(d):
            m += x2[i, j]
        m /= d
        v = 0.0
        for j in range(d):
            xc = x2[i, j] - m
            v += xc * xc
        v /= d
        r = 1.0 / sqrt(v + eps)
        mu[i, 0] = m
        rstd[i, 0] = r
        for j in range(d):
            y[i, j] = (x2[i, j] - m) * r * gn[j] + bs[j]
    shp = xa.shape
    lead = shp[: len(shp) - 1]
    return (
        y.reshape(shp),
        np.asarray(mu).reshape(lead + (1,)),
        np.asarray(rstd).reshape(lead + (1,)),
    )


def layer_norm_bwd(x, gain, mu, rstd, dy):
    xa = np.asarray(x)
    cdef Py_ssize_t d = _last_dim(xa)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] x2 = np.ascontiguousarray(xa).reshape(-1, d)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] dy2 = np.ascontiguousarray(dy).reshape(-1, d)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] gn = np.ascontiguousarray(gain)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] mu1 = np.ascontiguousarray(mu).reshape(-1)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] rs1 = np.ascontiguousarray(rstd).reshape(-1)
    cdef Py_ssize_t n = x2.shape[0], i, j
    cdef cnp.ndarray[cnp.float64_t, ndim=2] dx = np.empty_like(x2)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] dgain = np.zeros(d)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] dbias = np.zeros(d)
    cdef double m, r, s1, s2, xhat, dxh
    for i in range(n):
        m = mu1[i]
        r = rs1[i]
        s1 = 0.0
        s2 = 0.0
        for j in range(d):
            xhat = (x2[i, j] - m) * r
            dxh = dy2[i, j] * gn[j]
            s1 += dxh
            s2 += dxh * xhat
            dgain[j] += dy2[i, j] * xhat
            dbias[j] += dy2[i, j]
        s1 /= d
        s2 /= d
        for j in range(d):
            xhat = (x2[i, j] - m) * r
            dx[i, j] = r * (dy2[i, j] * gn[j] - s1 - xhat * s2)
    return dx.reshape(xa.shape), np.asarray(dgain), np.asarray(dbias)


def gated_pool_fwd(h, w):
    cdef cnp.ndarray[cnp.float64_t, ndim=3] h3 = np.ascontiguousarray(h)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] w2 = np.ascontiguousarray(w)
    cdef Py_ssize_t b = h3.shape[0], t = h3.shape[1], d = h3.shape[2], i, j, k
    cdef cnp.ndarray[cnp.float64_t, ndim=2] pooled = np.zeros((b, d))
    cdef cnp.ndarray[cnp.float64_t, ndim=1] wsum = np.zeros(b)
    cdef double s, wv
    for i in range(b):
        s = 0.0
        for j in range(t):
            s += w2[i, j]
        if s <= 0.0:
            raise ValueError("gated pool: a sequence has non-positive total weight")
        wsum[i] = s
        for j in range(t):
            wv = w2[i, j]
            for k in range(d):
                pooled[i, k] += wv * h3[i, j, k]
        for k in range(d):
            pooled[i, k] /= s
    return np.asarray(pooled), np.asarray(wsum)


def gated_pool_bwd(h, w, wsum, pooled, dpooled):
    cdef cnp.ndarray[cnp.float64_t, ndim=3] h3 = np.ascontiguousarray(h)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] w2 = np.ascontiguousarray(w)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] ws = np.ascontiguousarray(wsum)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] pl = np.ascontiguousarray(pooled)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] dp = np.ascontiguousarray(dpooled)
    cdef Py_ssize_t b = h3.shape[0], t = h3.shape[1], d = h3.shape[2], i, j, k
    cdef cnp.ndarray[cnp.float64_t, ndim=3] dh = np.empty_like(h3)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] dw = np.zeros((b, t))
    cdef double sc, acc
    for i in range(b):
        for j in range(t):
            acc = 0.0
            for k in range(d):
                sc = dp[i, k] / ws[i]
                dh[i, j, k] = w2[i, j] * sc
                acc += (h3[i, j, k] - pl[i, k]) * sc
            dw[i, j] = acc
    return np.asarray(dh), np.asarray(dw)


def best_split(x, g, Py_ssize_t min_leaf):
    cdef cnp.ndarray[cnp.float64_t, ndim=2] xc = np.ascontiguousarray(x)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] gc = np.ascontiguousarray(g)
    cdef Py_ssize_t n = xc.shape[0], n_feat = xc.shape[1], f, i, nl
    cdef double total = 0.0
    for i in range(n):
        total += gc[i]
    cdef double parent = total * total / n
    cdef double best_gain = 0.0, best_thresh = 0.0
    cdef Py_ssize_t best_feat = -1
    cdef bint found = False
    cdef cnp.ndarray[cnp.int64_t, ndim=1] order
    cdef double s_left, gain, prev, cur
    for f in range(n_feat):
        order = np.argsort(xc[:, f], kind="stable").astype(np.int64)
        s_left = 0.0
        for i in range(n - 1):
            s_left += gc[order[i]]
            prev = xc[order[i], f]
            cur = xc[order[i + 1], f]
            if prev >= cur:
                continue
            nl = i + 1
            if nl < min_leaf or n - nl < min_leaf:
                continue
            gain = s_left * s_left / nl + (total - s_left) * (total - s_left) / (n - nl) - parent
            if gain > best_gain:
                best_gain = gain
                best_feat = f
                best_thresh = 0.5 * (prev + cur)
                found = True
    return best_feat, best_thresh, best_gain, found
