"""Numpy implementations of the hot kernels (the import-time fallback)."""

import numpy as np


def softmax_rows_fwd(x):
    """Softmax along the last axis. Rows of equal logits come out exactly uniform."""
    m = np.max(x, axis=-1, keepdims=True)
    e = np.exp(x - m)
    return e / np.sum(e, axis=-1, keepdims=True)


def softmax_rows_bwd(y, dy):
    inner = np.sum(dy * y, axis=-1, keepdims=True)
    return y * (dy - inner)


def masked_softmax_rows_fwd(x, mask):
    """Softmax over positions where mask != 0; masked positions get exactly 0.

    mask broadcasts against x over the last axis. Every row must keep at
    least one position.
    """
    keep = np.broadcast_to(mask != 0, x.shape)
    if not keep.any(axis=-1).all():
        raise ValueError("masked softmax: a row has no unmasked position")
    neg = np.where(keep, x, -np.inf)
    m = np.max(neg, axis=-1, keepdims=True)
    e = np.where(keep, np.exp(neg - m), 0.0)
    return e / np.sum(e, axis=-1, keepdims=True)


def layer_norm_fwd(x, gain, bias, eps):
    mu = np.mean(x, axis=-1, keepdims=True)
    var = np.mean((x - mu) ** 2, axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * rstd
    return xhat * gain + bias, mu, rstd


def layer_norm_bwd(x, gain, mu, rstd, dy):
    xhat = (x - mu) * rstd
    dxhat = dy * gain
    mean_dxhat = np.mean(dxhat, axis=-1, keepdims=True)
    mean_dxhat_xhat = np.mean(dxhat * xhat, axis=-1, keepdims=True)
    dx = rstd * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat)
    # gain/bias grads reduce over every axis but the last
    red = tuple(range(x.ndim - 1))
    dgain = np.sum(dy * xhat, axis=red)
    dbias = np.sum(dy, axis=red)
    return dx, dgain, dbias


def gated_pool_fwd(h, w):
    """Weighted mean over the token axis: pooled[b] = sum_t w[b,t] h[b,t] / sum_t w[b,t]."""
    wsum = np.sum(w, axis=1)
    if np.any(wsum <= 0.0):
        raise ValueError("gated pool: a sequence has non-positive total weight")
    pooled = np.einsum("bt,btd->bd", w, h) / wsum[:, None]
    return pooled, wsum


def gated_pool_bwd(h, w, wsum, pooled, dpooled):
    scale = dpooled / wsum[:, None]                       # (B, d)
    dh = w[:, :, None] * scale[:, None, :]                # (B, T, d)
    dw = np.einsum("btd,bd->bt", h - pooled[:, None, :], scale)
    return dh, dw


def best_split(x, g, min_leaf):
    """Exact greedy squared-error split search over all features and thresholds.

    Gain is the SSE reduction of splitting g at x[:, f] <= threshold, with the
    threshold at the midpoint of consecutive distinct sorted values.  Ties are
    broken toward the lowest feature index, then the lowest threshold.

    Returns (feature, threshold, gain, found).
    """
    n, n_feat = x.shape
    total = float(np.sum(g))
    parent = total * total / n
    best_gain = 0.0
    best_feat = -1
    best_thresh = 0.0
    found = False
    for f in range(n_feat):
        order = np.argsort(x[:, f], kind="stable")
        xs = x[order, f]
        prefix = np.cumsum(g[order])
        n_left = np.arange(1, n)
        valid = xs[:-1] < xs[1:]
        if min_leaf > 1:
            valid &= (n_left >= min_leaf) & (n - n_left >= min_leaf)
        if not valid.any():
            continue
        s_left = prefix[:-1]
        gains = s_left**2 / n_left + (total - s_left) ** 2 / (n - n_left) - parent
        gains = np.where(valid, gains, -np.inf)
        i = int(np.argmax(gains))
        if gains[i] > best_gain:
            best_gain = float(gains[i])
            best_feat = f
            best_thresh = 0.5 * (xs[i] + xs[i + 1])
            found = True
    return best_feat, best_thresh, best_gain, found
