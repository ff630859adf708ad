"""Numba-jitted hot kernels.

Loop-level twins of ``numpy_impl``; compiled nopython with on-disk caching
so the JIT cost is paid once per machine. fastmath stays off: results must
track the numpy fallback to rounding error.
"""
import numpy as np
from numba import njit


@njit(cache=True)
def silu_fwd(x):
    out = np.empty_like(x)
    for i in range(x.shape[0]):
        s = 1.0 / (1.0 + np.exp(-x[i]))
        out[i] = x[i] * s
    return out


@njit(cache=True)
def silu_bwd(x, g):
    out = np.empty_like(x)
    for i in range(x.shape[0]):
        s = 1.0 / (1.0 + np.exp(-x[i]))
        out[i] = g[i] * (s + x[i] * s * (1.0 - s))
    return out


@njit(cache=True)
def elu_fwd(x):
    out = np.empty_like(x)
    for i in range(x.shape[0]):
        out[i] = x[i] if x[i] > 0.0 else np.expm1(x[i])
    return out


@njit(cache=True)
def elu_bwd(x, g):
    out = np.empty_like(x)
    for i in range(x.shape[0]):
        out[i] = g[i] if x[i] > 0.0 else g[i] * np.exp(x[i])
    return out


@njit(cache=True)
def sigmoid_fwd(x):
    out = np.empty_like(x)
    for i in range(x.shape[0]):
        out[i] = 1.0 / (1.0 + np.exp(-x[i]))
    return out


@njit(cache=True)
def sigmoid_bwd(y, g):
    out = np.empty_like(y)
    for i in range(y.shape[0]):
        out[i] = g[i] * y[i] * (1.0 - y[i])
    return out


@njit(cache=True)
def softplus_fwd(x):
    out = np.empty_like(x)
    for i in range(x.shape[0]):
        xi = x[i]
        hi = xi if xi > 0.0 else 0.0
        out[i] = hi + np.log1p(np.exp(-abs(xi)))
    return out


@njit(cache=True)
def softplus_bwd(x, g):
    out = np.empty_like(x)
    for i in range(x.shape[0]):
        out[i] = g[i] / (1.0 + np.exp(-x[i]))
    return out


@njit(cache=True)
def layer_norm_fwd(x, gamma, beta, eps):
    n, d = x.shape
    out = np.empty((n, d))
    mean = np.empty(n)
    rstd = np.empty(n)
    for i in range(n):
        s = 0.0
        for j in range(d):
            s += x[i, j]
        mu = s / d
        q = 0.0
        for j in range(d):
            t = x[i, j] - mu
            q += t * t
        r = 1.0 / np.sqrt(q / d + eps)
        mean[i] = mu
        rstd[i] = r
        for j in range(d):
            out[i, j] = (x[i, j] - mu) * r * gamma[j] + beta[j]
    return out, mean, rstd


@njit(cache=True)
def layer_norm_bwd(x, mean, rstd, gamma, g):
    n, d = x.shape
    gx = np.empty((n, d))
    ggamma = np.zeros(d)
    gbeta = np.zeros(d)
    for i in range(n):
        m1 = 0.0
        m2 = 0.0
        for j in range(d):
            xh = (x[i, j] - mean[i]) * rstd[i]
            gy = g[i, j] * gamma[j]
            m1 += gy
            m2 += gy * xh
            ggamma[j] += g[i, j] * xh
            gbeta[j] += g[i, j]
        m1 /= d
        m2 /= d
        for j in range(d):
            xh = (x[i, j] - mean[i]) * rstd[i]
            gy = g[i, j] * gamma[j]
            gx[i, j] = rstd[i] * (gy - m1 - xh * m2)
    return gx, ggamma, gbeta


@njit(cache=True)
def masked_softmax_fwd(logits, mask):
    n, m = logits.shape
    out = np.zeros((n, m))
    for i in range(n):
        hi = -np.inf
        for j in range(m):
            if mask[i, j] != 0 and logits[i, j] > hi:
                hi = logits[i, j]
        if hi == -np.inf:
            continue  # empty row: all zeros
        denom = 0.0
        for j in range(m):
            if mask[i, j] != 0:
                e = np.exp(logits[i, j] - hi)
                out[i, j] = e
                denom += e
        for j in range(m):
            out[i, j] /= denom
    return out


@njit(cache=True)
def masked_softmax_bwd(probs, g):
    n, m = probs.shape
    out = np.empty((n, m))
    for i in range(n):
        dot = 0.0
        for j in range(m):
            dot += probs[i, j] * g[i, j]
        for j in range(m):
            out[i, j] = probs[i, j] * (g[i, j] - dot)
    return out


@njit(cache=True)
def adam_update(p, g, m, v, t, lr, beta1, beta2, eps):
    pn = np.empty_like(p)
    mn = np.empty_like(m)
    vn = np.empty_like(v)
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for i in range(p.shape[0]):
        mi = beta1 * m[i] + (1.0 - beta1) * g[i]
        vi = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i]
        mn[i] = mi
        vn[i] = vi
        pn[i] = p[i] - lr * (mi / bc1) / (np.sqrt(vi / bc2) + eps)
    return pn, mn, vn


@njit(cache=True)
def nn_min_dists(a, b, exclude_diagonal):
    n, d = a.shape
    m = b.shape[0]
    out = np.empty(n)
    for i in range(n):
        best = np.inf
        for j in range(m):
            if exclude_diagonal and i == j:
                continue
            s = 0.0
            for k in range(d):
                t = a[i, k] - b[j, k]
                s += t * t
            if s < best:
                best = s
        out[i] = np.sqrt(best)
    return out
