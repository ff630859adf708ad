"""Pure-numpy reference implementations of the hot kernels.

Semantics here are authoritative: the numba variants in ``numba_impl``
must agree with these to float rounding. Elementwise kernels take and
return 1-D contiguous float64 arrays; row kernels take 2-D.
"""
import numpy as np


# --- elementwise activations ------------------------------------------------

def silu_fwd(x):
    s = 1.0 / (1.0 + np.exp(-x))
    return x * s


def silu_bwd(x, g):
    s = 1.0 / (1.0 + np.exp(-x))
    return g * (s + x * s * (1.0 - s))


def elu_fwd(x):
    return np.where(x > 0.0, x, np.expm1(x))


def elu_bwd(x, g):
    return g * np.where(x > 0.0, 1.0, np.exp(x))


def sigmoid_fwd(x):
    return 1.0 / (1.0 + np.exp(-x))


def sigmoid_bwd(y, g):
    # y is the forward output
    return g * y * (1.0 - y)


def softplus_fwd(x):
    # stable: log(1 + e^x) = max(x, 0) + log1p(e^{-|x|})
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def softplus_bwd(x, g):
    return g / (1.0 + np.exp(-x))


# --- row-wise normalization -------------------------------------------------

def layer_norm_fwd(x, gamma, beta, eps):
    """Per-row zero-mean unit-variance (population) normalization + affine.

    Returns (out, mean, rstd); mean/rstd are cached for the backward pass.
    """
    mean = x.mean(axis=1)
    var = ((x - mean[:, None]) ** 2).mean(axis=1)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean[:, None]) * rstd[:, None]
    return xhat * gamma + beta, mean, rstd


def layer_norm_bwd(x, mean, rstd, gamma, g):
    xhat = (x - mean[:, None]) * rstd[:, None]
    gy = g * gamma
    d = x.shape[1]
    m1 = gy.mean(axis=1)
    m2 = (gy * xhat).mean(axis=1)
    gx = rstd[:, None] * (gy - m1[:, None] - xhat * m2[:, None])
    ggamma = (g * xhat).sum(axis=0)
    gbeta = g.sum(axis=0)
    return gx, ggamma, gbeta


# --- masked softmax ---------------------------------------------------------

def masked_softmax_fwd(logits, mask):
    """Row softmax over unmasked entries; masked entries are exactly 0.

    ``mask`` is uint8, nonzero = participates. Rows with no unmasked entry
    yield all zeros (callers that forbid empty rows check beforehand).
    """
    live = mask != 0
    neg = np.where(live, logits, -np.inf)
    rowmax = neg.max(axis=1)
    rowmax = np.where(np.isfinite(rowmax), rowmax, 0.0)
    e = np.exp(np.where(live, logits - rowmax[:, None], -np.inf))
    denom = e.sum(axis=1)
    denom = np.where(denom > 0.0, denom, 1.0)
    return e / denom[:, None]


def masked_softmax_bwd(probs, g):
    dot = (probs * g).sum(axis=1)
    return probs * (g - dot[:, None])


# --- Adam update ------------------------------------------------------------

def adam_update(p, g, m, v, t, lr, beta1, beta2, eps):
    """One bias-corrected Adam step on flat arrays; returns fresh arrays."""
    mn = beta1 * m + (1.0 - beta1) * g
    vn = beta2 * v + (1.0 - beta2) * g * g
    mhat = mn / (1.0 - beta1 ** t)
    vhat = vn / (1.0 - beta2 ** t)
    pn = p - lr * mhat / (np.sqrt(vhat) + eps)
    return pn, mn, vn


# --- nearest-neighbour distances ---------------------------------------------

def nn_min_dists(a, b, exclude_diagonal):
    """Euclidean distance from each row of ``a`` to its nearest row of ``b``.

    ``exclude_diagonal`` skips pair (i, i); only meaningful when a is b.
    Squared distances come from explicit differences (no a^2+b^2-2ab trick,
    which loses precision for near-duplicate points). Chunked over rows of
    ``a`` to bound the temporary array.
    """
    n, d = a.shape
    m = b.shape[0]
    out = np.empty(n)
    chunk = max(1, int(4_000_000 // max(m * d, 1)))
    for s in range(0, n, chunk):
        e = min(n, s + chunk)
        diff = a[s:e, None, :] - b[None, :, :]
        d2 = (diff * diff).sum(axis=2)
        if exclude_diagonal:
            d2[np.arange(e - s), np.arange(s, e)] = np.inf
        out[s:e] = np.sqrt(d2.min(axis=1))
    return out
