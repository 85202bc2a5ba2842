"""Hot numeric kernels with a numba path and a pure-numpy path.

Both paths are always importable; the ones bound at module level (``patch_encode_fwd``
and friends) are chosen once at import time:

* ``LRT_NUMBA=0`` forces the numpy path.
* otherwise numba is used when it can be imported.

The numpy twins are the reference; tests assert that the two paths agree.
"""

import os

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def dec(f):
            return f

        return dec if not args or not callable(args[0]) else args[0]


USE_NUMBA = HAVE_NUMBA and os.environ.get("LRT_NUMBA", "1") != "0"
BACKEND = "numba" if USE_NUMBA else "numpy"


# ---------------------------------------------------------------------------
# numpy reference kernels
# ---------------------------------------------------------------------------


def patch_encode_fwd_np(x, w, b):
    """Per-patch ``ReLU(x @ w + b)`` averaged over patches.

    x: (N, P, Dr), w: (Dr, Dv), b: (Dv,) -> pooled (N, Dv), active (N, P, Dv) bool.
    """
    pre = x @ w + b
    active = pre > 0.0
    pooled = np.where(active, pre, 0.0).mean(axis=1)
    return pooled, active


def patch_encode_bwd_np(x, w, active, g):
    """Gradients of ``patch_encode_fwd`` w.r.t. (x, w, b) given dL/dpooled ``g`` (N, Dv)."""
    n_patch = x.shape[1]
    gpre = np.where(active, g[:, None, :] / n_patch, 0.0)
    gw = np.einsum("npi,npk->ik", x, gpre)
    gb = gpre.sum(axis=(0, 1))
    gx = gpre @ w.T
    return gx, gw, gb


def normalize_rows_fwd_np(a):
    norms = np.sqrt((a * a).sum(axis=1))
    return a / norms[:, None], norms


def normalize_rows_bwd_np(y, norms, g):
    dots = (y * g).sum(axis=1)
    return (g - y * dots[:, None]) / norms[:, None]


def softmax_rows_np(z):
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_rows_bwd_np(y, g):
    dots = (y * g).sum(axis=1, keepdims=True)
    return y * (g - dots)


def pairwise_cosine_np(a, b):
    na = np.sqrt((a * a).sum(axis=1))
    nb = np.sqrt((b * b).sum(axis=1))
    return (a @ b.T) / np.outer(na, nb)


# ---------------------------------------------------------------------------
# numba kernels
# ---------------------------------------------------------------------------


@njit(cache=True)
def patch_encode_fwd_nb(x, w, b):
    n, p, dr = x.shape
    dv = w.shape[1]
    pooled = np.zeros((n, dv))
    active = np.zeros((n, p, dv), dtype=np.bool_)
    acc = np.empty(dv)
    inv = 1.0 / p
    for i in range(n):
        for j in range(p):
            acc[:] = b
            for r in range(dr):  # k innermost: w rows are contiguous
                xr = x[i, j, r]
                for k in range(dv):
                    acc[k] += xr * w[r, k]
            for k in range(dv):
                if acc[k] > 0.0:
                    active[i, j, k] = True
                    pooled[i, k] += acc[k]
        for k in range(dv):
            pooled[i, k] *= inv
    return pooled, active


@njit(cache=True)
def patch_encode_bwd_nb(x, w, active, g):
    n, p, dr = x.shape
    dv = w.shape[1]
    gx = np.zeros((n, p, dr))
    gw = np.zeros((dr, dv))
    gb = np.zeros(dv)
    inv = 1.0 / p
    for i in range(n):
        for j in range(p):
            for k in range(dv):
                if active[i, j, k]:
                    gk = g[i, k] * inv
                    gb[k] += gk
                    for r in range(dr):
                        gw[r, k] += x[i, j, r] * gk
                        gx[i, j, r] += gk * w[r, k]
    return gx, gw, gb


@njit(cache=True)
def normalize_rows_fwd_nb(a):
    n, d = a.shape
    y = np.empty((n, d))
    norms = np.empty(n)
    for i in range(n):
        s = 0.0
        for k in range(d):
            s += a[i, k] * a[i, k]
        nrm = np.sqrt(s)
        norms[i] = nrm
        for k in range(d):
            y[i, k] = a[i, k] / nrm
    return y, norms


@njit(cache=True)
def normalize_rows_bwd_nb(y, norms, g):
    n, d = y.shape
    out = np.empty((n, d))
    for i in range(n):
        dot = 0.0
        for k in range(d):
            dot += y[i, k] * g[i, k]
        for k in range(d):
            out[i, k] = (g[i, k] - y[i, k] * dot) / norms[i]
    return out


@njit(cache=True)
def softmax_rows_nb(z):
    n, c = z.shape
    out = np.empty((n, c))
    for i in range(n):
        m = z[i, 0]
        for k in range(1, c):
            if z[i, k] > m:
                m = z[i, k]
        s = 0.0
        for k in range(c):
            e = np.exp(z[i, k] - m)
            out[i, k] = e
            s += e
        for k in range(c):
            out[i, k] /= s
    return out


@njit(cache=True)
def softmax_rows_bwd_nb(y, g):
    n, c = y.shape
    out = np.empty((n, c))
    for i in range(n):
        dot = 0.0
        for k in range(c):
            dot += y[i, k] * g[i, k]
        for k in range(c):
            out[i, k] = y[i, k] * (g[i, k] - dot)
    return out


@njit(cache=True)
def pairwise_cosine_nb(a, b):
    n, d = a.shape
    m = b.shape[0]
    na = np.empty(n)
    nb_ = np.empty(m)
    for i in range(n):
        s = 0.0
        for k in range(d):
            s += a[i, k] * a[i, k]
        na[i] = np.sqrt(s)
    for j in range(m):
        s = 0.0
        for k in range(d):
            s += b[j, k] * b[j, k]
        nb_[j] = np.sqrt(s)
    out = np.empty((n, m))
    for i in range(n):
        for j in range(m):
            s = 0.0
            for k in range(d):
                s += a[i, k] * b[j, k]
            out[i, j] = s / (na[i] * nb_[j])
    return out


if USE_NUMBA:
    patch_encode_fwd = patch_encode_fwd_nb
    patch_encode_bwd = patch_encode_bwd_nb
    normalize_rows_fwd = normalize_rows_fwd_nb
    normalize_rows_bwd = normalize_rows_bwd_nb
    softmax_rows = softmax_rows_nb
    softmax_rows_bwd = softmax_rows_bwd_nb
    pairwise_cosine = pairwise_cosine_nb
else:
    patch_encode_fwd = patch_encode_fwd_np
    patch_encode_bwd = patch_encode_bwd_np
    normalize_rows_fwd = normalize_rows_fwd_np
    normalize_rows_bwd = normalize_rows_bwd_np
    softmax_rows = softmax_rows_np
    softmax_rows_bwd = softmax_rows_bwd_np
    pairwise_cosine = pairwise_cosine_np
