"""Jitted kernels. Loops are written out so each call is a single pass with no
temporaries; inputs must be C-contiguous float64 (labels int64)."""

import numpy as np
from numba import njit

_opts = dict(cache=True, nogil=True)


@njit(**_opts)
def sqdist(a, b):
    n, k = a.shape
    m = b.shape[0]
    out = np.empty((n, m))
    for i in range(n):
        for j in range(m):
            s = 0.0
            for t in range(k):
                diff = a[i, t] - b[j, t]
                s += diff * diff
            out[i, j] = s
    return out


@njit(**_opts)
def sqdist_bwd(g, a, b):
    n, k = a.shape
    m = b.shape[0]
    ga = np.zeros((n, k))
    gb = np.zeros((m, k))
    for i in range(n):
        for j in range(m):
            w = 2.0 * g[i, j]
            if w == 0.0:
                continue
            for t in range(k):
                diff = w * (a[i, t] - b[j, t])
                ga[i, t] += diff
                gb[j, t] -= diff
    return ga, gb


@njit(**_opts)
def xent(logits, labels):
    n, c = logits.shape
    grad = np.empty((n, c))
    total = 0.0
    for i in range(n):
        mx = logits[i, 0]
        for j in range(1, c):
            if logits[i, j] > mx:
                mx = logits[i, j]
        s = 0.0
        for j in range(c):
            e = np.exp(logits[i, j] - mx)
            grad[i, j] = e
            s += e
        lse = np.log(s)
        total += lse - (logits[i, labels[i]] - mx)
        for j in range(c):
            grad[i, j] = grad[i, j] / s / n
        grad[i, labels[i]] -= 1.0 / n
    return total / n, grad


@njit(**_opts)
def l2norm_rows(x, eps):
    n, k = x.shape
    y = np.empty((n, k))
    d = np.empty(n)
    for i in range(n):
        s = eps * eps
        for t in range(k):
            s += x[i, t] * x[i, t]
        d[i] = np.sqrt(s)
        for t in range(k):
            y[i, t] = x[i, t] / d[i]
    return y, d


@njit(**_opts)
def l2norm_rows_bwd(gy, x, d):
    n, k = x.shape
    gx = np.empty((n, k))
    for i in range(n):
        dot = 0.0
        for t in range(k):
            dot += x[i, t] * gy[i, t]
        c = dot / (d[i] * d[i] * d[i])
        for t in range(k):
            gx[i, t] = gy[i, t] / d[i] - x[i, t] * c
    return gx


@njit(**_opts)
def _adam_flat(p, g, m, v, lr, beta1, beta2, eps, t):
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for i in range(p.size):
        m[i] = beta1 * m[i] + (1.0 - beta1) * g[i]
        v[i] = beta2 * v[i] + (1.0 - beta2) * (g[i] * g[i])
        p[i] -= lr * (m[i] / bc1) / (np.sqrt(v[i] / bc2) + eps)


def adam_update(p, g, m, v, lr, beta1, beta2, eps, t):
    _adam_flat(p.reshape(-1), np.ascontiguousarray(g).reshape(-1), m.reshape(-1),
               v.reshape(-1), float(lr), float(beta1), float(beta2), float(eps), int(t))
