"""Reference kernels in plain numpy. Every function here has a jitted twin in
``_numba`` with the same signature; the two must agree to rounding."""

import numpy as np


def sqdist(a, b):
    aa = np.einsum("ij,ij->i", a, a)
    bb = np.einsum("ij,ij->i", b, b)
    d = aa[:, None] + bb[None, :] - 2.0 * (a @ b.T)
    # cancellation can leave tiny negatives
    return np.maximum(d, 0.0)


def sqdist_bwd(g, a, b):
    ga = 2.0 * (g.sum(axis=1)[:, None] * a - g @ b)
    gb = 2.0 * (g.sum(axis=0)[:, None] * b - g.T @ a)
    return ga, gb


def xent(logits, labels):
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    n = logits.shape[0]
    rows = np.arange(n)
    loss = float(np.mean(lse - shifted[rows, labels]))
    probs = np.exp(shifted - lse[:, None])
    probs[rows, labels] -= 1.0
    return loss, probs / n


def l2norm_rows(x, eps):
    d = np.sqrt(np.einsum("ij,ij->i", x, x) + eps * eps)
    return x / d[:, None], d


def l2norm_rows_bwd(gy, x, d):
    dot = np.einsum("ij,ij->i", x, gy)
    return gy / d[:, None] - x * (dot / d**3)[:, None]


def adam_update(p, g, m, v, lr, beta1, beta2, eps, t):
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * (g * g)
    mhat = m / (1.0 - beta1**t)
    vhat = v / (1.0 - beta2**t)
    p -= lr * mhat / (np.sqrt(vhat) + eps)
