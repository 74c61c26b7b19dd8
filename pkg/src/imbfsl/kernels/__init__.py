"""Hot numeric kernels with two interchangeable backends.

The backend is chosen once, at import, from the ``IMBFSL_BACKEND`` environment
variable: ``numba`` (default when numba imports cleanly) or ``numpy``. Both
backends are deterministic; they agree with each other to rounding error but
not bit-for-bit, so compare saved results only within one backend.
"""

import os

import numpy as np

from . import _numpy

_requested = os.environ.get("IMBFSL_BACKEND", "").strip().lower() or "numba"
if _requested not in ("numba", "numpy"):
    raise ImportError(f"IMBFSL_BACKEND must be 'numba' or 'numpy', got {_requested!r}")

_impl = _numpy
BACKEND = "numpy"
if _requested == "numba":
    try:
        from . import _numba

        _impl = _numba
        BACKEND = "numba"
    except ImportError:  # pragma: no cover - numba is a declared dependency
        pass


def _c(x):
    return np.ascontiguousarray(x, dtype=np.float64)


def sqdist(a, b):
    """Pairwise squared Euclidean distances, shape ``(len(a), len(b))``."""
    return _impl.sqdist(_c(a), _c(b))


def sqdist_bwd(g, a, b):
    return _impl.sqdist_bwd(_c(g), _c(a), _c(b))


def xent(logits, labels):
    """Mean softmax cross-entropy and its gradient w.r.t. the logits."""
    return _impl.xent(_c(logits), np.ascontiguousarray(labels, dtype=np.int64))


def l2norm_rows(x, eps):
    """Rows divided by ``sqrt(|x|^2 + eps^2)``; returns (normalized, divisors)."""
    return _impl.l2norm_rows(_c(x), float(eps))


def l2norm_rows_bwd(gy, x, d):
    return _impl.l2norm_rows_bwd(_c(gy), _c(x), _c(d))


def adam_update(p, g, m, v, lr, beta1, beta2, eps, t):
    """In-place Adam step on ``p`` with moment buffers ``m`` and ``v``."""
    _impl.adam_update(p, g, m, v, lr, beta1, beta2, eps, t)
