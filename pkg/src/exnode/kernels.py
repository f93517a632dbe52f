"""Hot numeric kernels with two interchangeable backends.

Every kernel exists twice: a numba ``@njit`` version and a pure
numpy/stdlib fallback.  The active backend is chosen once at import time
from the ``EXNODE_NUMBA`` environment variable:

    EXNODE_NUMBA=0      force the numpy fallback
    EXNODE_NUMBA=1      require numba (ImportError if missing)
    unset / auto        use numba when importable, else fall back

Both backends of ``row_fsum`` return the *correctly rounded* sum
(Shewchuk's algorithm / ``math.fsum``), so reductions are independent of
element order down to the last bit.  That property is what makes
pooling over set elements exactly permutation-invariant instead of
invariant only up to float round-off.

``benchmarks/bench_kernels.py`` times the two backends against each
other.
"""

from __future__ import annotations

import math
import os

import numpy as np

_FSUM_PARTIALS = 64  # enough for any finite-double expansion (~40 worst case)


# ---------------------------------------------------------------------------
# pure numpy / stdlib implementations
# ---------------------------------------------------------------------------

def _row_fsum_np(x: np.ndarray) -> np.ndarray:
    """Correctly rounded sum of each row of a 2D array."""
    out = np.empty(x.shape[0])
    for i in range(x.shape[0]):
        row = x[i]
        if not np.all(np.isfinite(row)):
            out[i] = np.sum(row)
        else:
            out[i] = math.fsum(row)
    return out


def _tanh_fwd_np(x, out):
    np.tanh(x, out=out)


def _tanh_bwd_np(y, g, out):
    # d tanh = 1 - tanh^2
    np.multiply(y, y, out=out)
    np.subtract(1.0, out, out=out)
    np.multiply(g, out, out=out)


def _sigmoid_fwd_np(x, out):
    # stable two-branch logistic
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)


def _sigmoid_bwd_np(y, g, out):
    np.subtract(1.0, y, out=out)
    np.multiply(y, out, out=out)
    np.multiply(g, out, out=out)


def _relu_fwd_np(x, out):
    np.maximum(x, 0.0, out=out)


def _relu_bwd_np(y, g, out):
    np.multiply(g, y > 0.0, out=out)


def _softmax2_fwd_np(x, out):
    # softmax over the last axis of a 2D array
    m = np.max(x, axis=1, keepdims=True)
    np.exp(x - m, out=out)
    out /= np.sum(out, axis=1, keepdims=True)


def _softmax2_bwd_np(y, g, out):
    dot = np.sum(g * y, axis=1, keepdims=True)
    np.multiply(y, g - dot, out=out)


def _adam_update_np(p, g, m, v, lr, beta1, beta2, eps, bc1, bc2):
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * g * g
    p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


_NUMPY_IMPL = {
    "row_fsum": _row_fsum_np,
    "tanh_fwd": _tanh_fwd_np,
    "tanh_bwd": _tanh_bwd_np,
    "sigmoid_fwd": _sigmoid_fwd_np,
    "sigmoid_bwd": _sigmoid_bwd_np,
    "relu_fwd": _relu_fwd_np,
    "relu_bwd": _relu_bwd_np,
    "softmax2_fwd": _softmax2_fwd_np,
    "softmax2_bwd": _softmax2_bwd_np,
    "adam_update": _adam_update_np,
}


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

def _build_numba_impl():
    from numba import njit

    @njit(cache=True)
    def row_fsum(x):
        out = np.empty(x.shape[0])
        partials = np.empty(_FSUM_PARTIALS)
        for r in range(x.shape[0]):
            k = x.shape[1]
            finite = True
            for j in range(k):
                if not math.isfinite(x[r, j]):
                    finite = False
                    break
            if not finite:
                s = 0.0
                for j in range(k):
                    s += x[r, j]
                out[r] = s
                continue
            # Shewchuk accumulation: partials are non-overlapping and sum
            # exactly to the true row sum.
            n = 0
            for j in range(k):
                xv = x[r, j]
                i = 0
                for q in range(n):
                    y = partials[q]
                    if abs(xv) < abs(y):
                        t = xv
                        xv = y
                        y = t
                    hi = xv + y
                    yr = hi - xv
                    lo = y - yr
                    if lo != 0.0:
                        partials[i] = lo
                        i += 1
                    xv = hi
                partials[i] = xv
                n = i + 1
            # round the exact value to the nearest double (CPython fsum tail)
            if n == 0:
                out[r] = 0.0
                continue
            n -= 1
            hi = partials[n]
            lo = 0.0
            while n > 0:
                xv = hi
                n -= 1
                y = partials[n]
                hi = xv + y
                yr = hi - xv
                lo = y - yr
                if lo != 0.0:
                    break
            if n > 0 and ((lo < 0.0 and partials[n - 1] < 0.0)
                          or (lo > 0.0 and partials[n - 1] > 0.0)):
                y = lo * 2.0
                xv = hi + y
                yr = xv - hi
                if y == yr:
                    hi = xv
            out[r] = hi
        return out

    # numpy's SIMD tanh beats a scalar libm loop by ~10x; keep it on both
    # backends (results are value-determined, so equivariance is unaffected)
    tanh_fwd = _tanh_fwd_np

    @njit(cache=True)
    def tanh_bwd(y, g, out):
        for i in range(y.size):
            out[i] = g[i] * (1.0 - y[i] * y[i])

    @njit(cache=True)
    def sigmoid_fwd(x, out):
        for i in range(x.size):
            v = x[i]
            if v >= 0.0:
                out[i] = 1.0 / (1.0 + math.exp(-v))
            else:
                e = math.exp(v)
                out[i] = e / (1.0 + e)

    @njit(cache=True)
    def sigmoid_bwd(y, g, out):
        for i in range(y.size):
            out[i] = g[i] * y[i] * (1.0 - y[i])

    @njit(cache=True)
    def relu_fwd(x, out):
        for i in range(x.size):
            v = x[i]
            out[i] = v if v > 0.0 else 0.0

    @njit(cache=True)
    def relu_bwd(y, g, out):
        for i in range(y.size):
            out[i] = g[i] if y[i] > 0.0 else 0.0

    @njit(cache=True)
    def softmax2_fwd(x, out):
        for r in range(x.shape[0]):
            m = x[r, 0]
            for j in range(1, x.shape[1]):
                if x[r, j] > m:
                    m = x[r, j]
            s = 0.0
            for j in range(x.shape[1]):
                e = math.exp(x[r, j] - m)
                out[r, j] = e
                s += e
            inv = 1.0 / s
            for j in range(x.shape[1]):
                out[r, j] *= inv

    @njit(cache=True)
    def softmax2_bwd(y, g, out):
        for r in range(y.shape[0]):
            dot = 0.0
            for j in range(y.shape[1]):
                dot += g[r, j] * y[r, j]
            for j in range(y.shape[1]):
                out[r, j] = y[r, j] * (g[r, j] - dot)

    @njit(cache=True)
    def adam_update(p, g, m, v, lr, beta1, beta2, eps, bc1, bc2):
        for i in range(p.size):
            gi = g[i]
            mi = beta1 * m[i] + (1.0 - beta1) * gi
            vi = beta2 * v[i] + (1.0 - beta2) * gi * gi
            m[i] = mi
            v[i] = vi
            p[i] -= lr * (mi / bc1) / (math.sqrt(vi / bc2) + eps)

    return {
        "row_fsum": row_fsum,
        "tanh_fwd": tanh_fwd,
        "tanh_bwd": tanh_bwd,
        "sigmoid_fwd": sigmoid_fwd,
        "sigmoid_bwd": sigmoid_bwd,
        "relu_fwd": relu_fwd,
        "relu_bwd": relu_bwd,
        "softmax2_fwd": softmax2_fwd,
        "softmax2_bwd": softmax2_bwd,
        "adam_update": adam_update,
    }


def _select_backend() -> tuple[str, dict]:
    flag = os.environ.get("EXNODE_NUMBA", "auto").strip().lower()
    if flag in ("0", "false", "off", "numpy"):
        return "numpy", _NUMPY_IMPL
    try:
        impl = _build_numba_impl()
        return "numba", impl
    except ImportError:
        if flag in ("1", "true", "on", "numba"):
            raise
        return "numpy", _NUMPY_IMPL


BACKEND, _IMPL = _select_backend()


def active_backend() -> str:
    """Name of the backend selected at import time ('numba' or 'numpy')."""
    return BACKEND


def implementations(name: str) -> dict:
    """Raw kernel table for an explicit backend (used by tests/benchmarks)."""
    if name == "numpy":
        return _NUMPY_IMPL
    if name == "numba":
        return _build_numba_impl()
    raise ValueError(f"unknown backend {name!r}")


# ---------------------------------------------------------------------------
# shape-agnostic wrappers around the active backend
# ---------------------------------------------------------------------------

def _flat(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(a).reshape(-1)


def fsum_along(x: np.ndarray, axis: int | None) -> np.ndarray:
    """Order-independent (correctly rounded) sum over one axis or all axes."""
    x = np.asarray(x, dtype=np.float64)
    if axis is None:
        flat = _flat(x).reshape(1, -1)
        return _IMPL["row_fsum"](flat)[0]
    axis = axis % x.ndim
    moved = np.moveaxis(x, axis, -1)
    lead = moved.shape[:-1]
    flat = np.ascontiguousarray(moved).reshape(-1, moved.shape[-1])
    return _IMPL["row_fsum"](flat).reshape(lead)


def _unary(name: str, x: np.ndarray) -> np.ndarray:
    out = np.empty(x.size)
    _IMPL[name](_flat(x), out)
    return out.reshape(x.shape)


def _unary_bwd(name: str, y: np.ndarray, g: np.ndarray) -> np.ndarray:
    out = np.empty(y.size)
    _IMPL[name](_flat(y), _flat(g), out)
    return out.reshape(y.shape)


def tanh(x):
    return _unary("tanh_fwd", x)


def tanh_grad(y, g):
    return _unary_bwd("tanh_bwd", y, g)


def sigmoid(x):
    return _unary("sigmoid_fwd", x)


def sigmoid_grad(y, g):
    return _unary_bwd("sigmoid_bwd", y, g)


def relu(x):
    return _unary("relu_fwd", x)


def relu_grad(y, g):
    return _unary_bwd("relu_bwd", y, g)


def softmax_lastaxis(x: np.ndarray) -> np.ndarray:
    x2 = np.ascontiguousarray(x).reshape(-1, x.shape[-1])
    out = np.empty_like(x2)
    _IMPL["softmax2_fwd"](x2, out)
    return out.reshape(x.shape)


def softmax_lastaxis_grad(y: np.ndarray, g: np.ndarray) -> np.ndarray:
    y2 = np.ascontiguousarray(y).reshape(-1, y.shape[-1])
    g2 = np.ascontiguousarray(g).reshape(-1, g.shape[-1])
    out = np.empty_like(y2)
    _IMPL["softmax2_bwd"](y2, g2, out)
    return out.reshape(y.shape)


def adam_update(p, g, m, v, lr, beta1, beta2, eps, step):
    """In-place Adam update of flat parameter/state arrays."""
    bc1 = 1.0 - beta1 ** step
    bc2 = 1.0 - beta2 ** step
    _IMPL["adam_update"](p, _flat(g), m, v, lr, beta1, beta2, eps, bc1, bc2)
