import numpy as np
import pytest

from exnode.rng import make_rng


@pytest.fixture
def rng():
    return make_rng(12345, "tests")


def rel_err(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b) /
                        np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))))


def central_diff(f, x, step=1e-5):
    """Independent finite-difference gradient oracle for scalar-valued f."""
    x = np.asarray(x, dtype=float)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + step
        fp = float(f(x))
        flat[k] = orig - step
        fm = float(f(x))
        flat[k] = orig
        gf[k] = (fp - fm) / (2 * step)
    return g
