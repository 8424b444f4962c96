import numpy as np
import pytest

FD_STEP = 1e-4


def rel_error(a, b):
    """Norm-wise relative error between two gradient vectors."""
    a = np.ravel(a)
    b = np.ravel(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if scale == 0 else float(np.linalg.norm(a - b) / scale)


def numeric_grad(f, x, index=None, h=FD_STEP):
    """Central differences of scalar ``f()`` w.r.t. entries of array ``x`` (modified in place)."""
    flat = x.reshape(-1)
    idx = range(flat.size) if index is None else index
    out = []
    for i in idx:
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        out.append((fp - fm) / (2 * h))
    return np.array(out)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
