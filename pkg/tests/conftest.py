import numpy as np
import pytest


def random_spd(rng, p, jitter=0.5):
    G = rng.standard_normal((p, p))
    return G @ G.T / p + jitter * np.eye(p)


def unit_det(M):
    return M / np.linalg.det(M) ** (1.0 / M.shape[0])


def central_diff(f, x, step):
    """Central finite-difference gradient/Jacobian of ``f`` at flat ``x``."""
    x = np.asarray(x, dtype=float)
    f0 = np.asarray(f(x))
    out = np.empty(f0.shape + x.shape)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = step
        out[..., i] = (np.asarray(f(x + e)) - np.asarray(f(x - e))) / (2 * step)
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)
