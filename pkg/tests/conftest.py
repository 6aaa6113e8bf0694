import numpy as np
import pytest

from neuralhmm.oracle import LinearGaussianModel, to_vanilla


def central_diff(f, x, h=1e-5):
    """Central finite-difference gradient of scalar ``f`` at array ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        g[idx] = (f(xp) - f(xm)) / (2 * h)
    return g


def assert_rel_close(analytic, numeric, rtol=1e-4, atol=1e-7):
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    err = np.abs(analytic - numeric)
    bound = rtol * np.maximum(np.abs(analytic), np.abs(numeric)) + atol
    assert np.all(err <= bound), f"max excess {np.max(err - bound)}"


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def lg1():
    """Stable scalar linear-Gaussian model."""
    return LinearGaussianModel(A=[[0.9]], b=[0.0], Q_var=[0.5], C=[[1.0]], d=[0.0], R_var=[1.0],
                               init_mean=[0.0], init_var=[1.0])


@pytest.fixture
def vanilla1(lg1):
    return to_vanilla(lg1)


@pytest.fixture
def no_clamp(monkeypatch):
    """Lift the log-variance stabilization floor so log_var = -40 heads act as near-deterministic maps."""
    import neuralhmm.dist as dist
    monkeypatch.setattr(dist, "LOG_VAR_MIN", -60.0)
