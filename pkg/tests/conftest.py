import numpy as np
import pytest

from odelaplace.models import fitzhugh_nagumo, linear_test, lorenz96, make_model
from odelaplace.posterior import Dataset, Prior
from odelaplace.sensitivity import solve_reference

FN_THETA = np.array([0.2, 0.2, 3.0])
FN_X0 = np.array([-1.0, -1.0])
L96_THETA = np.tile([1.0, 1.0, 8.0], 4)
L96_X0 = np.array([1.0, 8.0, 4.0, 3.0])


def rel_err(a, b):
    """Normwise relative error of ``a`` against the reference ``b``."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    scale = np.max(np.abs(b))
    return float(np.max(np.abs(a - b)) / (scale if scale > 0 else 1.0))


def sir_model(n_basis=6, window=(0.0, 30.0), N=1e4):
    return make_model("sir-tv", {"n_basis_beta": n_basis, "n_basis_gamma": n_basis, "N": N, "window": list(window)})


@pytest.fixture(scope="session")
def fn():
    return fitzhugh_nagumo()


@pytest.fixture(scope="session")
def l96():
    return lorenz96(4)


@pytest.fixture(scope="session")
def lin():
    return linear_test()


@pytest.fixture(scope="session")
def sir():
    return sir_model()


@pytest.fixture(scope="session")
def fn_prior():
    return Prior(1.0, 0.01, [[-1, 1], [-1, 1], [0.5, 6]], [[-3, 3], [-3, 3]])


@pytest.fixture(scope="session")
def fn_small_data(fn):
    """FitzHugh-Nagumo truth on a 21-point grid over [0, 20] with seeded noise."""
    t = np.linspace(0, 20, 21)
    truth = solve_reference(fn, FN_X0, FN_THETA, t)
    rng = np.random.default_rng(0)
    return Dataset(t, truth + 0.5 * rng.standard_normal(truth.shape)), truth


def random_point(model, rng):
    """Admissible (x, t, theta) of moderate size for derivative checks."""
    if model.name == "fitzhugh-nagumo":
        x = rng.uniform(-2, 2, 2)
        th = np.array([rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(0.5, 5)])
        return x, 0.0, th
    if model.name == "lorenz96":
        return rng.uniform(-5, 10, model.p), 0.0, rng.uniform([0.5, 0.5, 4] * model.p, [2, 2, 12] * model.p)
    if model.name == "linear-test":
        return rng.uniform(-3, 3, 1), 0.0, rng.uniform(-2, 2, 1)
    N = model.config["N"]
    lo, hi = model.config["window"]
    I = rng.uniform(1, 0.3 * N)
    R = rng.uniform(0, 0.3 * N)
    return np.array([I, R]), rng.uniform(lo, hi), rng.uniform(-3, 0.5, model.q)
