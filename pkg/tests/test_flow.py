import zlib

import numpy as np
import pytest
from scipy.integrate import solve_ivp

from odelaplace.errors import FlowOverflowError, InputError
from odelaplace.flow import StepConfig, compose_flow, rk4_hessian, rk4_jacobian, rk4_step
from odelaplace.models import eval_rhs, make_model

from conftest import FN_THETA, FN_X0, random_point, rel_err, sir_model

MODELS = ["fitzhugh-nagumo", "lorenz96", "sir-tv", "linear-test"]


def _model(name):
    return sir_model() if name == "sir-tv" else make_model(name)


def _poly(z):
    return 1 + z + z**2 / 2 + z**3 / 6 + z**4 / 24


def test_linear_step_polynomial(lin):
    assert abs(rk4_step(lin, [1.0], 0.0, [-1.0], 0.1)[0] - _poly(-0.1)) < 1e-15
    assert abs(_poly(-0.1) - 0.9048375) < 1e-7


def test_zero_rate_identity(lin):
    assert rk4_step(lin, [3.7], 0.0, [0.0], 0.5)[0] == 3.7


def _fn_reference(fn, h):
    sol = solve_ivp(lambda t, x: eval_rhs(fn, x, t, FN_THETA), (0, h), FN_X0, method="DOP853", rtol=3e-14,
                    atol=1e-14)
    return sol.y[:, -1]


@pytest.mark.xfail(strict=True, reason="one RK4 step of 0.1 from this state has local error ~1.4e-4")
def test_fn_step_vs_adaptive(fn):
    assert np.max(np.abs(rk4_step(fn, FN_X0, 0.0, FN_THETA, 0.1) - _fn_reference(fn, 0.1))) <= 1e-6


def test_fn_step_is_textbook_rk4(fn):
    def f(x):
        return eval_rhs(fn, x, 0.0, FN_THETA)

    h, x = 0.1, FN_X0
    k1 = f(x)
    k2 = f(x + h / 2 * k1)
    k3 = f(x + h / 2 * k2)
    k4 = f(x + h * k3)
    assert np.allclose(rk4_step(fn, x, 0.0, FN_THETA, h), x + h * (k1 + 2 * k2 + 2 * k3 + k4) / 6, rtol=0, atol=1e-15)


def test_fn_step_local_error_order(fn):
    hs = np.array([0.05, 0.025, 0.0125])
    err = [np.max(np.abs(rk4_step(fn, FN_X0, 0.0, FN_THETA, h) - _fn_reference(fn, h))) for h in hs]
    slope = np.polyfit(np.log(hs), np.log(err), 1)[0]
    assert slope > 4.5
    assert err[-1] <= 1e-8


def test_linear_jacobian_polynomial(lin):
    th, h = -0.8, 0.3
    jx, jt = rk4_jacobian(lin, [2.0], 0.0, [th], h)
    z = th * h
    assert abs(jx[0, 0] - _poly(z)) < 1e-15
    # d/dtheta of poly(theta h) x = h poly'(z) x
    assert abs(jt[0, 0] - h * (1 + z + z**2 / 2 + z**3 / 6) * 2.0) < 1e-14


def test_linear_mixed_second_derivative(lin):
    th, h, x = -0.8, 0.3, 2.0
    H = rk4_hessian(lin, [x], 0.0, [th], h)[0]
    z = th * h
    dpoly = 1 + z + z**2 / 2 + z**3 / 6
    ddpoly = 1 + z + z**2 / 2
    assert abs(H[0, 0]) < 1e-15
    assert abs(H[0, 1] - h * dpoly) <= 1e-10
    assert abs(H[1, 1] - h**2 * ddpoly * x) <= 1e-10


def test_small_step_limits(l96):
    rng = np.random.default_rng(2)
    x, t, th = random_point(l96, rng)
    jx, jt = rk4_jacobian(l96, x, t, th, 1e-12)
    assert np.max(np.abs(jx - np.eye(4))) <= 1e-10
    H = rk4_hessian(l96, x, t, th, 1e-12)
    assert np.max(np.abs(H[:, 4:, 4:])) <= 1e-10


def test_zero_step_exact(fn):
    # StepConfig rejects h = 0, so call the stage recursion directly
    from odelaplace.flow import _rk4

    z = _rk4(fn, FN_X0, 0.0, FN_THETA, 0.0, 2)
    assert np.array_equal(z.value, FN_X0)
    assert np.array_equal(z.jac_x, np.eye(2))
    assert not np.any(z.jac_theta) and not np.any(z.hessians)


def test_step_config_validation():
    with pytest.raises(InputError):
        StepConfig(0.1, 0)
    with pytest.raises(InputError):
        StepConfig(0.1, 1.5)
    with pytest.raises(InputError):
        StepConfig(-0.1, 1)


def test_overflow_names_stage(lin):
    with pytest.raises(FlowOverflowError) as info:
        rk4_step(lin, [1e300], 0.0, [1e10], 1.0)
    assert "K" in str(info.value)


def test_m1_matches_single_step(fn):
    x, t, th, h = np.array([0.3, -0.4]), 1.0, FN_THETA, 0.1
    d = compose_flow(fn, x, t, th, StepConfig(h, 1))
    assert np.array_equal(d.value, rk4_step(fn, x, t, th, h))
    jx, jt = rk4_jacobian(fn, x, t, th, h)
    assert np.array_equal(d.jac_x, jx) and np.array_equal(d.jac_theta, jt)
    assert np.array_equal(d.hessians, rk4_hessian(fn, x, t, th, h))


def test_m2_linear_composition(lin):
    h, th, x = 0.4, -1.3, 1.7
    d = compose_flow(lin, [x], 0.0, [th], StepConfig(h, 2), order=0)
    assert abs(d.value[0] - _poly(th * h / 2) ** 2 * x) < 1e-14


def _fd_jac(fun, u, rel=1e-6):
    cols = []
    for a in range(u.size):
        e = np.zeros(u.size)
        e[a] = rel * max(1.0, abs(u[a]))
        cols.append((fun(u + e) - fun(u - e)) / (2 * e[a]))
    return np.stack(cols, axis=-1)


@pytest.mark.parametrize("name", MODELS)
@pytest.mark.parametrize("h", [0.1, 0.05])
@pytest.mark.parametrize("m", [1, 2, 4])
def test_compose_flow_vs_fd(name, h, m):
    model = _model(name)
    rng = np.random.default_rng(zlib.crc32(f"{name}-{h}-{m}".encode()))
    if name == "sir-tv":
        h *= 10
    x, t, th = random_point(model, rng)
    p = model.p
    u = np.concatenate([x, th])
    cfg = StepConfig(h, m)
    d = compose_flow(model, x, t, th, cfg)

    def value(v):
        return compose_flow(model, v[:p], t, v[p:], cfg, order=0).value

    def jac(v):
        return compose_flow(model, v[:p], t, v[p:], cfg, order=1).jac

    assert rel_err(_fd_jac(value, u), d.jac) <= 1e-5
    H_fd = _fd_jac(jac, u, rel=1e-5)
    assert rel_err(H_fd, d.hessians) <= 1e-5
    assert np.array_equal(d.hessians, np.swapaxes(d.hessians, 1, 2))


def test_convergence_order(fn):
    h = 0.5
    ref = solve_ivp(lambda t, x: eval_rhs(fn, x, t, FN_THETA), (0, h), FN_X0, method="DOP853", rtol=3e-14,
                    atol=1e-14).y[:, -1]
    ms = np.array([1, 2, 4, 8])
    err = [np.max(np.abs(compose_flow(fn, FN_X0, 0.0, FN_THETA, StepConfig(h, int(m)), 0).value - ref)) for m in ms]
    slope = -np.polyfit(np.log(ms), np.log(err), 1)[0]
    assert slope >= 3.5


def test_mixed_partials_order_independent(lin):
    # y = f(u) with u = g(x): both orders of differentiation after symmetrization
    x, th = 0.7, -0.4
    H = rk4_hessian(lin, [x], 0.0, [th], 0.2)[0]
    assert H[0, 1] == H[1, 0]


def test_batched_matches_loop(fn):
    rng = np.random.default_rng(4)
    X = rng.uniform(-1, 1, (5, 2))
    t = np.linspace(0, 1, 5)
    h = np.full(5, 0.1)
    d = compose_flow(fn, X, t, FN_THETA, StepConfig(h, 2))
    for i in range(5):
        di = compose_flow(fn, X[i], t[i], FN_THETA, StepConfig(0.1, 2))
        assert np.allclose(d.value[i], di.value, rtol=0, atol=1e-15)
        assert np.allclose(d.hessians[i], di.hessians, rtol=0, atol=1e-13)
