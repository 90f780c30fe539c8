import math
import warnings
from dataclasses import replace

import numpy as np
import pytest
from scipy.integrate import solve_ivp

from odelaplace.errors import ConditioningWarning, InputError, IntegrationError
from odelaplace.models import eval_rhs
from odelaplace.sensitivity import (
    _CompiledExtended,
    _Extended,
    extended_dimension,
    solve_first_order,
    solve_reference,
    solve_second_order,
)

from conftest import FN_THETA, FN_X0, L96_THETA, L96_X0, rel_err

E1 = math.exp(-1.0)


def test_linear_reference_closed_form(lin):
    x = solve_reference(lin, [1.0], [-1.0], [0.0, 1.0])
    assert abs(x[-1, 0] - E1) <= 1e-7
    assert abs(x[-1, 0] - 0.3678794) <= 1e-7


def test_constant_trajectory(lin):
    x = solve_reference(lin, [2.5], [0.0], np.linspace(0, 3, 7))
    assert np.all(x == 2.5)


def test_fn_reference_vs_adaptive(fn):
    x = solve_reference(fn, FN_X0, FN_THETA, np.linspace(0, 20, 201))
    sol = solve_ivp(lambda t, y: eval_rhs(fn, y, t, FN_THETA), (0, 20), FN_X0, method="DOP853", rtol=3e-14,
                    atol=1e-13)
    assert np.max(np.abs(x[-1] - sol.y[:, -1])) <= 1e-6


def test_refinement_stopping_rule(fn):
    grid = np.linspace(0, 20, 201)
    x, nsub, _ = solve_reference(fn, FN_X0, FN_THETA, grid, full_output=True)
    coarser = solve_reference(fn, FN_X0, FN_THETA, grid, nsub=nsub // 2)
    assert np.max(np.abs(x - coarser)) < 1e-9


def test_blow_up_reports_time(lin):
    with pytest.raises(IntegrationError) as info:
        solve_reference(lin, [1.0], [1e90], [0.0, 1.0, 2.0], nsub=1)
    assert info.value.time is not None


def test_batched_failure_mask(lin):
    x, nsub, failed = solve_reference(lin, [[1.0], [1.0]], [[-1.0], [1e90]], [0.0, 1.0, 2.0], nsub=1,
                                      full_output=True)
    assert failed.tolist() == [False, True]
    assert np.all(np.isnan(x[1]))


def test_batched_refinement_past_coarse_failures(fn):
    # unit spacing with c near 3 overflows at the coarsest levels
    grid = np.linspace(0, 20, 21)
    theta = np.array([[0.2, 0.2, c] for c in (2.7, 3.0, 3.4)])
    x0 = np.array([[-2.9, 0.3], [-1.0, -1.0], [-1.4, -0.5]])
    x, _, failed = solve_reference(replace(fn, kernel=None), x0, theta, grid, full_output=True)
    assert not failed.any()
    for k in range(3):
        assert np.max(np.abs(x[k] - solve_reference(fn, x0[k], theta[k], grid))) <= 1e-8


def test_grid_validation(lin):
    with pytest.raises(InputError):
        solve_reference(lin, [1.0], [-1.0], [0.0, 0.0, 1.0])


def test_linear_first_order(lin):
    b = solve_first_order(lin, [1.0], [-1.0], [0.0, 1.0])
    assert abs(b.jac_theta[-1, 0, 0] - E1) <= 1e-7
    assert abs(b.jac_x0[-1, 0, 0] - E1) <= 1e-7
    assert b.jac_theta[0, 0, 0] == 0 and b.jac_x0[0, 0, 0] == 1


def test_linear_second_order(lin):
    b = solve_second_order(lin, [1.0], [-1.0], [0.0, 1.0])
    H = b.hess[-1, 0]  # (theta, x0) order
    assert abs(H[0, 0] - E1) <= 1e-7
    assert abs(H[0, 1] - E1) <= 1e-7
    assert abs(H[1, 1]) <= 1e-7
    assert not np.any(b.hess[0])


def test_initial_conditions(fn):
    b = solve_second_order(fn, FN_X0, FN_THETA, [0.0, 0.5, 1.0])
    assert not np.any(b.jac_theta[0])
    assert np.array_equal(b.jac_x0[0], np.eye(2))
    assert not np.any(b.hess[0])
    assert np.array_equal(b.hess, np.swapaxes(b.hess, -1, -2))


def test_dimensions():
    assert extended_dimension(4, 12) == 4 + 64 + 544 == 612
    assert extended_dimension(2, 3, order=1) == 2 + 10


def test_l96_bundle_dimension(l96):
    b = solve_second_order(l96, L96_X0, L96_THETA, [0.0, 0.05], nsub=4)
    assert b.dimension == 612


def test_compiled_matches_numpy(fn):
    y0 = _Extended(fn, FN_THETA, 2).initial(FN_X0)
    grid = np.linspace(0, 2, 21)
    a = _CompiledExtended(fn, FN_THETA, 2).integrate(y0, grid, 8)
    from odelaplace.sensitivity import _integrate_extended

    b = _integrate_extended(_Extended(fn, FN_THETA, 2), y0, grid, 8)
    assert np.max(np.abs(a - b)) <= 1e-12 * max(1.0, np.abs(b).max())


def test_magnitude_cap_warning(fn):
    with pytest.warns(ConditioningWarning):
        b = solve_second_order(fn, FN_X0, FN_THETA, np.linspace(0, 5, 11), nsub=16, magnitude_cap=1e-3)
    assert b.warnings


def _fd_first(model, x0, theta, grid, nsub, rel=1e-5):
    u = np.concatenate([theta, x0])
    q = theta.size
    cols = []
    for k in range(u.size):
        e = np.zeros(u.size)
        e[k] = rel * max(1.0, abs(u[k]))
        up = solve_reference(model, (u + e)[q:], (u + e)[:q], grid, nsub=nsub)
        dn = solve_reference(model, (u - e)[q:], (u - e)[:q], grid, nsub=nsub)
        cols.append((up - dn) / (2 * e[k]))
    return np.stack(cols, axis=-1)


def _fd_second(model, x0, theta, grid, nsub, rel=1e-5):
    u = np.concatenate([theta, x0])
    q = theta.size
    cols = []
    for k in range(u.size):
        e = np.zeros(u.size)
        e[k] = rel * max(1.0, abs(u[k]))
        up = solve_first_order(model, (u + e)[q:], (u + e)[:q], grid, nsub=nsub).jac
        dn = solve_first_order(model, (u - e)[q:], (u - e)[:q], grid, nsub=nsub).jac
        cols.append((up - dn) / (2 * e[k]))
    return np.stack(cols, axis=-1)


@pytest.mark.parametrize(
    "case", [("fn", FN_X0, FN_THETA, np.linspace(0, 20, 201)), ("l96", L96_X0, L96_THETA, np.linspace(0, 5, 51))]
)
def test_sensitivities_vs_fd(case, request):
    name, x0, theta, grid = case
    model = request.getfixturevalue(name)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConditioningWarning)
        b = solve_second_order(model, x0, theta, grid)
    assert rel_err(_fd_first(model, x0, theta, grid, b.nsub), b.jac) <= 1e-4
    assert rel_err(_fd_second(model, x0, theta, grid, b.nsub), b.hess) <= 1e-3
