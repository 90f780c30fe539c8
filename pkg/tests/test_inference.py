import json
from dataclasses import replace

import numpy as np
import pytest
from scipy.optimize import brentq

from odelaplace.config import preset
from odelaplace.errors import InputError, MixingError, StalledOptimizationError
from odelaplace.flow import StepConfig, compose_flow
from odelaplace.inference import (
    Chain,
    FitSettings,
    McmcSettings,
    ModeEstimate,
    adaptive_metropolis,
    compare_reports,
    fit_map,
    frobenius_distance,
    load_mode,
    run_mcmc,
    sample_covariance,
    save_mode,
)
from odelaplace.laplace import CovarianceReport
from odelaplace.pipeline import fit, laplace, simulate
from odelaplace.posterior import Dataset, Prior, RelaxedParams, lambda_conditional_mode, relaxed_gradient, relaxed_nll
from odelaplace.sensitivity import solve_reference

from conftest import FN_THETA, FN_X0

SIGMA = np.array([[1.0, 0.6, 0.0], [0.6, 2.0, -0.5], [0.0, -0.5, 0.5]])
MU = np.array([1.0, -2.0, 0.5])
P_INV = np.linalg.inv(SIGMA)


def gauss(x):
    r = x - MU
    return -0.5 * r @ P_INV @ r


def test_lambda_closed_form_example():
    # p=1, n=0, A0=1.5, B0=1 and a residual sum of squares of 2
    prior = Prior(1.5, 1.0, [[0, 1]], [[-5, 5]])
    X = np.zeros((1, 1))
    Y = np.full((1, 1), np.sqrt(2.0))
    assert lambda_conditional_mode(1, 0, X, Y, prior) == pytest.approx(0.5, rel=1e-15)


def _stationary_dlam(f, lam):
    # Richardson-extrapolated central difference, accurate far beyond sqrt(eps)
    def D(s):
        return (f(lam + s) - f(lam - s)) / (2 * s)

    h = 0.01 * lam
    d1, d2, d3 = D(h), D(h / 2), D(h / 4)
    r1, r2 = (4 * d2 - d1) / 3, (4 * d3 - d2) / 3
    return (16 * r2 - r1) / 15


def test_lambda_matches_numerical_minimum(fn, fn_prior):
    rng = np.random.default_rng(0)
    for _ in range(20):
        n = int(rng.integers(20, 41))
        t = np.linspace(0, 10, n + 1)
        th = FN_THETA + rng.uniform(-0.1, 0.1, 3)
        x0 = FN_X0 + rng.uniform(-0.5, 0.5, 2)
        X = solve_reference(fn, x0, th, t) + rng.normal(0, 0.05, (n + 1, 2))
        X[0] = x0
        Y = X + rng.normal(0, rng.uniform(0.1, 1), (n + 1, 2))
        data = Dataset(t, Y)

        def f(lam):
            return relaxed_nll(fn, RelaxedParams(lam, th, X), data, 1.0, fn_prior)

        star = lambda_conditional_mode(2, n, X, Y, fn_prior)
        root = brentq(lambda lam: _stationary_dlam(f, lam), star / 3, 3 * star, xtol=1e-15, rtol=1e-14)
        assert abs(root - star) <= 1e-8 * star


def _recursion_data(model, theta, x0, n, T, m):
    t = np.linspace(0, T, n + 1)
    X = np.empty((n + 1, model.p))
    X[0] = x0
    for i in range(n):
        X[i + 1] = compose_flow(model, X[i], t[i], theta, StepConfig(t[1] - t[0], m), order=0).value
    return Dataset(t, X)


def test_fit_noiseless_at_truth(fn, fn_prior):
    data = _recursion_data(fn, FN_THETA, FN_X0, 40, 20.0, 2)
    init = ModeEstimate(1.0, FN_THETA.copy(), data.Y.copy())
    mode = fit_map(data, fn, 1e-4, 2, fn_prior, init=init)
    assert mode.meta["sweeps"] <= 2
    assert np.max(np.abs(mode.theta - FN_THETA)) <= 1e-8
    assert mode.provenance == "optimized"


def test_fit_descends_and_converges(fn, fn_small_data, fn_prior):
    data, _ = fn_small_data
    mode = fit_map(data, fn, 1e-2, 2, fn_prior)
    obj = [h["objective"] for h in mode.meta["history"]]
    assert all(b <= a for a, b in zip(obj, obj[1:]))
    assert mode.meta["grad_sup"] <= 1e-6
    assert fn_prior.contains(mode.lam, mode.theta, mode.x0)


def test_fit_stalls_with_diagnostics(fn, fn_small_data, fn_prior):
    data, _ = fn_small_data
    with pytest.raises(StalledOptimizationError) as info:
        fit_map(data, fn, 1e-2, 2, fn_prior, settings=FitSettings(max_sweeps=1))
    assert info.value.diagnostics["history"]


def test_fit_fn_preset_mode():
    config = preset("fn-s3.1")
    data, _ = simulate(config)
    mode = fit(config, data)
    prior = config.build_prior()
    g = relaxed_gradient(config.build_model(), RelaxedParams(mode.lam, mode.theta, mode.X), data, config.tau, prior,
                         config.m)
    assert np.max(np.abs(g)) <= config.fit.tol
    assert np.all((mode.theta >= prior.theta_bounds[:, 0]) & (mode.theta <= prior.theta_bounds[:, 1]))
    # truth should be a plausible draw from the Laplace posterior around the mode
    report = laplace(config, data, mode, "relaxed", "schur", False)
    sd = np.sqrt(report.variances[1:4])
    assert np.max(np.abs(mode.theta - FN_THETA) / sd) <= 4.0


def test_mode_round_trip(tmp_path, fn_prior):
    rng = np.random.default_rng(2)
    mode = ModeEstimate(2.5, np.array([0.1, 0.3, 2.9]), rng.uniform(-1, 1, (5, 2)), "optimized",
                        {"model": "fitzhugh-nagumo", "tau": 1e-5, "m": 1, "seed": 3})
    path = tmp_path / "mode.json"
    save_mode(path, mode)
    back = load_mode(path, fn_prior)
    assert back.lam == mode.lam
    assert np.array_equal(back.theta, mode.theta) and np.array_equal(back.X, mode.X)
    assert back.provenance == "loaded" and back.meta["seed"] == 3


def test_mode_rejections(tmp_path, fn_prior):
    path = tmp_path / "mode.json"
    path.write_text(json.dumps({"lambda": 1.0, "theta": [0.2, 0.2, 9.0], "X": [[0, 0], [0, 0]]}))
    with pytest.raises(InputError, match=r"theta\[2\]"):
        load_mode(path, fn_prior)
    path.write_text('{"lambda": 1.0, "theta": [0.2, 0.2')
    with pytest.raises(InputError):
        load_mode(path)
    path.write_text(json.dumps({"lambda": 1.0, "theta": [0.2]}))
    with pytest.raises(InputError, match="X"):
        load_mode(path)
    with pytest.raises(InputError):
        load_mode(tmp_path / "absent.json")


def _batch_se(draws, batches=50):
    b = draws[: len(draws) // batches * batches].reshape(batches, -1, draws.shape[1]).mean(axis=1)
    return b.std(axis=0, ddof=1) / np.sqrt(batches)


@pytest.mark.parametrize("stages", [1, 2])
def test_gaussian_target(stages):
    s = McmcSettings(iterations=55_000, burn_in=5_000, thin=1, dr_stages=stages, seed=stages)
    draws, _, diag = adaptive_metropolis(gauss, MU + 1.0, s)
    assert len(draws) == 50_000
    cov = np.cov(draws.T)
    assert np.linalg.norm(cov - SIGMA) <= 0.1 * np.linalg.norm(SIGMA)
    assert np.all(np.abs(draws.mean(axis=0) - MU) <= 3 * _batch_se(draws))
    assert 0.1 <= diag["first_stage_rate"] <= 0.6
    if stages == 1:
        assert 0.1 <= diag["acceptance_rate"] <= 0.6


def test_determinism_and_bounds():
    lower, upper = np.array([0.0, -1.0]), np.array([1.0, 1.0])
    seen = []

    def flat(x):
        seen.append(x.copy())
        return 0.0

    s = McmcSettings(iterations=3000, burn_in=1000, thin=2, seed=4)
    a, _, _ = adaptive_metropolis(flat, [0.5, 0.0], s, lower, upper)
    b, _, _ = adaptive_metropolis(flat, [0.5, 0.0], s, lower, upper)
    assert np.array_equal(a, b)
    assert np.all((a >= lower) & (a <= upper))
    seen = np.array(seen)
    assert np.all((seen >= lower) & (seen <= upper))


def test_mixing_error():
    s = McmcSettings(iterations=2000, burn_in=500, thin=1, adapt_start=10**9, seed=0)
    with pytest.raises(MixingError) as info:
        adaptive_metropolis(lambda x: -1e12 * x @ x, np.zeros(2), s, proposal_cov=100 * np.eye(2))
    assert "acceptance_trace" in info.value.diagnostics


@pytest.mark.parametrize("it,burn,thin,chains", [(35_000, 5_000, 30, 1), (20_000, 4_000, 64, 4)])
def test_thinning_arithmetic(fn, fn_prior, fn_small_data, it, burn, thin, chains):
    data, _ = fn_small_data
    s = McmcSettings(iterations=it, burn_in=burn, thin=thin, chains=chains, seed=1)
    start = np.array([4.0, *FN_THETA, *FN_X0])

    def target(v):
        return -0.5 * np.sum(((v - start) / 0.05) ** 2)

    chain = run_mcmc(data, fn, fn_prior, start, s, log_target=target)
    assert chain.samples.shape == (1000, 6)
    assert chain.labels[0] == "lambda"
    assert len(chain.diagnostics["chains"]) == chains
    again = run_mcmc(data, fn, fn_prior, start, s, log_target=target)
    assert np.array_equal(chain.samples, again.samples)


def _chain(samples):
    samples = np.asarray(samples, float)
    return Chain(samples, 0, {}, [f"c{k}" for k in range(samples.shape[1])])


def test_sample_covariance_examples():
    rep = sample_covariance(_chain([[0, 0], [2, 2]]))
    assert np.array_equal(rep.covariance.array, [[2, 2], [2, 2]])
    assert rep.method == "mcmc-oracle"
    const = sample_covariance(_chain(np.ones((10, 2))))
    assert not np.any(const.covariance.array)
    assert "degenerate-coordinate" in const.flags
    rng = np.random.default_rng(0)
    S = rng.standard_normal((200, 3))
    a = sample_covariance(_chain(S)).covariance.array
    b = sample_covariance(_chain(S[rng.permutation(200)])).covariance.array
    assert np.allclose(a, b, rtol=1e-13, atol=1e-15)


def test_frobenius_examples():
    assert frobenius_distance(np.eye(2), np.eye(2)) == 0
    assert frobenius_distance(np.eye(2), np.zeros((2, 2))) == np.sqrt(2)
    assert frobenius_distance(np.eye(2), [[0, 1], [1, 0]]) == 2
    with pytest.raises(InputError):
        frobenius_distance(np.eye(2), np.eye(3))


def _report(cov, method="laplace-relaxed"):
    return CovarianceReport.build(method, ["a", "b"], np.asarray(cov, float))


def test_compare_reports():
    small, big = _report(np.eye(2)), _report(4 * np.eye(2), "mcmc-oracle")
    cmp = compare_reports([small, big])
    assert np.array_equal(cmp.relative_variance[0], [0.25, 0.25])
    assert np.array_equal(cmp.relative_variance[1], [1.0, 1.0])
    self_cmp = compare_reports([small, small])
    assert not np.any(self_cmp.covariance_distance) and np.all(self_cmp.relative_variance == 1)
    bad = _report([[1.0, 3.0], [3.0, 1.0]], "laplace-original")
    cmp = compare_reports([small, big, bad])
    assert cmp.valid == [True, True, False]
    assert np.isnan(cmp.relative_variance[2]).all() and np.isnan(cmp.correlation_distance[2]).all()
    assert cmp.covariance_distance[0, 1] == frobenius_distance(np.eye(2), 4 * np.eye(2))
    with pytest.raises(InputError):
        compare_reports([small, CovarianceReport.build("mcmc-oracle", ["x", "y"], np.eye(2))])


def test_settings_validation():
    with pytest.raises(InputError):
        McmcSettings(iterations=100, burn_in=100)
    with pytest.raises(InputError):
        McmcSettings(dr_stages=3)
    assert McmcSettings().draws_per_chain == 1000
    assert replace(McmcSettings(), thin=80, iterations=25_000).draws_per_chain == 250
    l96 = preset("lorenz96-s3.2").mcmc
    assert l96.draws_per_chain * l96.chains == 1000
    with pytest.raises(InputError):
        McmcSettings(solver_tol=0.0)
