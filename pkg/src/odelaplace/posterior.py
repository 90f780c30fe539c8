"""Negative log posteriors with their derivatives.

Two targets share one prior: ``lambda ~ Gamma(A0, B0)`` and independent
uniforms on every ``theta_k`` and ``x0_j``.  The relaxed target treats the
latent states ``X`` as unknowns tied together by the RK4 map with transition
variance ``tau``; the original target integrates the ODE exactly.

Coordinates are always ordered ``(lambda, theta_1..theta_q, x_0, x_1, ..., x_n)``
with each state vector laid out in turn.  Additive constants are dropped.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError, InputError
from .flow import StepConfig, compose_flow
from .laplace import SymmetricMatrix
from .sensitivity import DEFAULT_TOL, solve_reference, solve_second_order

__all__ = [
    "Prior",
    "Dataset",
    "RelaxedParams",
    "OriginalParams",
    "relaxed_labels",
    "original_labels",
    "relaxed_nll",
    "relaxed_gradient",
    "relaxed_hessian",
    "lambda_conditional_mode",
    "original_nll",
    "original_hessian",
]


def _bounds(b, size, what):
    b = np.asarray(b, dtype=float)
    if b.shape != (size, 2):
        raise InputError(f"{what} must have shape ({size}, 2), got {b.shape}")
    if not np.all(b[:, 0] < b[:, 1]):
        k = int(np.argmax(~(b[:, 0] < b[:, 1])))
        raise InputError(f"{what}[{k}]: lower bound must be below upper bound")
    return b


@dataclass(frozen=True)
class Prior:
    A0: float
    B0: float
    theta_bounds: np.ndarray
    x0_bounds: np.ndarray

    def __post_init__(self):
        if not (self.A0 > 0 and self.B0 > 0):
            raise InputError("Gamma prior needs A0 > 0 and B0 > 0")
        object.__setattr__(self, "theta_bounds", _bounds(self.theta_bounds, len(self.theta_bounds), "theta_bounds"))
        object.__setattr__(self, "x0_bounds", _bounds(self.x0_bounds, len(self.x0_bounds), "x0_bounds"))

    @property
    def q(self):
        return len(self.theta_bounds)

    @property
    def p(self):
        return len(self.x0_bounds)

    def shape_term(self, p, n):
        """``p(n+1)/2 + A0 - 1``, the coefficient of ``-log lambda``."""
        return p * (n + 1) / 2 + self.A0 - 1

    def check(self, lam, theta, x0):
        """Raise ``DomainError`` naming the first coordinate outside the support."""
        if not lam > 0:
            raise DomainError(f"lambda must be positive, got {lam}")
        theta = np.asarray(theta, dtype=float)
        x0 = np.asarray(x0, dtype=float)
        if theta.shape != (self.q,) or x0.shape != (self.p,):
            raise InputError(f"prior expects {self.q} parameters and {self.p} initial states")
        for name, v, b in (("theta", theta, self.theta_bounds), ("x0", x0, self.x0_bounds)):
            out = np.flatnonzero(~((v >= b[:, 0]) & (v <= b[:, 1])))
            if out.size:
                k = int(out[0])
                raise DomainError(f"{name}[{k}] = {v[k]:g} outside [{b[k, 0]:g}, {b[k, 1]:g}]")

    def contains(self, lam, theta, x0):
        try:
            self.check(lam, theta, x0)
        except DomainError:
            return False
        return True

    def lower(self):
        return np.concatenate([[0.0], self.theta_bounds[:, 0], self.x0_bounds[:, 0]])

    def upper(self):
        return np.concatenate([[np.inf], self.theta_bounds[:, 1], self.x0_bounds[:, 1]])


@dataclass(frozen=True)
class Dataset:
    times: np.ndarray
    Y: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        Y = np.asarray(self.Y, dtype=float)
        if Y.ndim == 1:
            Y = Y[:, None]
        if t.ndim != 1 or t.size < 2 or Y.shape[0] != t.size:
            raise InputError(f"need at least two times and one observation row per time; got {t.shape}, {Y.shape}")
        if not np.all(np.diff(t) > 0):
            raise InputError("observation times must be strictly increasing")
        if not np.all(np.isfinite(t)) or not np.all(np.isfinite(Y)):
            raise InputError("dataset contains non-finite values")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "Y", Y)

    @property
    def n(self):
        return self.times.size - 1

    @property
    def p(self):
        return self.Y.shape[1]

    def subsample(self, every):
        return Dataset(self.times[::every], self.Y[::every])


@dataclass
class RelaxedParams:
    lam: float
    theta: np.ndarray
    X: np.ndarray

    def pack(self):
        return np.concatenate([[self.lam], np.ravel(self.theta), np.ravel(self.X)])

    @classmethod
    def unpack(cls, vec, q, p):
        vec = np.asarray(vec, dtype=float)
        return cls(float(vec[0]), vec[1 : 1 + q].copy(), vec[1 + q :].reshape(-1, p).copy())


@dataclass
class OriginalParams:
    lam: float
    theta: np.ndarray
    x0: np.ndarray

    def pack(self):
        return np.concatenate([[self.lam], np.ravel(self.theta), np.ravel(self.x0)])

    @classmethod
    def unpack(cls, vec, q, p):
        vec = np.asarray(vec, dtype=float)
        return cls(float(vec[0]), vec[1 : 1 + q].copy(), vec[1 + q : 1 + q + p].copy())


def original_labels(model):
    return ["lambda", *model.param_names, *(f"x0_{s}" for s in model.state_names)]


def relaxed_labels(model, n):
    states = [f"x{i}_{s}" for i in range(n + 1) for s in model.state_names]
    return ["lambda", *model.param_names, *states]


def _check_relaxed(model, params, data, prior, tau):
    X = np.asarray(params.X, dtype=float)
    if X.shape != data.Y.shape or X.shape[1] != model.p:
        raise InputError(f"latent states have shape {X.shape}, data {data.Y.shape}, model p={model.p}")
    if not tau > 0:
        raise InputError("tau must be positive")
    prior.check(params.lam, params.theta, X[0])
    return X, np.asarray(params.theta, dtype=float)


def _flow(model, X, theta, data, m, order):
    cfg = StepConfig(np.diff(data.times), m)
    return compose_flow(model, X[:-1], data.times[:-1], theta, cfg, order=order)


def relaxed_nll(model, params, data, tau, prior, m=1):
    X, theta = _check_relaxed(model, params, data, prior, tau)
    g = _flow(model, X, theta, data, m, 0).value
    a = prior.shape_term(model.p, data.n)
    lam = params.lam
    return float(
        -a * np.log(lam)
        + prior.B0 * lam
        + np.sum((X[1:] - g) ** 2) / (2 * tau)
        + lam / 2 * np.sum((data.Y - X) ** 2)
    )


def relaxed_gradient(model, params, data, tau, prior, m=1):
    X, theta = _check_relaxed(model, params, data, prior, tau)
    d = _flow(model, X, theta, data, m, 1)
    r = X[1:] - d.value
    a = prior.shape_term(model.p, data.n)
    lam = params.lam
    resid = X - data.Y
    g_lam = -a / lam + prior.B0 + 0.5 * np.sum(resid**2)
    g_theta = -np.einsum("ijk,ij->k", d.jac_theta, r) / tau
    g_X = lam * resid
    g_X[1:] += r / tau
    g_X[:-1] -= np.einsum("ijk,ij->ik", d.jac_x, r) / tau
    return np.concatenate([[g_lam], g_theta, g_X.ravel()])


def relaxed_hessian(model, params, data, tau, prior, m=1):
    """Dense Hessian of ``relaxed_nll`` of size ``1 + q + (n+1)p``."""
    X, theta = _check_relaxed(model, params, data, prior, tau)
    d = _flow(model, X, theta, data, m, 2)
    p, q, n = model.p, model.q, data.n
    r = X[1:] - d.value
    J = d.jac
    lam = params.lam
    dim = 1 + q + (n + 1) * p
    H = np.zeros((dim, dim))
    th = np.arange(1, 1 + q)

    def xs(i):
        return np.arange(1 + q + i * p, 1 + q + (i + 1) * p)

    # transition terms: curvature of the RK4 map plus Gauss-Newton part
    curv = (np.einsum("ija,ijb->iab", J, J) - np.einsum("ij,ijab->iab", r, d.hessians)) / tau
    eye = np.eye(p)
    for i in range(n):
        u = np.concatenate([xs(i), th])
        H[np.ix_(u, u)] += curv[i]
        nxt = xs(i + 1)
        H[np.ix_(nxt, u)] -= J[i] / tau
        H[np.ix_(u, nxt)] -= J[i].T / tau
        H[np.ix_(nxt, nxt)] += eye / tau
    # observation and precision terms
    H[0, 0] = prior.shape_term(p, n) / lam**2
    resid = (X - data.Y).ravel()
    H[0, 1 + q :] = resid
    H[1 + q :, 0] = resid
    diag = np.arange(1 + q, dim)
    H[diag, diag] += lam
    return SymmetricMatrix(H)


def lambda_conditional_mode(p, n, X, Y, prior):
    """Maximizer in ``lambda`` of either posterior with everything else held fixed."""
    ss = np.sum((np.asarray(Y, dtype=float) - np.asarray(X, dtype=float)) ** 2)
    return prior.shape_term(p, n) / (prior.B0 + 0.5 * ss)


def _check_original(model, params, data, prior):
    if data.p != model.p:
        raise InputError(f"data has {data.p} state columns, model {model.name} has {model.p}")
    prior.check(params.lam, params.theta, params.x0)
    return np.asarray(params.theta, dtype=float), np.asarray(params.x0, dtype=float)


def original_nll(model, params, data, prior, tol=DEFAULT_TOL, nsub=None):
    """Negative log posterior of the ODE model; ``nsub`` pins the substep count."""
    theta, x0 = _check_original(model, params, data, prior)
    states = solve_reference(model, x0, theta, data.times, tol=tol, nsub=nsub)
    a = prior.shape_term(model.p, data.n)
    lam = params.lam
    return float(-a * np.log(lam) + prior.B0 * lam + lam / 2 * np.sum((data.Y - states) ** 2))


def original_hessian(model, params, data, prior, tol=DEFAULT_TOL, nsub=None, magnitude_cap=1e12, full_output=False):
    """Hessian of ``original_nll`` over ``(lambda, theta, x0)``.

    Conditioning warnings from the sensitivity solve propagate as Python
    warnings and are also kept on the bundle returned with ``full_output``.
    """
    theta, x0 = _check_original(model, params, data, prior)
    b = solve_second_order(model, x0, theta, data.times, tol=tol, nsub=nsub, magnitude_cap=magnitude_cap)
    e = data.Y - b.states
    S = b.jac
    lam = params.lam
    k = model.q + model.p
    H = np.empty((1 + k, 1 + k))
    H[0, 0] = prior.shape_term(model.p, data.n) / lam**2
    cross = -np.einsum("ija,ij->a", S, e)
    H[0, 1:] = cross
    H[1:, 0] = cross
    H[1:, 1:] = lam * (np.einsum("ija,ijb->ab", S, S) - np.einsum("ij,ijab->ab", e, b.hess))
    out = SymmetricMatrix(H)
    return (out, b) if full_output else out
