"""Mode finding, the adaptive Metropolis oracle and covariance comparison."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import linalg

from .errors import (
    DomainError,
    InputError,
    IntegrationError,
    MixingError,
    NumericalError,
    StalledOptimizationError,
)
from .laplace import CovarianceReport, SymmetricMatrix
from .posterior import (
    OriginalParams,
    RelaxedParams,
    lambda_conditional_mode,
    original_labels,
    original_nll,
    relaxed_gradient,
    relaxed_hessian,
    relaxed_nll,
)
from .sensitivity import DEFAULT_TOL, choose_substeps

__all__ = [
    "ModeEstimate",
    "FitSettings",
    "McmcSettings",
    "Chain",
    "fit_map",
    "save_mode",
    "load_mode",
    "adaptive_metropolis",
    "run_mcmc",
    "sample_covariance",
    "frobenius_distance",
    "Comparison",
    "compare_reports",
]


@dataclass
class ModeEstimate:
    lam: float
    theta: np.ndarray
    X: np.ndarray
    provenance: str = "optimized"
    meta: dict = field(default_factory=dict)

    @property
    def x0(self):
        return self.X[0]

    def relaxed(self):
        return RelaxedParams(self.lam, self.theta, self.X)

    def original(self):
        return OriginalParams(self.lam, self.theta, self.X[0])

    def original_vector(self):
        return np.concatenate([[self.lam], self.theta, self.X[0]])


@dataclass(frozen=True)
class FitSettings:
    tol: float = 1e-6
    max_sweeps: int = 200
    # relaxation variances tried before the target one, largest first
    tau_schedule: tuple = ()
    max_backtracks: int = 40
    armijo: float = 1e-4


@dataclass(frozen=True)
class McmcSettings:
    iterations: int = 35000
    burn_in: int = 5000
    thin: int = 30
    dr_stages: int = 2
    adapt_start: int = 1000
    adapt_interval: int = 100
    dr_scale: float = 0.5
    regularization: float = 1e-8
    min_acceptance: float = 0.005
    chains: int = 1
    seed: int = 0
    # refinement tolerance for the sampler's ODE solves; None uses the experiment's
    solver_tol: float | None = None

    def __post_init__(self):
        if not 0 <= self.burn_in < self.iterations:
            raise InputError("burn_in must be non-negative and below iterations")
        if self.thin < 1 or self.adapt_interval < 1 or self.chains < 1:
            raise InputError("thin, adapt_interval and chains must be at least 1")
        if self.dr_stages not in (1, 2):
            raise InputError("dr_stages must be 1 or 2")
        if self.solver_tol is not None and not self.solver_tol > 0:
            raise InputError("solver_tol must be positive")

    @property
    def draws_per_chain(self):
        return (self.iterations - self.burn_in) // self.thin


@dataclass
class Chain:
    samples: np.ndarray
    accepted: int
    config: dict
    labels: list = field(default_factory=list)
    acceptance_rate: float = float("nan")
    diagnostics: dict = field(default_factory=dict)


# --- MAP ------------------------------------------------------------------


def _projected_grad(g, z, lo, hi):
    """Zero the components that point out of an active bound."""
    g = g.copy()
    g[(z <= lo) & (g > 0)] = 0.0
    g[(z >= hi) & (g < 0)] = 0.0
    return g


def _newton_direction(H, g):
    """Solve ``(H + mu I) d = -g`` with the smallest ``mu`` that keeps it PD."""
    n = len(g)
    mu = 0.0
    scale = max(np.max(np.abs(np.diag(H))), 1.0)
    for _ in range(60):
        try:
            c = linalg.cho_factor(H + mu * np.eye(n), lower=True, check_finite=False)
            return linalg.cho_solve(c, -g, check_finite=False)
        except linalg.LinAlgError:
            mu = max(10 * mu, 1e-10 * scale)
    return -g / scale


def fit_map(data, model, tau, m, prior, init=None, settings=None):
    """Posterior mode of the relaxed model.

    Each sweep sets ``lambda`` to its conditional mode, then takes one damped
    Newton step in all coordinates with a projected backtracking line search.
    With a ``tau_schedule`` the mode is tracked from larger relaxation
    variances down to ``tau``.
    """
    settings = settings or FitSettings()
    p, q, n = model.p, model.q, data.n
    if data.p != p:
        raise InputError(f"data has {data.p} columns, model {model.name} has p={p}")
    if init is None:
        theta = prior.theta_bounds.mean(axis=1)
        X = data.Y.copy()
        lam = None
    else:
        theta = np.asarray(init.theta, dtype=float).copy()
        X = np.asarray(init.X, dtype=float).copy()
        lam = init.lam
    X[0] = np.clip(X[0], prior.x0_bounds[:, 0], prior.x0_bounds[:, 1])
    if lam is None or not lam > 0:
        lam = lambda_conditional_mode(p, n, X, data.Y, prior)
    prior.check(lam, theta, X[0])

    z = RelaxedParams(lam, theta, X).pack()
    lo = np.full(z.size, -np.inf)
    hi = np.full(z.size, np.inf)
    lo[0] = np.finfo(float).tiny
    lo[1 : 1 + q], hi[1 : 1 + q] = prior.theta_bounds.T
    lo[1 + q : 1 + q + p], hi[1 + q : 1 + q + p] = prior.x0_bounds.T

    def unpack(v):
        return RelaxedParams.unpack(v, q, p)

    history = []
    taus = [t for t in settings.tau_schedule if t > tau] + [tau]
    sweeps = 0
    for stage_tau in taus:
        final = stage_tau == tau
        stage_tol = settings.tol if final else max(settings.tol, 1e-3)

        def f(v):
            return relaxed_nll(model, unpack(v), data, stage_tau, prior, m)

        for _ in range(settings.max_sweeps):
            sweeps += 1
            z[0] = lambda_conditional_mode(p, n, z[1 + q :].reshape(-1, p), data.Y, prior)
            f0 = f(z)
            g = relaxed_gradient(model, unpack(z), data, stage_tau, prior, m)
            gnorm = float(np.max(np.abs(_projected_grad(g, z, lo, hi))))
            history.append({"tau": stage_tau, "objective": f0, "grad_sup": gnorm})
            if gnorm <= stage_tol:
                break
            H = relaxed_hessian(model, unpack(z), data, stage_tau, prior, m).array
            # coordinates held at a bound by the gradient stay put; Newton on the rest
            free = ~(((z <= lo) & (g > 0)) | ((z >= hi) & (g < 0)))
            d = np.zeros_like(g)
            d[free] = _newton_direction(H[np.ix_(free, free)], g[free])
            g = np.where(free, g, 0.0)
            z_new = None
            if abs(g @ d) <= 1e3 * np.finfo(float).eps * max(1.0, abs(f0)):
                # the predicted decrease is below the rounding level of the objective,
                # so judge the full step by the gradient instead
                trial = np.clip(z + d, lo, hi)
                g_t = relaxed_gradient(model, unpack(trial), data, stage_tau, prior, m)
                if np.max(np.abs(_projected_grad(g_t, trial, lo, hi))) < gnorm:
                    z_new = trial
            if z_new is None:
                z_new, _ = _line_search(f, z, f0, g, d, lo, hi, settings)
            if z_new is None:
                # Newton direction failed; fall back to steepest descent
                z_new, _ = _line_search(f, z, f0, g, -g / max(np.abs(np.diag(H)).max(), 1.0), lo, hi, settings)
            if z_new is None:
                raise StalledOptimizationError(
                    f"no decrease from objective {f0:.12g} (gradient sup norm {gnorm:.3g})",
                    diagnostics={"history": history, "tau": stage_tau, "theta": unpack(z).theta.tolist()},
                )
            z = z_new
        else:
            if final:
                raise StalledOptimizationError(
                    f"gradient sup norm {gnorm:.3g} above {stage_tol:g} after {settings.max_sweeps} sweeps",
                    diagnostics={"history": history, "tau": stage_tau, "theta": unpack(z).theta.tolist()},
                )
    est = unpack(z)
    return ModeEstimate(
        est.lam,
        est.theta,
        est.X,
        "optimized",
        {"model": model.name, "tau": tau, "m": m, "sweeps": sweeps, "grad_sup": gnorm,
         "tol": settings.tol, "objective": history[-1]["objective"], "history": history},
    )


def _line_search(f, z, f0, g, d, lo, hi, settings):
    alpha = 1.0
    for _ in range(settings.max_backtracks):
        trial = np.clip(z + alpha * d, lo, hi)
        try:
            ft = f(trial)
        except (DomainError, NumericalError):
            ft = np.inf
        step = trial - z
        if np.isfinite(ft) and ft <= f0 + settings.armijo * float(g @ step) and np.any(step):
            return trial, ft
        alpha *= 0.5
    # near the optimum the Armijo decrease drops below rounding; accept plain descent
    trial = np.clip(z + d, lo, hi)
    try:
        ft = f(trial)
    except (DomainError, NumericalError):
        return None, None
    if ft <= f0 and np.any(trial != z):
        return trial, ft
    return None, None


def save_mode(path, mode, config_hash=None):
    meta = dict(mode.meta)
    if config_hash is not None:
        meta["config_hash"] = config_hash
    doc = {"lambda": float(mode.lam), "theta": np.asarray(mode.theta).tolist(),
           "X": np.asarray(mode.X).tolist(), "meta": meta}
    Path(path).write_text(json.dumps(doc, indent=1, default=_json_default))


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialize {type(o).__name__}")


def load_mode(path, prior=None):
    """Read and validate a mode file; ``prior`` adds a bounds check."""
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise InputError(f"mode file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise InputError(f"mode file {path} is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise InputError("mode file must hold a JSON object")
    missing = [k for k in ("lambda", "theta", "X") if k not in doc]
    if missing:
        raise InputError(f"mode file lacks {', '.join(missing)}")
    try:
        lam = float(doc["lambda"])
        theta = np.array(doc["theta"], dtype=float)
        X = np.array(doc["X"], dtype=float)
    except (TypeError, ValueError) as exc:
        raise InputError(f"mode file has non-numeric or ragged entries: {exc}") from None
    if theta.ndim != 1 or X.ndim != 2 or X.shape[0] < 2:
        raise InputError("theta must be a vector and X a matrix with at least two rows")
    if not (np.isfinite(lam) and np.all(np.isfinite(theta)) and np.all(np.isfinite(X))):
        raise InputError("mode file contains non-finite values")
    if prior is not None:
        try:
            prior.check(lam, theta, X[0])
        except DomainError as exc:
            raise InputError(f"mode outside prior support: {exc}") from None
    elif not lam > 0:
        raise InputError("lambda must be positive")
    meta = doc.get("meta") or {}
    return ModeEstimate(lam, theta, X, "loaded", dict(meta))


# --- MCMC -----------------------------------------------------------------


def _curvature_scales(log_density, x, lower, upper):
    """Per-coordinate standard deviations from a second difference of the target."""
    d = x.size
    sd = np.empty(d)
    l0 = log_density(x)
    for k in range(d):
        h = 1e-4 * max(1.0, abs(x[k]))
        e = np.zeros(d)
        e[k] = h
        lp = log_density(x + e) if np.all(x + e <= upper) else -np.inf
        lm = log_density(x - e) if np.all(x - e >= lower) and x[k] - h > lower[k] else -np.inf
        c = -(lp - 2 * l0 + lm) / h**2
        width = upper[k] - lower[k]
        fallback = 0.01 * (width if np.isfinite(width) else max(1.0, abs(x[k])))
        sd[k] = 1 / math.sqrt(c) if np.isfinite(c) and c > 0 else fallback
        if np.isfinite(width):
            sd[k] = min(sd[k], width / 4)
    return sd


def adaptive_metropolis(log_density, start, settings, lower=None, upper=None, proposal_cov=None, seed=None):
    """Adaptive random-walk Metropolis with optional second-stage delayed rejection.

    Returns ``(retained_draws, accepted_after_burn_in, diagnostics)``.
    Proposals outside ``[lower, upper]`` are rejected without evaluating the
    target.
    """
    x = np.array(start, dtype=float)
    d = x.size
    lower = np.full(d, -np.inf) if lower is None else np.asarray(lower, dtype=float)
    upper = np.full(d, np.inf) if upper is None else np.asarray(upper, dtype=float)
    rng = np.random.default_rng(settings.seed if seed is None else seed)
    lx = log_density(x)
    if not np.isfinite(lx):
        raise InputError("starting point has zero posterior density")
    sd_scale = 2.38**2 / d
    if proposal_cov is None:
        proposal_cov = np.diag(_curvature_scales(log_density, x, lower, upper) ** 2)
    C = sd_scale * np.asarray(proposal_cov, dtype=float)
    L = linalg.cholesky(C + settings.regularization * np.eye(d), lower=True)

    def evaluate(y):
        if np.any(y < lower) or np.any(y > upper):
            return -np.inf
        return log_density(y)

    history = np.empty((settings.iterations, d))
    accepted = 0
    accepted_stage = [0, 0]
    window = []
    win_acc = 0
    for it in range(settings.iterations):
        if it >= settings.adapt_start and it % settings.adapt_interval == 0:
            emp = np.cov(history[:it].T).reshape(d, d)
            try:
                L = linalg.cholesky(sd_scale * emp + settings.regularization * np.eye(d), lower=True)
            except linalg.LinAlgError:
                pass
        z1 = rng.standard_normal(d)
        u1 = rng.random()
        y1 = x + L @ z1
        l1 = evaluate(y1)
        a1 = 1.0 if l1 >= lx else math.exp(l1 - lx) if np.isfinite(l1) else 0.0
        took = 0
        if u1 < a1:
            x, lx, took = y1, l1, 1
        elif settings.dr_stages == 2:
            z2 = rng.standard_normal(d)
            u2 = rng.random()
            y2 = x + settings.dr_scale * (L @ z2)
            l2 = evaluate(y2)
            if np.isfinite(l2):
                a1_rev = 1.0 if l1 >= l2 else math.exp(l1 - l2) if np.isfinite(l1) else 0.0
                if a1_rev < 1.0:
                    # Gaussian first-stage kernels: only the quadratic forms differ
                    w_rev = linalg.solve_triangular(L, y1 - y2, lower=True)
                    log_q = -0.5 * (w_rev @ w_rev) + 0.5 * (z1 @ z1)
                    log_a2 = l2 - lx + log_q + math.log1p(-a1_rev) - math.log1p(-a1)
                    if u2 < math.exp(min(log_a2, 0.0)):
                        x, lx, took = y2, l2, 2
        history[it] = x
        if took and it >= settings.burn_in:
            accepted += 1
            accepted_stage[took - 1] += 1
        win_acc += bool(took)
        if (it + 1) % 1000 == 0:
            window.append(win_acc / 1000)
            win_acc = 0

    start_keep = settings.burn_in + settings.thin - 1
    draws = history[start_keep :: settings.thin]
    post = settings.iterations - settings.burn_in
    rate = accepted / post
    diag = {
        "acceptance_rate": rate,
        "first_stage_rate": accepted_stage[0] / post,
        "acceptance_trace": window,
        "accepted_by_stage": accepted_stage,
    }
    if rate < settings.min_acceptance:
        raise MixingError(f"acceptance rate {rate:.4f} after burn-in is below {settings.min_acceptance}", diag)
    half = len(draws) // 2
    if half >= 2:
        a, b = draws[:half], draws[half:]
        se = np.sqrt(a.var(axis=0, ddof=1) / len(a) + b.var(axis=0, ddof=1) / len(b))
        with np.errstate(divide="ignore", invalid="ignore"):
            diag["split_half_z"] = (np.abs(a.mean(axis=0) - b.mean(axis=0)) / se).tolist()
    return draws, accepted, diag


def run_mcmc(data, model, prior, start, settings=None, log_target=None, tol=DEFAULT_TOL, proposal_cov=None):
    """Sample the original-model posterior over ``(lambda, theta, x0)``.

    The substep count of the ODE solver is fixed once, at the starting point,
    so the target is one deterministic function for the whole run.
    ``log_target`` replaces the posterior (used for testing the sampler).
    """
    settings = settings or McmcSettings()
    x_start = start.original_vector() if isinstance(start, ModeEstimate) else np.asarray(start, dtype=float)
    q, p = model.q, model.p
    lower, upper = prior.lower(), prior.upper()
    meta = {}
    if log_target is None:
        nsub = choose_substeps(model, x_start[1 + q :], x_start[1 : 1 + q], data.times, tol)
        meta["nsub"] = nsub

        def log_target(v):
            try:
                return -original_nll(model, OriginalParams.unpack(v, q, p), data, prior, nsub=nsub)
            except (DomainError, IntegrationError):
                return -np.inf

    seeds = np.random.SeedSequence(settings.seed).spawn(settings.chains)
    parts, accepted, diags = [], 0, []
    for s in seeds:
        draws, acc, diag = adaptive_metropolis(
            log_target, x_start, settings, lower, upper, proposal_cov, np.random.default_rng(s)
        )
        parts.append(draws)
        accepted += acc
        diags.append(diag)
    samples = np.concatenate(parts, axis=0)
    post = settings.chains * (settings.iterations - settings.burn_in)
    return Chain(
        samples,
        accepted,
        {**asdict(settings), **meta},
        original_labels(model),
        accepted / post,
        {"chains": diags},
    )


# --- comparison -----------------------------------------------------------


def sample_covariance(chain, keep=None, labels=None):
    """Unbiased covariance of the retained draws as an oracle report."""
    S = chain.samples if keep is None else chain.samples[:, np.asarray(keep, dtype=int)]
    if S.shape[0] < 2:
        raise InputError("need at least two draws")
    if labels is None:
        labels = chain.labels if keep is None else [chain.labels[k] for k in keep]
        if len(labels) != S.shape[1]:
            labels = [f"c{k}" for k in range(S.shape[1])]
    cov = np.cov(S.T, ddof=1).reshape(S.shape[1], S.shape[1])
    flags = []
    dead = np.flatnonzero(np.diag(cov) <= 0)
    if dead.size:
        flags.append("degenerate-coordinate")
    return CovarianceReport.build(
        "mcmc-oracle", labels, SymmetricMatrix(cov), flags,
        {"draws": int(S.shape[0]), "degenerate": dead.tolist()},
    )


def frobenius_distance(A, B):
    A = np.asarray(A.array if isinstance(A, SymmetricMatrix) else A, dtype=float)
    B = np.asarray(B.array if isinstance(B, SymmetricMatrix) else B, dtype=float)
    if A.shape != B.shape:
        raise InputError(f"dimension mismatch {A.shape} vs {B.shape}")
    return float(np.sqrt(np.sum((A - B) ** 2)))


@dataclass
class Comparison:
    labels: list
    names: list
    valid: list
    flags: list
    covariance_distance: np.ndarray
    correlation_distance: np.ndarray
    # rows follow ``names``; NaN for reports excluded by the validity gate
    relative_variance: np.ndarray


def compare_reports(reports, names=None):
    if len(reports) < 1:
        raise InputError("nothing to compare")
    labels = list(reports[0].labels)
    for r in reports[1:]:
        if list(r.labels) != labels:
            raise InputError(f"label mismatch: {r.labels} vs {labels}")
    names = list(names) if names is not None else [r.meta.get("name", r.method) for r in reports]
    valid = [r.valid for r in reports]
    k = len(reports)
    cov_d = np.full((k, k), np.nan)
    cor_d = np.full((k, k), np.nan)
    for i in range(k):
        for j in range(k):
            if valid[i] and valid[j]:
                cov_d[i, j] = frobenius_distance(reports[i].covariance, reports[j].covariance)
                cor_d[i, j] = frobenius_distance(reports[i].correlation, reports[j].correlation)
    rel = np.full((k, len(labels)), np.nan)
    good = [i for i in range(k) if valid[i]]
    if good:
        V = np.array([reports[i].variances for i in good])
        rel[good] = V / V.max(axis=0)
    return Comparison(labels, names, valid, [list(r.flags) for r in reports], cov_d, cor_d, rel)
