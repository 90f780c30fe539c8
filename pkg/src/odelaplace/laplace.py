"""From a Hessian at the mode to covariances, samples and credible bands."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg
from scipy.linalg import lapack

from .errors import (
    BandError,
    DomainError,
    InputError,
    IntegrationError,
    MatrixSingularityError,
    NotPositiveDefiniteError,
    NumericalError,
)
from .sensitivity import solve_reference

__all__ = [
    "PD_STATUSES",
    "SymmetricMatrix",
    "CovarianceReport",
    "Band",
    "invert_full",
    "schur_complement",
    "schur_block_covariance",
    "nearest_pd",
    "correlation_from",
    "sample_gaussian",
    "band_from_curves",
    "credible_band",
]

PD_STATUSES = ("verified-PD", "repaired", "unverified")


class SymmetricMatrix:
    """Dense symmetric matrix built from the upper triangle of its input.

    The lower triangle of whatever is passed in is ignored, so symmetry holds
    by construction.  The stored array is read-only.
    """

    def __init__(self, data, pd_status="unverified"):
        a = np.array(data, dtype=float)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise InputError(f"expected a square matrix, got shape {a.shape}")
        if pd_status not in PD_STATUSES:
            raise InputError(f"unknown pd_status {pd_status!r}")
        upper = np.triu(a)
        a = upper + np.triu(a, 1).T
        a.setflags(write=False)
        self._a = a
        self.pd_status = pd_status

    @property
    def dim(self):
        return self._a.shape[0]

    @property
    def array(self):
        return self._a

    @property
    def entries(self):
        """Packed upper triangle, row by row."""
        return self._a[np.triu_indices(self.dim)]

    def diagonal(self):
        return np.diag(self._a).copy()

    def submatrix(self, index):
        index = np.asarray(index, dtype=int)
        return SymmetricMatrix(self._a[np.ix_(index, index)], self.pd_status)

    def __array__(self, dtype=None, copy=None):
        return self._a if dtype is None else self._a.astype(dtype)

    def __repr__(self):
        return f"SymmetricMatrix(dim={self.dim}, pd_status={self.pd_status!r})"


def _as_symmetric(M):
    return M if isinstance(M, SymmetricMatrix) else SymmetricMatrix(M)


def _cholesky(a):
    """Lower Cholesky factor; raises with the zero-based failing pivot."""
    c, info = lapack.dpotrf(a, lower=1, clean=1)
    if info > 0:
        raise NotPositiveDefiniteError(info - 1)
    if info < 0:
        raise NumericalError(f"dpotrf rejected argument {-info}")
    return c


def invert_full(H):
    """Inverse of a positive definite matrix through its Cholesky factor."""
    H = _as_symmetric(H)
    if H.dim == 0:
        return SymmetricMatrix(np.zeros((0, 0)), "verified-PD")
    c = _cholesky(H.array)
    inv, info = lapack.dpotri(c, lower=1)
    if info != 0:
        raise NotPositiveDefiniteError(max(info - 1, 0))
    # dpotri fills the lower triangle only
    return SymmetricMatrix(inv.T, "verified-PD")


def _split(dim, keep):
    keep = np.asarray(keep, dtype=int).ravel()
    if keep.size == 0 or np.any(keep < 0) or np.any(keep >= dim) or np.unique(keep).size != keep.size:
        raise InputError(f"keep must list distinct indices in [0, {dim})")
    rest = np.setdiff1d(np.arange(dim), keep)
    return keep, rest


def schur_complement(H, keep):
    """``A - B D^{-1} B^T`` where ``A`` is the kept block and ``D`` the rest."""
    H = _as_symmetric(H)
    keep, rest = _split(H.dim, keep)
    a = H.array
    A = a[np.ix_(keep, keep)]
    if rest.size == 0:
        return SymmetricMatrix(A)
    B = a[np.ix_(keep, rest)]
    D = a[np.ix_(rest, rest)]
    try:
        X = linalg.solve(D, B.T, assume_a="sym")
    except linalg.LinAlgError as exc:
        raise MatrixSingularityError(f"complement block of size {rest.size} is singular") from exc
    if not np.all(np.isfinite(X)):
        raise MatrixSingularityError(f"complement block of size {rest.size} is singular")
    return SymmetricMatrix(A - B @ X)


def schur_block_covariance(H, keep):
    """Covariance of the ``keep`` coordinates with the rest marginalized out."""
    return invert_full(schur_complement(H, keep))


def default_floor(M):
    M = _as_symmetric(M)
    return 1e-10 * max(float(np.max(np.abs(np.diag(M.array)), initial=0.0)), np.finfo(float).tiny)


def nearest_pd(M, delta=None):
    """Clip the spectrum of ``M`` from below at ``delta``.

    Only eigenpairs below the floor are touched, so a matrix that already
    clears it comes back unchanged.
    """
    M = _as_symmetric(M)
    if delta is None:
        delta = default_floor(M)
    a = M.array
    try:
        w, V = np.linalg.eigh(a)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("symmetric eigendecomposition failed") from exc
    low = w < delta
    if not np.any(low):
        return SymmetricMatrix(a, "repaired")
    Vl = V[:, low]
    out = a + (Vl * (delta - w[low])) @ Vl.T
    out = (out + out.T) / 2
    # the reconstruction can undershoot by a few ulps
    shift = 0.0
    for _ in range(50):
        lo = np.linalg.eigvalsh(out).min()
        if lo >= delta:
            break
        shift = max(2 * shift, delta - lo, np.finfo(float).eps * max(1.0, np.abs(w).max()))
        out = out + shift * np.eye(a.shape[0])
    return SymmetricMatrix(out, "repaired")


def correlation_from(cov):
    cov = _as_symmetric(cov)
    d = cov.diagonal()
    bad = np.flatnonzero(~(d > 0))
    if bad.size:
        raise DomainError(f"non-positive variance at index {int(bad[0])}; covariance is not valid")
    s = np.sqrt(d)
    r = cov.array / np.outer(s, s)
    np.fill_diagonal(r, 1.0)
    return SymmetricMatrix(r)


@dataclass
class CovarianceReport:
    method: str
    labels: list
    covariance: SymmetricMatrix
    correlation: SymmetricMatrix | None
    variances: np.ndarray
    flags: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    METHODS = ("laplace-relaxed", "laplace-original", "mcmc-oracle")
    # flags that make a report unusable for comparison
    INVALID = ("nonpositive-variance", "correlation-out-of-range")

    @classmethod
    def build(cls, method, labels, covariance, flags=(), meta=None):
        if method not in cls.METHODS:
            raise InputError(f"unknown method {method!r}")
        covariance = _as_symmetric(covariance)
        labels = list(labels)
        if len(labels) != covariance.dim:
            raise InputError(f"{len(labels)} labels for a {covariance.dim}-dimensional covariance")
        flags = list(flags)
        variances = covariance.diagonal()
        try:
            corr = correlation_from(covariance)
        except DomainError:
            flags.append("nonpositive-variance")
            with np.errstate(invalid="ignore", divide="ignore"):
                s = np.sqrt(np.abs(variances))
                r = covariance.array / np.outer(s, s)
            r[~np.isfinite(r)] = np.nan
            corr = SymmetricMatrix(r)
        off = corr.array[~np.eye(corr.dim, dtype=bool)]
        if np.any(np.abs(off) > 1 + 1e-12):
            flags.append("correlation-out-of-range")
        return cls(method, labels, covariance, corr, variances, flags, dict(meta or {}))

    @property
    def valid(self):
        return not any(f in self.INVALID for f in self.flags)


def sample_gaussian(mean, cov, count, seed=None):
    """``count`` draws of ``mean + L z``; a zero covariance returns copies of the mean."""
    mean = np.asarray(mean, dtype=float)
    cov = _as_symmetric(cov)
    if cov.dim != mean.size:
        raise InputError(f"mean has length {mean.size} but covariance is {cov.dim}x{cov.dim}")
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((int(count), mean.size))
    if not np.any(cov.array):
        return np.tile(mean, (int(count), 1))
    L = _cholesky(cov.array)
    return mean + z @ L.T


@dataclass
class Band:
    times: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    center: np.ndarray
    used: int
    dropped: int


def _order_indices(count):
    lo = math.ceil(0.025 * count) - 1
    hi = math.floor(0.975 * count) - 1
    return max(lo, 0), max(hi, 0)


def band_from_curves(curves):
    """Pointwise (lower, upper) order statistics over the first axis."""
    curves = np.asarray(curves, dtype=float)
    if curves.shape[0] == 0:
        raise BandError("no curves to form a band from")
    lo, hi = _order_indices(curves.shape[0])
    s = np.sort(curves, axis=0)
    return s[lo], s[hi]


def credible_band(model, mean, cov, grid, count=1000, seed=None, tol=1e-9, max_drop=0.05):
    """Pointwise 95% band of solution curves under ``N(mean, cov)`` over ``(theta, x0)``."""
    mean = np.asarray(mean, dtype=float)
    q, p = model.q, model.p
    if mean.size != q + p:
        raise InputError(f"mean must cover theta and x0 ({q + p} values), got {mean.size}")
    grid = np.asarray(grid, dtype=float)
    draws = sample_gaussian(mean, cov, count, seed)
    theta, x0 = draws[:, :q], draws[:, q:]
    ok = np.ones(len(draws), dtype=bool)
    if model.admissible is not None:
        ok &= np.array([bool(model.admissible(th)) for th in theta])
    ok &= np.all(np.isfinite(draws), axis=1)
    # the centre rides in the same batch so it shares the integrator path and step count
    states, _, failed = solve_reference(
        model, np.vstack([mean[q:], x0[ok]]), np.vstack([mean[:q], theta[ok]]), grid, tol=tol, full_output=True
    )
    if failed[0]:
        raise IntegrationError(f"{model.name}: the centre curve failed to integrate")
    center = states[0]
    curves = states[1:][~failed[1:]]
    dropped = int(count) - curves.shape[0]
    if dropped > max_drop * count:
        raise BandError(f"{dropped} of {count} sample curves failed to integrate")
    lower, upper = band_from_curves(curves)
    return Band(grid, lower, upper, center, curves.shape[0], dropped)
