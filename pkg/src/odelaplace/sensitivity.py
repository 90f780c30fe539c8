"""Reference integrator and forward sensitivity systems.

Every solve here is fixed-step RK4 with ``nsub`` uniform substeps per grid
interval.  Without an explicit ``nsub`` the step count is doubled, starting
from one substep, until two successive solutions differ by less than ``tol``
at the grid points.

The sensitivity systems are integrated jointly with the states.  With
``phi = (theta, x0)`` and ``A = du/dphi`` for ``u = (x, theta)``:

    dS/dt   = J_f A                                  S = dx/dphi
    dW_j/dt = sum_l (df_j/dx_l) W_l + A^T H_{f_j} A   W_j = d^2 x_j / dphi dphi^T

Written out block by block these are the (theta, theta), (x0, theta) and
(x0, x0) systems; ``S(t0) = [0 | I]`` and ``W(t0) = 0``.  Each ``W_j`` is
stored as its upper triangle, so the packed state has
``p + p(p+q) + p(p+q)(p+q+1)/2`` entries.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numba
import numpy as np

from .errors import ConditioningWarning, DomainError, InputError, IntegrationError

__all__ = [
    "SensitivityBundle",
    "extended_dimension",
    "solve_reference",
    "choose_substeps",
    "solve_first_order",
    "solve_second_order",
]

DEFAULT_TOL = 1e-9
MAX_LEVEL = 14


def extended_dimension(p, q, order=2):
    n = p + q
    dim = p + p * n
    if order >= 2:
        dim += p * n * (n + 1) // 2
    return dim


def _check_grid(grid):
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 1 or grid.size < 2:
        raise InputError("time grid needs at least two points")
    if not np.all(np.diff(grid) > 0):
        raise InputError("time grid must be strictly increasing")
    return grid


@numba.njit(cache=True)
def _kernel_trajectory(f, x0, times, th, nsub):
    n = times.shape[0]
    p = x0.shape[0]
    out = np.empty((n, p))
    x = x0.copy()
    out[0] = x
    k1 = np.empty(p)
    k2 = np.empty(p)
    k3 = np.empty(p)
    k4 = np.empty(p)
    tmp = np.empty(p)
    for i in range(n - 1):
        h = (times[i + 1] - times[i]) / nsub
        for k in range(nsub):
            t = times[i] + k * h
            f(x, t, th, k1)
            for j in range(p):
                tmp[j] = x[j] + 0.5 * h * k1[j]
            f(tmp, t + 0.5 * h, th, k2)
            for j in range(p):
                tmp[j] = x[j] + 0.5 * h * k2[j]
            f(tmp, t + 0.5 * h, th, k3)
            for j in range(p):
                tmp[j] = x[j] + h * k3[j]
            f(tmp, t + h, th, k4)
            for j in range(p):
                x[j] += h * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]) / 6.0
        for j in range(p):
            if not np.isfinite(x[j]):
                return out, i + 1
        out[i + 1] = x
    return out, -1


def _numpy_trajectory(model, x0, times, theta, nsub):
    """Batched RK4; returns states ``(..., n+1, p)`` and a per-sample failure mask."""
    batch = np.broadcast_shapes(x0.shape[:-1], theta.shape[:-1])
    x = np.array(np.broadcast_to(x0, batch + (model.p,)))
    theta = np.broadcast_to(theta, batch + (model.q,))
    out = np.empty(batch + (times.size, model.p))
    out[..., 0, :] = x
    failed = np.zeros(batch, dtype=bool)
    with np.errstate(all="ignore"):
        for i in range(times.size - 1):
            h = (times[i + 1] - times[i]) / nsub
            for k in range(nsub):
                t = times[i] + k * h
                k1 = model.rhs(x, t, theta)
                k2 = model.rhs(x + 0.5 * h * k1, t + 0.5 * h, theta)
                k3 = model.rhs(x + 0.5 * h * k2, t + 0.5 * h, theta)
                k4 = model.rhs(x + h * k3, t + h, theta)
                x = x + h * (k1 + 2 * k2 + 2 * k3 + k4) / 6
            bad = ~np.all(np.isfinite(x), axis=-1)
            if np.any(bad):
                failed |= bad
                x[bad] = 0.0
            out[..., i + 1, :] = x
    out[failed] = np.nan
    return out, failed


def _trajectory(model, x0, theta, grid, nsub):
    if x0.ndim == 1 and theta.ndim == 1 and model.kernel is not None:
        states, bad = _kernel_trajectory(model.kernel, x0, grid, theta, nsub)
        if bad >= 0:
            raise IntegrationError(
                f"{model.name}: solution blew up before t={grid[bad]:g}", time=float(grid[bad])
            )
        return states, None
    states, failed = _numpy_trajectory(model, x0, grid, theta, nsub)
    if failed.ndim == 0 and failed:
        idx = int(np.argmax(~np.all(np.isfinite(states), axis=-1)))
        raise IntegrationError(f"{model.name}: solution blew up before t={grid[idx]:g}", time=float(grid[idx]))
    return states, failed


def _validate(model, x0, theta):
    x0 = np.asarray(x0, dtype=float)
    theta = np.asarray(theta, dtype=float)
    if x0.shape[-1:] != (model.p,) or theta.shape[-1:] != (model.q,):
        raise InputError(f"{model.name}: expected x0 of length {model.p} and theta of length {model.q}")
    model.check_admissible(theta)
    if not np.all(np.isfinite(x0)):
        raise DomainError("non-finite initial state")
    return x0, theta


def solve_reference(model, x0, theta, grid, tol=DEFAULT_TOL, nsub=None, max_level=MAX_LEVEL, full_output=False):
    """Solution of the ODE on ``grid`` (shape ``(n+1, p)``, or batched).

    Batched inputs (several ``x0``/``theta`` rows) never raise on a diverging
    sample; those rows come back as NaN and ``full_output`` exposes the mask.
    With ``full_output`` the return value is ``(states, nsub, failed)``.
    """
    x0, theta = _validate(model, x0, theta)
    grid = _check_grid(grid)
    if nsub is not None:
        states, failed = _trajectory(model, x0, theta, grid, int(nsub))
        return (states, int(nsub), failed) if full_output else states

    if model.kernel is not None and (x0.ndim > 1 or theta.ndim > 1):
        return _solve_rows(model, x0, theta, grid, tol, max_level, full_output)
    cur, nsub, failed, converged = _refine(model, x0, theta, grid, tol, max_level)
    if not converged:
        _warn_unconverged(model, tol, max_level)
    return (cur, nsub, failed) if full_output else cur


def _refine(model, x0, theta, grid, tol, max_level):
    # a coarse level may blow up where a finer one does not; only the finest counts
    prev = None
    for level in range(0, max_level + 1):
        try:
            cur, failed = _trajectory(model, x0, theta, grid, 2**level)
        except IntegrationError:
            if level == max_level:
                raise
            prev = None
            continue
        if prev is not None:
            diff = np.abs(cur - prev)
            if failed is not None:
                # rows that fail only at the coarser level still need refining
                if np.any(failed != prev_failed):
                    prev, prev_failed = cur, failed
                    continue
                diff = diff[~failed]
            if diff.size == 0 or np.max(diff) < tol:
                return cur, 2**level, failed, True
        prev, prev_failed = cur, failed
    return cur, 2**max_level, failed, False


def _solve_rows(model, x0, theta, grid, tol, max_level, full_output):
    """Batched solve that refines every row on its own with the compiled kernel."""
    batch = np.broadcast_shapes(x0.shape[:-1], theta.shape[:-1])
    xs = np.broadcast_to(x0, batch + (model.p,)).reshape(-1, model.p)
    ths = np.broadcast_to(theta, batch + (model.q,)).reshape(-1, model.q)
    out = np.full((len(xs), grid.size, model.p), np.nan)
    failed = np.zeros(len(xs), dtype=bool)
    nsub, unconverged = 1, 0
    for r in range(len(xs)):
        try:
            out[r], ns, _, ok = _refine(model, xs[r], ths[r], grid, tol, max_level)
        except IntegrationError:
            failed[r] = True
            continue
        nsub = max(nsub, ns)
        unconverged += not ok
    if unconverged:
        _warn_unconverged(model, tol, max_level, f" ({unconverged} of {len(xs)} rows)")
    out = out.reshape(batch + (grid.size, model.p))
    failed = failed.reshape(batch)
    return (out, nsub, failed) if full_output else out


def _warn_unconverged(model, tol, max_level, extra=""):
    warnings.warn(
        f"{model.name}: step refinement stopped at {2**max_level} substeps without reaching tol={tol:g}{extra}",
        ConditioningWarning,
        stacklevel=3,
    )


def choose_substeps(model, x0, theta, grid, tol=DEFAULT_TOL):
    """Substep count the refinement policy settles on at this point."""
    return solve_reference(model, x0, theta, grid, tol=tol, full_output=True)[1]


@dataclass
class SensitivityBundle:
    times: np.ndarray
    states: np.ndarray
    # jac_theta[i, j, k] = d x_j(t_i) / d theta_k ; jac_x0[i, j, l] = d x_j(t_i) / d x0_l
    jac_theta: np.ndarray
    jac_x0: np.ndarray
    # hess[i, j] is the (q+p) x (q+p) Hessian of x_j(t_i) in (theta, x0) order
    hess: np.ndarray | None = None
    nsub: int = 0
    dimension: int = 0
    warnings: list = field(default_factory=list)

    @property
    def jac(self):
        return np.concatenate([self.jac_theta, self.jac_x0], axis=-1)


class _Extended:
    """Packed right-hand side of the joint state/sensitivity system."""

    def __init__(self, model, theta, order):
        self.model = model
        self.theta = theta
        self.order = order
        p, q = model.p, model.q
        self.p, self.q, self.n = p, q, p + q
        self.iu = np.triu_indices(self.n)
        self.n_s = p * self.n
        self.dim = extended_dimension(p, q, order)
        self.A = np.zeros((self.n + 0, self.n))  # du/dphi, rows u = (x, theta)
        self.A[p:, :q] = np.eye(q)

    def initial(self, x0):
        p, q = self.p, self.q
        y = np.zeros(self.dim)
        y[:p] = x0
        S = np.zeros((p, self.n))
        S[:, q:] = np.eye(p)
        y[p : p + self.n_s] = S.ravel()
        return y

    def unpack(self, y):
        p, n = self.p, self.n
        x = y[:p]
        S = y[p : p + self.n_s].reshape(p, n)
        W = None
        if self.order >= 2:
            W = np.zeros((p, n, n))
            tri = y[p + self.n_s :].reshape(p, -1)
            W[:, self.iu[0], self.iu[1]] = tri
            W[:, self.iu[1], self.iu[0]] = tri
        return x, S, W

    def __call__(self, y, t):
        model, theta, p = self.model, self.theta, self.p
        x, S, W = self.unpack(y)
        A = self.A.copy()
        A[:p] = S
        jx = model.jac_x(x, t, theta)
        jf = np.concatenate([jx, model.jac_theta(x, t, theta)], axis=-1)
        out = np.empty(self.dim)
        out[:p] = model.rhs(x, t, theta)
        out[p : p + self.n_s] = (jf @ A).ravel()
        if self.order >= 2:
            hf = model.hessians(x, t, theta)
            dW = np.tensordot(jx, W, axes=(1, 0)) + A.T @ hf @ A
            out[p + self.n_s :] = dW[:, self.iu[0], self.iu[1]].ravel()
        return out


def _integrate_extended(ext, y0, grid, nsub):
    out = np.empty((grid.size, y0.size))
    y = y0.copy()
    out[0] = y
    for i in range(grid.size - 1):
        h = (grid[i + 1] - grid[i]) / nsub
        for k in range(nsub):
            t = grid[i] + k * h
            k1 = ext(y, t)
            k2 = ext(y + 0.5 * h * k1, t + 0.5 * h)
            k3 = ext(y + 0.5 * h * k2, t + 0.5 * h)
            k4 = ext(y + h * k3, t + h)
            y = y + h * (k1 + 2 * k2 + 2 * k3 + k4) / 6
        if not np.all(np.isfinite(y)):
            raise IntegrationError(f"sensitivity system blew up before t={grid[i + 1]:g}", time=float(grid[i + 1]))
        out[i + 1] = y
    return out


@numba.njit(cache=True)
def _ext_rhs(dk, y, t, th, p, q, order, f, jx, jth, hs, A, tmp, dy):
    n = p + q
    nn = n * n
    for j in range(p):
        f[j] = 0.0
        for a in range(p):
            jx[j, a] = 0.0
        for a in range(q):
            jth[j, a] = 0.0
    if order >= 2:
        hs[:] = 0.0
    dk(y[:p], t, th, f, jx, jth, hs)
    off_s = p
    off_w = p + p * n
    for j in range(p):
        dy[j] = f[j]
    for j in range(p):
        for c in range(n):
            acc = 0.0
            for l in range(p):
                acc += jx[j, l] * y[off_s + l * n + c]
            if c < q:
                acc += jth[j, c]
            dy[off_s + j * n + c] = acc
    if order < 2:
        return
    # A = du/dphi: rows u = (x, theta), columns phi = (theta, x0)
    for l in range(p):
        for c in range(n):
            A[l, c] = y[off_s + l * n + c]
    for j in range(p):
        for k in range(n):
            for b in range(n):
                acc = 0.0
                for l in range(n):
                    acc += hs[j, k, l] * A[l, b]
                tmp[k, b] = acc
        for a in range(n):
            for b in range(a, n):
                acc = 0.0
                for l in range(p):
                    acc += jx[j, l] * y[off_w + l * nn + a * n + b]
                for k in range(n):
                    acc += A[k, a] * tmp[k, b]
                dy[off_w + j * nn + a * n + b] = acc
                dy[off_w + j * nn + b * n + a] = acc


@numba.njit(cache=True)
def _ext_trajectory(dk, y0, grid, th, p, q, order, nsub):
    n = p + q
    dim = y0.shape[0]
    out = np.empty((grid.shape[0], dim))
    out[0] = y0
    y = y0.copy()
    f = np.empty(p)
    jx = np.empty((p, p))
    jth = np.empty((p, q))
    hs = np.zeros((p, n, n))
    A = np.zeros((n, n))
    for k in range(q):
        A[p + k, k] = 1.0
    tmp = np.empty((n, n))
    k1 = np.empty(dim)
    k2 = np.empty(dim)
    k3 = np.empty(dim)
    k4 = np.empty(dim)
    ys = np.empty(dim)
    for i in range(grid.shape[0] - 1):
        h = (grid[i + 1] - grid[i]) / nsub
        for s in range(nsub):
            t = grid[i] + s * h
            _ext_rhs(dk, y, t, th, p, q, order, f, jx, jth, hs, A, tmp, k1)
            for c in range(dim):
                ys[c] = y[c] + 0.5 * h * k1[c]
            _ext_rhs(dk, ys, t + 0.5 * h, th, p, q, order, f, jx, jth, hs, A, tmp, k2)
            for c in range(dim):
                ys[c] = y[c] + 0.5 * h * k2[c]
            _ext_rhs(dk, ys, t + 0.5 * h, th, p, q, order, f, jx, jth, hs, A, tmp, k3)
            for c in range(dim):
                ys[c] = y[c] + h * k3[c]
            _ext_rhs(dk, ys, t + h, th, p, q, order, f, jx, jth, hs, A, tmp, k4)
            for c in range(dim):
                y[c] += h * (k1[c] + 2.0 * k2[c] + 2.0 * k3[c] + k4[c]) / 6.0
        for c in range(dim):
            if not np.isfinite(y[c]):
                return out, i + 1
        out[i + 1] = y
    return out, -1


class _CompiledExtended:
    """Same packed layout as ``_Extended`` but integrated by the numba kernel.

    Internally each ``W_j`` is carried as a full matrix whose lower triangle
    mirrors the upper one; only the upper triangle is returned.
    """

    def __init__(self, model, theta, order):
        self.packed = _Extended(model, theta, order)
        self.model, self.theta, self.order = model, theta, order
        p, n = model.p, model.n_u
        self.full_dim = p + p * n + (p * n * n if order >= 2 else 0)

    def integrate(self, y0, grid, nsub):
        pk = self.packed
        p, n = pk.p, pk.n
        yf = np.zeros(self.full_dim)
        yf[: p + pk.n_s] = y0[: p + pk.n_s]
        out, bad = _ext_trajectory(
            self.model.dkernel, yf, grid, self.theta, p, pk.q, self.order, int(nsub)
        )
        if bad >= 0:
            raise IntegrationError(f"sensitivity system blew up before t={grid[bad]:g}", time=float(grid[bad]))
        if self.order < 2:
            return out
        W = out[:, p + pk.n_s :].reshape(grid.size, p, n, n)
        tri = W[:, :, pk.iu[0], pk.iu[1]].reshape(grid.size, -1)
        return np.concatenate([out[:, : p + pk.n_s], tri], axis=1)


def _block_change(cur, prev, blocks):
    """Largest sup-norm change of a block, relative to max(1, sup of that block)."""
    worst = 0.0
    for b in blocks:
        c = cur[:, b]
        if c.size:
            worst = max(worst, np.max(np.abs(c - prev[:, b])) / max(1.0, np.max(np.abs(c))))
    return worst


def _solve_extended(model, x0, theta, grid, order, tol, nsub, max_level, magnitude_cap, use_kernel=True):
    x0, theta = _validate(model, x0, theta)
    if x0.ndim != 1 or theta.ndim != 1:
        raise InputError("sensitivity solves take a single x0/theta")
    grid = _check_grid(grid)
    ext = _Extended(model, theta, order)
    y0 = ext.initial(x0)
    if model.dkernel is not None and use_kernel:
        compiled = _CompiledExtended(model, theta, order)

        def integrate(steps):
            return compiled.integrate(y0, grid, steps)

    else:

        def integrate(steps):
            return _integrate_extended(ext, y0, grid, steps)

    blocks = (slice(0, ext.p), slice(ext.p, ext.p + ext.n_s), slice(ext.p + ext.n_s, None))
    if nsub is None:
        # the state alone is cheap to refine; start the joint system one level below it
        start = max(choose_substeps(model, x0, theta, grid, tol) // 2, 1)
        level, prev = start, None
        while True:
            try:
                cur = integrate(level)
            except IntegrationError:
                if level >= 2**max_level:
                    raise
                cur = None
            if cur is not None and prev is not None and _block_change(cur, prev, blocks) < tol:
                break
            if level >= 2**max_level:
                warnings.warn(
                    f"sensitivity refinement stopped at {level} substeps without reaching tol={tol:g}",
                    ConditioningWarning,
                    stacklevel=3,
                )
                break
            prev = cur
            level *= 2
        nsub = level
    else:
        cur = integrate(int(nsub))

    p, q, n = ext.p, ext.q, ext.n
    S = cur[:, p : p + ext.n_s].reshape(grid.size, p, n)
    bundle = SensitivityBundle(
        times=grid,
        states=cur[:, :p].copy(),
        jac_theta=S[:, :, :q].copy(),
        jac_x0=S[:, :, q:].copy(),
        nsub=int(nsub),
        dimension=ext.dim,
    )
    if order >= 2:
        hess = np.zeros((grid.size, p, n, n))
        tri = cur[:, p + ext.n_s :].reshape(grid.size, p, -1)
        hess[:, :, ext.iu[0], ext.iu[1]] = tri
        hess[:, :, ext.iu[1], ext.iu[0]] = tri
        bundle.hess = hess
        peak = float(np.max(np.abs(tri))) if tri.size else 0.0
        if peak > magnitude_cap:
            msg = f"second-order sensitivities reach {peak:.3g} (cap {magnitude_cap:.3g}); expect accumulated error"
            bundle.warnings.append(msg)
            warnings.warn(msg, ConditioningWarning, stacklevel=3)
    return bundle


def solve_first_order(model, x0, theta, grid, tol=DEFAULT_TOL, nsub=None, max_level=MAX_LEVEL, use_kernel=True):
    """States and first-order sensitivities on ``grid``."""
    return _solve_extended(model, x0, theta, grid, 1, tol, nsub, max_level, np.inf, use_kernel)


def solve_second_order(
    model, x0, theta, grid, tol=DEFAULT_TOL, nsub=None, max_level=MAX_LEVEL, magnitude_cap=1e12, use_kernel=True
):
    """States, first- and second-order sensitivities on ``grid``.

    A ``ConditioningWarning`` is issued (and recorded on the bundle) when any
    second derivative exceeds ``magnitude_cap`` in absolute value.
    """
    return _solve_extended(model, x0, theta, grid, 2, tol, nsub, max_level, magnitude_cap, use_kernel)
