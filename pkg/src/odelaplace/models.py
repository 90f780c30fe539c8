"""ODE models with hand-coded first and second derivatives.

Every model function is batched: ``x`` has shape ``(..., p)``, ``theta`` has
shape ``(..., q)`` and ``t`` broadcasts against the leading dimensions.  The
public ``eval_*`` wrappers broadcast all three to a common batch shape before
calling into the model.

Hessians are taken with respect to the joined vector ``u = (x, theta)`` and
returned as an array of shape ``(..., p, p + q, p + q)``; entry ``[..., j, a, b]``
is ``d^2 f_j / du_a du_b``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numba
import numpy as np

from .errors import DomainError, InputError

__all__ = [
    "OdeModel",
    "SplineBasis",
    "eval_rhs",
    "eval_jacobians",
    "eval_hessians",
    "fd_derivative_oracle",
    "eval_spline_basis",
    "fitzhugh_nagumo",
    "lorenz96",
    "linear_test",
    "make_sir_model",
    "make_model",
    "MODEL_NAMES",
]


@dataclass(frozen=True, eq=False)
class OdeModel:
    name: str
    p: int
    q: int
    rhs: Callable
    jac_x: Callable
    jac_theta: Callable
    hessians: Callable
    # in-place scalar kernel ``kernel(x, t, theta, out)`` compiled with numba;
    # used by the trajectory integrator when present
    kernel: Callable | None = None
    # ``dkernel(x, t, theta, f, jac_x, jac_theta, hessians)`` fills zeroed
    # output buffers with the value and all derivatives at one point
    dkernel: Callable | None = None
    admissible: Callable | None = None
    state_names: tuple = ()
    param_names: tuple = ()
    config: dict = field(default_factory=dict)

    @property
    def n_u(self):
        return self.p + self.q

    def check_admissible(self, theta):
        theta = np.asarray(theta, dtype=float)
        if not np.all(np.isfinite(theta)):
            raise DomainError(f"{self.name}: non-finite parameter")
        if self.admissible is not None and not np.all(self.admissible(theta)):
            raise DomainError(f"{self.name}: parameter outside the admissible domain: {theta}")


def _prepare(model, x, t, theta):
    x = np.asarray(x, dtype=float)
    theta = np.asarray(theta, dtype=float)
    t = np.asarray(t, dtype=float)
    if x.ndim == 0 or x.shape[-1] != model.p:
        raise InputError(f"{model.name}: state has length {x.shape[-1] if x.ndim else 0}, expected {model.p}")
    if theta.ndim == 0 or theta.shape[-1] != model.q:
        raise InputError(
            f"{model.name}: parameter has length {theta.shape[-1] if theta.ndim else 0}, expected {model.q}"
        )
    model.check_admissible(theta)
    try:
        batch = np.broadcast_shapes(x.shape[:-1], theta.shape[:-1], t.shape)
    except ValueError as exc:
        raise InputError(f"incompatible batch shapes: {exc}") from None
    return (
        np.broadcast_to(x, batch + (model.p,)),
        np.broadcast_to(t, batch),
        np.broadcast_to(theta, batch + (model.q,)),
    )


def eval_rhs(model, x, t, theta):
    """Return ``f(x, t; theta)``."""
    return model.rhs(*_prepare(model, x, t, theta))


def eval_jacobians(model, x, t, theta):
    """Return ``(df/dx, df/dtheta)`` with shapes ``(..., p, p)`` and ``(..., p, q)``."""
    args = _prepare(model, x, t, theta)
    return model.jac_x(*args), model.jac_theta(*args)


def eval_hessians(model, x, t, theta):
    return model.hessians(*_prepare(model, x, t, theta))


def fd_derivative_oracle(model, x, t, theta, order=1, step=None):
    """Central finite differences of ``model.rhs`` (unbatched inputs).

    ``order=1`` returns ``(jac_x, jac_theta)``; ``order=2`` returns the stacked
    Hessians ``(p, p + q, p + q)`` from second differences of the right-hand
    side alone, so the result never touches the analytic derivatives.  The
    default relative step is 1e-5 for first and 1e-4 for second differences.
    """
    x, t, theta = _prepare(model, x, t, theta)
    if x.ndim != 1:
        raise InputError("fd_derivative_oracle expects a single point")
    p, q = model.p, model.q
    u0 = np.concatenate([x, theta])
    rel = step if step is not None else (1e-5 if order == 1 else 1e-4)
    steps = rel * np.maximum(1.0, np.abs(u0))

    def f(u):
        return model.rhs(u[:p], t, u[p:])

    n = p + q
    if order == 1:
        jac = np.empty((p, n))
        for a in range(n):
            e = np.zeros(n)
            e[a] = steps[a]
            jac[:, a] = (f(u0 + e) - f(u0 - e)) / (2 * steps[a])
        return jac[:, :p], jac[:, p:]
    if order != 2:
        raise InputError("order must be 1 or 2")
    f0 = f(u0)
    hess = np.empty((p, n, n))
    for a in range(n):
        ea = np.zeros(n)
        ea[a] = steps[a]
        hess[:, a, a] = (f(u0 + ea) - 2 * f0 + f(u0 - ea)) / steps[a] ** 2
        for b in range(a + 1, n):
            eb = np.zeros(n)
            eb[b] = steps[b]
            val = (f(u0 + ea + eb) - f(u0 + ea - eb) - f(u0 - ea + eb) + f(u0 - ea - eb)) / (
                4 * steps[a] * steps[b]
            )
            hess[:, a, b] = val
            hess[:, b, a] = val
    return hess


def _zeros(x, *shape):
    return np.zeros(x.shape[:-1] + shape)


# --- FitzHugh-Nagumo -------------------------------------------------------


def _fn_rhs(x, t, th):
    x1, x2 = x[..., 0], x[..., 1]
    a, b, c = th[..., 0], th[..., 1], th[..., 2]
    return np.stack([c * (x1 - x1**3 / 3 + x2), -(x1 - a + b * x2) / c], axis=-1)


def _fn_jac_x(x, t, th):
    x1 = x[..., 0]
    b, c = th[..., 1], th[..., 2]
    J = _zeros(x, 2, 2)
    J[..., 0, 0] = c * (1 - x1**2)
    J[..., 0, 1] = c
    J[..., 1, 0] = -1 / c
    J[..., 1, 1] = -b / c
    return J


def _fn_jac_theta(x, t, th):
    x1, x2 = x[..., 0], x[..., 1]
    a, b, c = th[..., 0], th[..., 1], th[..., 2]
    J = _zeros(x, 2, 3)
    J[..., 0, 2] = x1 - x1**3 / 3 + x2
    J[..., 1, 0] = 1 / c
    J[..., 1, 1] = -x2 / c
    J[..., 1, 2] = (x1 - a + b * x2) / c**2
    return J


def _fn_hessians(x, t, th):
    # u = (x1, x2, a, b, c)
    x1, x2 = x[..., 0], x[..., 1]
    a, b, c = th[..., 0], th[..., 1], th[..., 2]
    H = _zeros(x, 2, 5, 5)
    H[..., 0, 0, 0] = -2 * c * x1
    H[..., 0, 0, 4] = H[..., 0, 4, 0] = 1 - x1**2
    H[..., 0, 1, 4] = H[..., 0, 4, 1] = 1.0
    H[..., 1, 1, 3] = H[..., 1, 3, 1] = -1 / c
    H[..., 1, 0, 4] = H[..., 1, 4, 0] = 1 / c**2
    H[..., 1, 1, 4] = H[..., 1, 4, 1] = b / c**2
    H[..., 1, 2, 4] = H[..., 1, 4, 2] = -1 / c**2
    H[..., 1, 3, 4] = H[..., 1, 4, 3] = x2 / c**2
    H[..., 1, 4, 4] = -2 * (x1 - a + b * x2) / c**3
    return H


@numba.njit(cache=True)
def _fn_kernel(x, t, th, out):
    out[0] = th[2] * (x[0] - x[0] ** 3 / 3 + x[1])
    out[1] = -(x[0] - th[0] + th[1] * x[1]) / th[2]


@numba.njit(cache=True)
def _fn_dkernel(x, t, th, f, jx, jth, hess):
    x1, x2 = x[0], x[1]
    a, b, c = th[0], th[1], th[2]
    f[0] = c * (x1 - x1**3 / 3 + x2)
    f[1] = -(x1 - a + b * x2) / c
    jx[0, 0] = c * (1 - x1**2)
    jx[0, 1] = c
    jx[1, 0] = -1 / c
    jx[1, 1] = -b / c
    jth[0, 2] = x1 - x1**3 / 3 + x2
    jth[1, 0] = 1 / c
    jth[1, 1] = -x2 / c
    jth[1, 2] = (x1 - a + b * x2) / c**2
    hess[0, 0, 0] = -2 * c * x1
    hess[0, 0, 4] = hess[0, 4, 0] = 1 - x1**2
    hess[0, 1, 4] = hess[0, 4, 1] = 1.0
    hess[1, 1, 3] = hess[1, 3, 1] = -1 / c
    hess[1, 0, 4] = hess[1, 4, 0] = 1 / c**2
    hess[1, 1, 4] = hess[1, 4, 1] = b / c**2
    hess[1, 2, 4] = hess[1, 4, 2] = -1 / c**2
    hess[1, 3, 4] = hess[1, 4, 3] = x2 / c**2
    hess[1, 4, 4] = -2 * (x1 - a + b * x2) / c**3


def fitzhugh_nagumo():
    return OdeModel(
        name="fitzhugh-nagumo",
        p=2,
        q=3,
        rhs=_fn_rhs,
        jac_x=_fn_jac_x,
        jac_theta=_fn_jac_theta,
        hessians=_fn_hessians,
        kernel=_fn_kernel,
        dkernel=_fn_dkernel,
        admissible=lambda th: th[..., 2] != 0,
        state_names=("V", "R"),
        param_names=("theta1", "theta2", "theta3"),
    )


# --- Lorenz-96 -------------------------------------------------------------
# theta holds one (a_j, b_j, c_j) triple per state:
#   dX_j/dt = a_j (X_{j+1} - X_{j-2}) X_{j-1} - b_j X_j + c_j, indices cyclic.


def _l96_parts(x, th):
    p = x.shape[-1]
    tri = th.reshape(th.shape[:-1] + (p, 3))
    return tri[..., 0], tri[..., 1], tri[..., 2]


def _l96_rhs(x, t, th):
    a, b, c = _l96_parts(x, th)
    xp1 = np.roll(x, -1, axis=-1)
    xm2 = np.roll(x, 2, axis=-1)
    xm1 = np.roll(x, 1, axis=-1)
    return a * (xp1 - xm2) * xm1 - b * x + c


def _l96_index(p):
    j = np.arange(p)
    return j, (j + 1) % p, (j - 2) % p, (j - 1) % p


def _l96_jac_x(x, t, th):
    p = x.shape[-1]
    a, b, _ = _l96_parts(x, th)
    j, jp1, jm2, jm1 = _l96_index(p)
    J = _zeros(x, p, p)
    xj1 = x[..., jm1]
    J[..., j, jp1] += a * xj1
    J[..., j, jm2] -= a * xj1
    J[..., j, jm1] += a * (x[..., jp1] - x[..., jm2])
    J[..., j, j] -= b
    return J


def _l96_jac_theta(x, t, th):
    p = x.shape[-1]
    j, jp1, jm2, jm1 = _l96_index(p)
    J = _zeros(x, p, 3 * p)
    J[..., j, 3 * j] = (x[..., jp1] - x[..., jm2]) * x[..., jm1]
    J[..., j, 3 * j + 1] = -x
    J[..., j, 3 * j + 2] = 1.0
    return J


def _l96_hessians(x, t, th):
    p = x.shape[-1]
    n = 4 * p
    a, _, _ = _l96_parts(x, th)
    j, jp1, jm2, jm1 = _l96_index(p)
    ia = p + 3 * j
    ib = ia + 1
    H = _zeros(x, p, n, n)

    def add_sym(r, c, val):
        H[..., j, r, c] += val
        H[..., j, c, r] += val

    add_sym(jp1, jm1, a)
    add_sym(jm2, jm1, -a)
    add_sym(jp1, ia, x[..., jm1])
    add_sym(jm2, ia, -x[..., jm1])
    add_sym(jm1, ia, x[..., jp1] - x[..., jm2])
    add_sym(j, ib, -np.ones_like(a))
    return H


@numba.njit(cache=True)
def _l96_kernel(x, t, th, out):
    p = x.shape[0]
    for j in range(p):
        out[j] = (
            th[3 * j] * (x[(j + 1) % p] - x[(j - 2) % p]) * x[(j - 1) % p]
            - th[3 * j + 1] * x[j]
            + th[3 * j + 2]
        )


@numba.njit(cache=True)
def _l96_dkernel(x, t, th, f, jx, jth, hess):
    p = x.shape[0]
    for j in range(p):
        jp1, jm2, jm1 = (j + 1) % p, (j - 2) % p, (j - 1) % p
        a, b, c = th[3 * j], th[3 * j + 1], th[3 * j + 2]
        ia, ib = p + 3 * j, p + 3 * j + 1
        diff = x[jp1] - x[jm2]
        f[j] = a * diff * x[jm1] - b * x[j] + c
        jx[j, jp1] += a * x[jm1]
        jx[j, jm2] -= a * x[jm1]
        jx[j, jm1] += a * diff
        jx[j, j] -= b
        jth[j, 3 * j] = diff * x[jm1]
        jth[j, 3 * j + 1] = -x[j]
        jth[j, 3 * j + 2] = 1.0
        hess[j, jp1, jm1] += a
        hess[j, jm1, jp1] += a
        hess[j, jm2, jm1] -= a
        hess[j, jm1, jm2] -= a
        hess[j, jp1, ia] += x[jm1]
        hess[j, ia, jp1] += x[jm1]
        hess[j, jm2, ia] -= x[jm1]
        hess[j, ia, jm2] -= x[jm1]
        hess[j, jm1, ia] += diff
        hess[j, ia, jm1] += diff
        hess[j, j, ib] -= 1.0
        hess[j, ib, j] -= 1.0


def lorenz96(p=4):
    p = int(p)
    if p < 3:
        raise InputError("Lorenz-96 needs p >= 3")
    names = tuple(f"{s}{j + 1}" for j in range(p) for s in ("a", "b", "c"))
    return OdeModel(
        name="lorenz96",
        p=p,
        q=3 * p,
        rhs=_l96_rhs,
        jac_x=_l96_jac_x,
        jac_theta=_l96_jac_theta,
        hessians=_l96_hessians,
        kernel=_l96_kernel,
        dkernel=_l96_dkernel,
        state_names=tuple(f"X{j + 1}" for j in range(p)),
        param_names=names,
        config={"p": p},
    )


# --- scalar linear test model: dx/dt = theta1 * x ---------------------------


def _lin_rhs(x, t, th):
    return th * x


def _lin_jac_x(x, t, th):
    return th[..., None]


def _lin_jac_theta(x, t, th):
    return x[..., None]


def _lin_hessians(x, t, th):
    H = _zeros(x, 1, 2, 2)
    H[..., 0, 0, 1] = H[..., 0, 1, 0] = 1.0
    return H


@numba.njit(cache=True)
def _lin_kernel(x, t, th, out):
    out[0] = th[0] * x[0]


@numba.njit(cache=True)
def _lin_dkernel(x, t, th, f, jx, jth, hess):
    f[0] = th[0] * x[0]
    jx[0, 0] = th[0]
    jth[0, 0] = x[0]
    hess[0, 0, 1] = hess[0, 1, 0] = 1.0


def linear_test():
    return OdeModel(
        name="linear-test",
        p=1,
        q=1,
        rhs=_lin_rhs,
        jac_x=_lin_jac_x,
        jac_theta=_lin_jac_theta,
        hessians=_lin_hessians,
        kernel=_lin_kernel,
        dkernel=_lin_dkernel,
        state_names=("x",),
        param_names=("theta1",),
    )


# --- cubic B-splines and the time-varying SIR model -------------------------


@dataclass(frozen=True, eq=False)
class SplineBasis:
    knots: np.ndarray
    degree: int = 3

    def __post_init__(self):
        k = np.asarray(self.knots, dtype=float)
        if k.ndim != 1 or np.any(np.diff(k) < 0):
            raise InputError("knots must be a nondecreasing 1-D sequence")
        if k.size < 2 * (self.degree + 1):
            raise InputError("too few knots for the requested degree")
        k.setflags(write=False)
        object.__setattr__(self, "knots", k)

    @property
    def n_basis(self):
        return self.knots.size - self.degree - 1

    @property
    def window(self):
        return float(self.knots[0]), float(self.knots[-1])

    @classmethod
    def uniform_clamped(cls, t0, t1, n_basis, degree=3):
        """Clamped knots with uniformly spaced interior knots on ``[t0, t1]``."""
        if n_basis < degree + 1:
            raise InputError(f"need at least {degree + 1} basis functions")
        if not t1 > t0:
            raise InputError("empty spline window")
        interior = np.linspace(t0, t1, n_basis - degree + 1)[1:-1]
        knots = np.concatenate([[t0] * (degree + 1), interior, [t1] * (degree + 1)])
        return cls(knots, degree)


def _last_span(knots):
    i = knots.size - 2
    while knots[i] >= knots[i + 1]:
        i -= 1
    return i


def eval_spline_basis(basis, t):
    """Cox-de Boor recursion; returns shape ``t.shape + (n_basis,)``."""
    k = basis.knots
    t = np.asarray(t, dtype=float)
    lo, hi = basis.window
    slack = 1e-12 * (hi - lo)
    if np.any(t < lo - slack) or np.any(t > hi + slack):
        raise InputError(f"t outside the knot range [{lo}, {hi}]")
    t = np.clip(t, lo, hi)
    tt = t[..., None]
    B = ((k[:-1] <= tt) & (tt < k[1:])).astype(float)
    at_end = t >= hi
    if np.any(at_end):
        B[at_end] = 0.0
        B[at_end, _last_span(k)] = 1.0
    for d in range(1, basis.degree + 1):
        left_den = k[d:-1] - k[: -d - 1]
        right_den = k[d + 1 :] - k[1:-d]
        with np.errstate(divide="ignore", invalid="ignore"):
            left = np.where(left_den > 0, (tt - k[: -d - 1]) / left_den, 0.0)
            right = np.where(right_den > 0, (k[d + 1 :] - tt) / right_den, 0.0)
        B = left * B[..., :-1] + right * B[..., 1:]
    return B


@numba.njit(cache=True)
def _basis_into(knots, degree, t, out):
    m = knots.shape[0]
    B = np.zeros(m - 1)
    last = m - 2
    while knots[last] >= knots[last + 1]:
        last -= 1
    if t >= knots[last + 1]:
        B[last] = 1.0
    else:
        for i in range(m - 1):
            if knots[i] <= t < knots[i + 1]:
                B[i] = 1.0
                break
    for d in range(1, degree + 1):
        for i in range(m - 1 - d):
            val = 0.0
            den = knots[i + d] - knots[i]
            if den > 0:
                val += (t - knots[i]) / den * B[i]
            den = knots[i + d + 1] - knots[i + 1]
            if den > 0:
                val += (knots[i + d + 1] - t) / den * B[i + 1]
            B[i] = val
    for i in range(out.shape[0]):
        out[i] = B[i]


def make_sir_model(basis_beta, basis_gamma, N, window=None):
    """Time-varying SIR on states ``(I, R)`` with log-spline rates.

    ``beta(t) = exp(B_beta(t) . c_beta)`` and likewise for ``gamma``; the
    parameter vector is ``(c_beta, c_gamma)``.  ``N`` is a fixed constant.
    """
    if not N > 0:
        raise InputError("population size must be positive")
    if basis_beta.window != basis_gamma.window:
        raise InputError("beta and gamma bases cover different windows")
    if window is not None:
        lo, hi = basis_beta.window
        if window[0] < lo or window[1] > hi:
            raise InputError(f"spline window {basis_beta.window} does not cover the observation window {tuple(window)}")
    N = float(N)
    nb, ng = basis_beta.n_basis, basis_gamma.n_basis
    p, q = 2, nb + ng

    def rates(t, th):
        Bb = eval_spline_basis(basis_beta, t)
        Bg = eval_spline_basis(basis_gamma, t)
        beta = np.exp(np.sum(Bb * th[..., :nb], axis=-1))
        gamma = np.exp(np.sum(Bg * th[..., nb:], axis=-1))
        return Bb, Bg, beta, gamma

    def rhs(x, t, th):
        _, _, beta, gamma = rates(t, th)
        I, R = x[..., 0], x[..., 1]
        return np.stack([beta * I * (N - I - R) / N - gamma * I, gamma * I], axis=-1)

    def jac_x(x, t, th):
        _, _, beta, gamma = rates(t, th)
        I, R = x[..., 0], x[..., 1]
        J = _zeros(x, 2, 2)
        J[..., 0, 0] = beta * (N - 2 * I - R) / N - gamma
        J[..., 0, 1] = -beta * I / N
        J[..., 1, 0] = gamma
        return J

    def jac_theta(x, t, th):
        Bb, Bg, beta, gamma = rates(t, th)
        I, R = x[..., 0], x[..., 1]
        infect = (beta * I * (N - I - R) / N)[..., None]
        remove = (gamma * I)[..., None]
        J = _zeros(x, 2, q)
        J[..., 0, :nb] = infect * Bb
        J[..., 0, nb:] = -remove * Bg
        J[..., 1, nb:] = remove * Bg
        return J

    def hessians(x, t, th):
        Bb, Bg, beta, gamma = rates(t, th)
        I, R = x[..., 0], x[..., 1]
        n = p + q
        H = _zeros(x, 2, n, n)
        cb = slice(2, 2 + nb)
        cg = slice(2 + nb, n)
        H[..., 0, 0, 0] = -2 * beta / N
        H[..., 0, 0, 1] = H[..., 0, 1, 0] = -beta / N
        dI_b = (beta * (N - 2 * I - R) / N)[..., None] * Bb
        dR_b = (-beta * I / N)[..., None] * Bb
        g_Bg = gamma[..., None] * Bg
        H[..., 0, 0, cb] = dI_b
        H[..., 0, cb, 0] = dI_b
        H[..., 0, 1, cb] = dR_b
        H[..., 0, cb, 1] = dR_b
        H[..., 0, 0, cg] = -g_Bg
        H[..., 0, cg, 0] = -g_Bg
        outer_b = Bb[..., :, None] * Bb[..., None, :]
        outer_g = Bg[..., :, None] * Bg[..., None, :]
        H[..., 0, cb, cb] = (beta * I * (N - I - R) / N)[..., None, None] * outer_b
        H[..., 0, cg, cg] = -(gamma * I)[..., None, None] * outer_g
        H[..., 1, 0, cg] = g_Bg
        H[..., 1, cg, 0] = g_Bg
        H[..., 1, cg, cg] = (gamma * I)[..., None, None] * outer_g
        return H

    kb = np.array(basis_beta.knots)
    kg = np.array(basis_gamma.knots)
    db, dg = basis_beta.degree, basis_gamma.degree
    lo, hi = basis_beta.window

    @numba.njit
    def kernel(x, t, th, out):
        tc = min(max(t, lo), hi)
        bb = np.empty(nb)
        bg = np.empty(ng)
        _basis_into(kb, db, tc, bb)
        _basis_into(kg, dg, tc, bg)
        sb = 0.0
        for i in range(nb):
            sb += bb[i] * th[i]
        sg = 0.0
        for i in range(ng):
            sg += bg[i] * th[nb + i]
        beta = np.exp(sb)
        gamma = np.exp(sg)
        out[0] = beta * x[0] * (N - x[0] - x[1]) / N - gamma * x[0]
        out[1] = gamma * x[0]

    @numba.njit
    def dkernel(x, t, th, f, jx, jth, hess):
        tc = min(max(t, lo), hi)
        bb = np.empty(nb)
        bg = np.empty(ng)
        _basis_into(kb, db, tc, bb)
        _basis_into(kg, dg, tc, bg)
        sb = 0.0
        for i in range(nb):
            sb += bb[i] * th[i]
        sg = 0.0
        for i in range(ng):
            sg += bg[i] * th[nb + i]
        beta = np.exp(sb)
        gamma = np.exp(sg)
        I, R = x[0], x[1]
        infect = beta * I * (N - I - R) / N
        f[0] = infect - gamma * I
        f[1] = gamma * I
        jx[0, 0] = beta * (N - 2 * I - R) / N - gamma
        jx[0, 1] = -beta * I / N
        jx[1, 0] = gamma
        hess[0, 0, 0] = -2 * beta / N
        hess[0, 0, 1] = hess[0, 1, 0] = -beta / N
        for i in range(nb):
            jth[0, i] = infect * bb[i]
            hess[0, 0, 2 + i] = hess[0, 2 + i, 0] = beta * (N - 2 * I - R) / N * bb[i]
            hess[0, 1, 2 + i] = hess[0, 2 + i, 1] = -beta * I / N * bb[i]
            for k in range(nb):
                hess[0, 2 + i, 2 + k] = infect * bb[i] * bb[k]
        for i in range(ng):
            ci = 2 + nb + i
            jth[0, nb + i] = -gamma * I * bg[i]
            jth[1, nb + i] = gamma * I * bg[i]
            hess[0, 0, ci] = hess[0, ci, 0] = -gamma * bg[i]
            hess[1, 0, ci] = hess[1, ci, 0] = gamma * bg[i]
            for k in range(ng):
                ck = 2 + nb + k
                hess[0, ci, ck] = -gamma * I * bg[i] * bg[k]
                hess[1, ci, ck] = gamma * I * bg[i] * bg[k]

    return OdeModel(
        name="sir-tv",
        p=p,
        q=q,
        rhs=rhs,
        jac_x=jac_x,
        jac_theta=jac_theta,
        hessians=hessians,
        kernel=kernel,
        dkernel=dkernel,
        state_names=("I", "R"),
        param_names=tuple(f"cbeta{i + 1}" for i in range(nb)) + tuple(f"cgamma{i + 1}" for i in range(ng)),
        config={"N": N, "n_basis_beta": nb, "n_basis_gamma": ng, "window": [lo, hi]},
    )


MODEL_NAMES = ("fitzhugh-nagumo", "lorenz96", "sir-tv", "linear-test")


def make_model(name, config=None):
    """Build a registered model from its name and a JSON-style config dict."""
    config = dict(config or {})
    if name == "fitzhugh-nagumo":
        return fitzhugh_nagumo()
    if name == "lorenz96":
        return lorenz96(config.get("p", 4))
    if name == "linear-test":
        return linear_test()
    if name == "sir-tv":
        try:
            window = config["window"]
        except KeyError:
            raise InputError("sir-tv config needs a 'window' [t0, t1]") from None
        t0, t1 = float(window[0]), float(window[1])
        bb = SplineBasis.uniform_clamped(t0, t1, int(config.get("n_basis_beta", 30)))
        bg = SplineBasis.uniform_clamped(t0, t1, int(config.get("n_basis_gamma", 30)))
        return make_sir_model(bb, bg, config.get("N", 1e6), window=(t0, t1))
    raise InputError(f"unknown model {name!r}; choose from {', '.join(MODEL_NAMES)}")
