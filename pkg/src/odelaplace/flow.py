"""RK4 transition map and its exact first and second derivatives.

Derivatives are propagated forward through the four stages.  Stage ``s``
evaluates ``K_s = h f(v_s)`` at ``v_s = (x + c_s K_{s-1}, theta)``, whose
Jacobian with respect to ``u = (x, theta)`` is the block matrix

    [[I_p + c_s dK_{s-1}/dx,  c_s dK_{s-1}/dtheta],
     [0,                      I_q               ]]

and the stage Hessian is the usual chain rule: the outer Jacobian applied to
the inner Hessians plus the sandwich ``Jv^T H_f Jv``.  The m-fold composition
uses the same recursion with ``g`` in place of ``f``.

All functions accept batched ``x``/``t``/``theta``/``h`` (leading dimensions
broadcast), which is how the relaxed posterior evaluates every observation
interval in one call.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import FlowOverflowError, InputError
from .models import _prepare

__all__ = ["StepConfig", "FlowDerivatives", "rk4_step", "rk4_jacobian", "rk4_hessian", "compose_flow"]

# (multiplier on the previous stage, time offset as a fraction of h)
_STAGES = ((0.0, 0.0), (0.5, 0.5), (0.5, 0.5), (1.0, 1.0))
_WEIGHTS = (1.0, 2.0, 2.0, 1.0)


@dataclass(frozen=True)
class StepConfig:
    h: float | np.ndarray
    m: int = 1

    def __post_init__(self):
        if int(self.m) != self.m or self.m < 1:
            raise InputError(f"subdivision count m must be an integer >= 1, got {self.m}")
        if not np.all(np.asarray(self.h) > 0):
            raise InputError("step length h must be positive")


@dataclass
class FlowDerivatives:
    value: np.ndarray
    jac_x: np.ndarray | None = None
    jac_theta: np.ndarray | None = None
    hessians: np.ndarray | None = None

    @property
    def jac(self):
        """Jacobian with respect to ``u = (x, theta)``, shape ``(..., p, p + q)``."""
        return np.concatenate([self.jac_x, self.jac_theta], axis=-1)


def _rk4(model, x, t, theta, h, order):
    x, t, theta = _prepare(model, x, t, theta)
    h = np.asarray(h, dtype=float)
    if np.any(h < 0):
        raise InputError("step length must be non-negative")
    h = np.broadcast_to(h, x.shape[:-1])
    hv, hm, hh = h[..., None], h[..., None, None], h[..., None, None, None]
    p, q = model.p, model.q
    n = p + q
    batch = x.shape[:-1]
    eye = np.eye(n)

    K = []
    JK = []
    HK = []
    for s, (c, frac) in enumerate(_STAGES):
        v = x if s == 0 else x + c * K[-1]
        tv = t + frac * h
        with np.errstate(over="ignore", invalid="ignore"):
            k = hv * model.rhs(v, tv, theta)
        if not np.all(np.isfinite(k)):
            raise FlowOverflowError(s + 1, float(np.min(tv)))
        K.append(k)
        if order < 1:
            continue
        jf = np.concatenate([model.jac_x(v, tv, theta), model.jac_theta(v, tv, theta)], axis=-1)
        if s == 0:
            jv = np.broadcast_to(eye, batch + (n, n))
        else:
            jv = np.broadcast_to(eye, batch + (n, n)).copy()
            jv[..., :p, :] += c * JK[-1]
        JK.append(hm * (jf @ jv))
        if order < 2:
            continue
        hf = model.hessians(v, tv, theta)
        hk = hh * np.einsum("...ka,...jkl,...lb->...jab", jv, hf, jv, optimize=True)
        if s > 0:
            hk += (c * hh) * np.einsum("...jk,...kab->...jab", jf[..., :p], HK[-1])
        HK.append(hk)

    out = FlowDerivatives(x + sum(w * k for w, k in zip(_WEIGHTS, K)) / 6)
    if not np.all(np.isfinite(out.value)):
        raise FlowOverflowError(4, float(np.min(t)))
    if order >= 1:
        jac = sum(w * j for w, j in zip(_WEIGHTS, JK)) / 6
        jac[..., :, :p] += np.eye(p)
        out.jac_x = jac[..., :p]
        out.jac_theta = jac[..., p:]
    if order >= 2:
        out.hessians = _symmetrize(sum(w * hk for w, hk in zip(_WEIGHTS, HK)) / 6)
    return out


def _symmetrize(H):
    return (H + np.swapaxes(H, -1, -2)) / 2


def rk4_step(model, x, t, theta, h):
    """One RK4 step of length ``h``."""
    return _rk4(model, x, t, theta, h, 0).value


def rk4_jacobian(model, x, t, theta, h):
    d = _rk4(model, x, t, theta, h, 1)
    return d.jac_x, d.jac_theta


def rk4_hessian(model, x, t, theta, h):
    """Hessians of each output of the RK4 step w.r.t. ``u = (x, theta)``."""
    return _rk4(model, x, t, theta, h, 2).hessians


def compose_flow(model, x, t, theta, config, order=2):
    """Value and derivatives of ``m`` RK4 steps of length ``h/m`` starting at ``t``.

    ``order`` limits the work: 0 for the value only, 1 to add Jacobians,
    2 to add Hessians.
    """
    if not isinstance(config, StepConfig):
        config = StepConfig(*config)
    m = int(config.m)
    hs = np.asarray(config.h, dtype=float) / m
    d = _rk4(model, x, t, theta, hs, order)
    if m == 1:
        return d
    p, q = model.p, model.q
    t = np.asarray(t, dtype=float)
    for k in range(1, m):
        e = _rk4(model, d.value, t + k * hs, theta, hs, order)
        if order == 0:
            d = e
            continue
        batch = d.value.shape[:-1]
        jv = np.zeros(batch + (p + q, p + q))
        jv[..., :p, :p] = d.jac_x
        jv[..., :p, p:] = d.jac_theta
        jv[..., p:, p:] = np.eye(q)
        jac = e.jac @ jv
        new = FlowDerivatives(e.value, jac[..., :p], jac[..., p:])
        if order >= 2:
            new.hessians = _symmetrize(
                np.einsum("...jk,...kab->...jab", e.jac_x, d.hessians)
                + np.einsum("...ka,...jkl,...lb->...jab", jv, e.hessians, jv, optimize=True)
            )
        d = new
    return d
