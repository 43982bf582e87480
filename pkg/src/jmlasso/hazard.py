"""Weibull baseline, joint hazard, cumulative hazard and survival-time sampling.

The cumulative hazard has no closed form once the longitudinal link enters the
hazard, so it is computed with a one-panel Gauss-Legendre rule on ``[0, t]``.
All functions have a scalar entry point and a vectorised ``*_many`` variant
that works on one row per individual.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.special import expit, logsumexp

from .exceptions import DomainError, NumericError, SaturationError

DEFAULT_ORDER = 64


@dataclass(frozen=True)
class QuadratureRule:
    """Gauss-Legendre nodes and weights on [-1, 1]."""

    nodes: np.ndarray
    weights: np.ndarray

    @property
    def order(self) -> int:
        return len(self.nodes)

    def integrate(self, f, lo, hi):
        """Integrate a vectorised ``f`` over ``[lo, hi]``."""
        half = 0.5 * (hi - lo)
        x = half * (self.nodes + 1.0) + lo
        return half * np.dot(self.weights, f(x))


@lru_cache(maxsize=16)
def gauss_legendre(order: int = DEFAULT_ORDER) -> QuadratureRule:
    if order < 1:
        raise DomainError(f"quadrature order must be >= 1, got {order}")
    x, w = np.polynomial.legendre.leggauss(order)
    x.setflags(write=False)
    w.setflags(write=False)
    return QuadratureRule(x, w)


def log_baseline_hazard(t, a: float, b: float):
    t = np.asarray(t, dtype=float)
    if np.any(t <= 0):
        raise DomainError("baseline hazard is defined for t > 0 only")
    return np.log(b) - b * np.log(a) + (b - 1.0) * np.log(t)


def baseline_hazard(t, a: float, b: float):
    """Weibull hazard ``b a^-b t^(b-1)``, evaluated in log space."""
    out = np.exp(log_baseline_hazard(t, a, b))
    return float(out) if out.ndim == 0 else out


def _link(t, z):
    """Logistic mean and its derivative in the growth-rate parameter.

    ``t`` broadcasts against the leading axes of ``z[..., k]``.
    """
    z1, z2, z3 = z[..., 0], z[..., 1], z[..., 2]
    u = (t - z2) / z3
    s = expit(u)
    m = z1 * s
    return m, -m * (1.0 - s) * u / z3


def _log_integrand(s, log_w, theta, eta, z):
    # log of w * h(s) on the node grid; s, log_w of shape (N, n), z (..., N, 3)
    m, dm3 = _link(s, z[..., None, :])
    logh = log_baseline_hazard(s, theta.baseline_a, theta.baseline_b) + theta.alpha * m
    return log_w + logh + eta[:, None], m, dm3


def _nodes(t, rule):
    t = np.asarray(t, dtype=float)
    if np.any(t <= 0):
        raise DomainError("cumulative hazard requires t > 0")
    half = 0.5 * t[:, None]
    s = half * (rule.nodes + 1.0)
    return s, np.log(half * rule.weights)


def log_cumulative_hazard_many(t, theta, U, Z, rule=None):
    """Log cumulative hazard for each individual at its own time ``t[i]``.

    ``U`` is (N, p) and ``Z`` is (N, 3), or (..., N, 3) for batches of
    latent draws. Working in log space keeps the result
    meaningful when the baseline underflows at small ``t``.
    """
    rule = rule or gauss_legendre()
    eta = np.asarray(U, dtype=float) @ theta.beta if theta.beta.size else np.zeros(len(t))
    s, log_w = _nodes(t, rule)
    logf, _, _ = _log_integrand(s, log_w, theta, eta, np.asarray(Z, dtype=float))
    return logsumexp(logf, axis=-1)


def hazard_integrals(t, theta, U, Z, rule=None):
    """Cumulative hazard plus the integrals needed for the score.

    Returns ``(H, H_m, H_dz3)`` where ``H_m = int h(s) m(s) ds`` and
    ``H_dz3 = int h(s) dm/dZ3(s) ds``, each of shape (N,).
    """
    rule = rule or gauss_legendre()
    U = np.asarray(U, dtype=float)
    eta = U @ theta.beta if theta.beta.size else np.zeros(len(t))
    s, log_w = _nodes(t, rule)
    logf, m, dm3 = _log_integrand(s, log_w, theta, eta, np.asarray(Z, dtype=float))
    with np.errstate(over="ignore"):
        f = np.exp(logf)
    H = f.sum(axis=1)
    H_m = (f * m).sum(axis=1)
    H_dz3 = (f * dm3).sum(axis=1)
    return H, H_m, H_dz3


def _as_row(u_row, p):
    u = np.asarray(u_row, dtype=float).reshape(1, -1)
    if u.shape[1] != p:
        raise DomainError(f"covariate row has length {u.shape[1]}, expected {p}")
    return u


def _as_z(z):
    return np.asarray(getattr(z, "z", z), dtype=float).reshape(1, 3)


def joint_hazard(t: float, theta, u_row, z) -> float:
    """Hazard ``h_base(t) exp(beta'u + alpha m(t, z))``."""
    u = _as_row(u_row, theta.beta.size)
    zz = _as_z(z)
    m, _ = _link(t, zz[0])
    log_h = (
        log_baseline_hazard(t, theta.baseline_a, theta.baseline_b)
        + float(u[0] @ theta.beta)
        + theta.alpha * m
    )
    with np.errstate(over="ignore"):
        h = float(np.exp(log_h))
    if not np.isfinite(h):
        raise NumericError(f"joint hazard overflows at t={t}")
    return h


def cumulative_hazard(t: float, theta, u_row, z, rule=None) -> float:
    """``int_0^t joint_hazard(s) ds`` by Gauss-Legendre quadrature."""
    u = _as_row(u_row, theta.beta.size)
    logH = log_cumulative_hazard_many(np.array([t], dtype=float), theta, u, _as_z(z), rule)
    with np.errstate(over="ignore"):
        H = float(np.exp(logH[0]))
    if not np.isfinite(H):
        raise NumericError(f"cumulative hazard is not finite at t={t}")
    return H


def sample_survival_times(theta, U, Z, uniform_draws, rule=None, t_max=None,
                          bisect_iter=200, newton_iter=8):
    """Solve ``H_i(T_i) = -log u_i`` for every individual at once.

    Bisection on ``log t`` keeps a valid bracket (H is monotone); Newton steps
    on ``log H`` as a function of ``log t`` polish the root, falling back to
    the bracket midpoint whenever they leave it.
    """
    rule = rule or gauss_legendre()
    u = np.asarray(uniform_draws, dtype=float)
    if np.any((u <= 0) | (u >= 1)):
        raise DomainError("uniform draws must lie in (0, 1)")
    U = np.asarray(U, dtype=float)
    Z = np.asarray(Z, dtype=float)
    a, b = theta.baseline_a, theta.baseline_b
    t_max = 10.0 * a if t_max is None else t_max
    target = np.log(-np.log(u))
    n = len(u)

    def logH(log_t, idx):
        return log_cumulative_hazard_many(np.exp(log_t), theta, U[idx], Z[idx], rule)

    all_idx = np.arange(n)
    hi = np.full(n, np.log(t_max))
    over = logH(hi, all_idx) < target
    if np.any(over):
        i = int(np.flatnonzero(over)[0])
        raise SaturationError(f"no survival time below t_max={t_max}", index=i)
    lo = np.full(n, np.log(a) - 1.0)
    for _ in range(200):
        bad = logH(lo, all_idx) > target
        if not bad.any():
            break
        hi = np.where(bad, lo, hi)
        lo = np.where(bad, lo - 2.0, lo)
    else:
        raise NumericError("failed to bracket survival time from below")

    # coarse bisection until the bracket is narrow, then Newton
    for _ in range(bisect_iter):
        if np.max(hi - lo) < 1e-3:
            break
        mid = 0.5 * (lo + hi)
        up = logH(mid, all_idx) > target
        hi = np.where(up, mid, hi)
        lo = np.where(up, lo, mid)

    x = 0.5 * (lo + hi)
    eta = U @ theta.beta if theta.beta.size else np.zeros(n)
    best_x, best_g = x, np.full(n, np.inf)
    for _ in range(newton_iter):
        lh = logH(x, all_idx)
        g = lh - target
        better = np.abs(g) < np.abs(best_g)
        best_x, best_g = np.where(better, x, best_x), np.where(better, g, best_g)
        if np.all(np.abs(g) < 1e-14):
            break
        # d log H / d log t = t h(t) / H(t)
        m, _ = _link(np.exp(x), Z)
        log_h = log_baseline_hazard(np.exp(x), a, b) + eta + theta.alpha * m
        slope = np.exp(x + log_h - lh)
        hi = np.where(g > 0, x, hi)
        lo = np.where(g > 0, lo, x)
        step = x - g / slope
        x = np.where((step >= lo) & (step <= hi) & np.isfinite(step), step, 0.5 * (lo + hi))
    g = logH(x, all_idx) - target
    x = np.where(np.abs(g) < np.abs(best_g), x, best_x)
    return np.exp(x)


def sample_survival_time(theta, u_row, z, uniform_draw: float, rule=None) -> float:
    """Inverse-transform draw of one survival time."""
    u = _as_row(u_row, theta.beta.size)
    return float(sample_survival_times(theta, u, _as_z(z), np.array([uniform_draw]), rule)[0])
