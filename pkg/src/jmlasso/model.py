"""Parameters, data containers and the complete-data log-likelihood.

Flat parameter layout (length ``p + 7``)::

    [beta_1 .. beta_p, alpha, mu_1, mu_2, mu_3,
     log gamma_1^2, log gamma_2^2, log sigma^2]

The Weibull baseline ``(a, b)`` is carried by :class:`Theta` but is not part
of the flat vector: it is held fixed during estimation.

Latent logistic parameters are stored as an ``(N, 2)`` array of
``(Z_1, Z_2)``; the third coordinate is always ``mu_3`` and is rebuilt from
the current parameters wherever it is needed.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit

from . import hazard as hz
from .exceptions import DimensionError, DomainError, NumericError

LOG_2PI = np.log(2.0 * np.pi)
N_EXTRA = 7


@dataclass(frozen=True)
class Theta:
    baseline_a: float
    baseline_b: float
    beta: np.ndarray
    alpha: float
    mu: np.ndarray
    gamma_sq: np.ndarray
    sigma_sq: float

    def __post_init__(self):
        object.__setattr__(self, "beta", np.asarray(self.beta, dtype=float).ravel())
        object.__setattr__(self, "mu", np.asarray(self.mu, dtype=float).ravel())
        object.__setattr__(self, "gamma_sq", np.asarray(self.gamma_sq, dtype=float).ravel())
        if self.mu.shape != (3,) or self.gamma_sq.shape != (2,):
            raise DimensionError("mu must have length 3 and gamma_sq length 2")
        if self.baseline_a <= 0 or self.baseline_b <= 0:
            raise DomainError("Weibull parameters must be positive")
        if np.any(self.gamma_sq <= 0) or self.sigma_sq <= 0:
            raise DomainError("variances must be positive")

    @property
    def p(self) -> int:
        return self.beta.size

    def with_(self, **changes) -> "Theta":
        return replace(self, **changes)


@dataclass(frozen=True)
class Layout:
    """Slot indices of the flat parameter vector for ``p`` covariates."""

    p: int

    @property
    def d(self) -> int:
        return self.p + N_EXTRA

    @property
    def beta(self) -> slice:
        return slice(0, self.p)

    @property
    def alpha(self) -> int:
        return self.p

    @property
    def mu(self) -> slice:
        return slice(self.p + 1, self.p + 4)

    @property
    def log_gamma_sq(self) -> slice:
        return slice(self.p + 4, self.p + 6)

    @property
    def log_sigma_sq(self) -> int:
        return self.p + 6

    def names(self) -> list[str]:
        return ([f"beta{k + 1}" for k in range(self.p)]
                + ["alpha", "mu1", "mu2", "mu3", "log_gamma1_sq", "log_gamma2_sq", "log_sigma_sq"])


def flatten(theta: Theta) -> np.ndarray:
    return np.concatenate([
        theta.beta,
        [theta.alpha],
        theta.mu,
        np.log(theta.gamma_sq),
        [np.log(theta.sigma_sq)],
    ])


def unflatten(v, p: int, a: float, b: float) -> Theta:
    v = np.asarray(v, dtype=float)
    lay = Layout(p)
    if v.shape != (lay.d,):
        raise DimensionError(f"flat parameter vector must have length {lay.d}, got {v.shape}")
    return Theta(
        baseline_a=a,
        baseline_b=b,
        beta=v[lay.beta].copy(),
        alpha=float(v[lay.alpha]),
        mu=v[lay.mu].copy(),
        gamma_sq=np.exp(v[lay.log_gamma_sq]),
        sigma_sq=float(np.exp(v[lay.log_sigma_sq])),
    )


@dataclass(frozen=True)
class Dataset:
    obs_times: np.ndarray
    y: np.ndarray
    survival: np.ndarray
    covariates: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.obs_times, dtype=float).ravel()
        y = np.atleast_2d(np.asarray(self.y, dtype=float))
        T = np.asarray(self.survival, dtype=float).ravel()
        U = np.asarray(self.covariates, dtype=float)
        if U.ndim == 1:
            U = U.reshape(len(T), -1)
        object.__setattr__(self, "obs_times", t)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "survival", T)
        object.__setattr__(self, "covariates", U)
        if np.any(np.diff(t) <= 0):
            raise DomainError("observation times must be strictly increasing")
        if np.any(T <= 0):
            raise DomainError("survival times must be positive")
        if y.shape != (len(T), len(t)) or U.shape[0] != len(T):
            raise DimensionError(
                f"inconsistent shapes: y {y.shape}, survival {T.shape}, "
                f"covariates {U.shape}, obs_times {t.shape}")

    @property
    def n(self) -> int:
        return len(self.survival)

    @property
    def p(self) -> int:
        return self.covariates.shape[1]

    @property
    def j(self) -> int:
        return len(self.obs_times)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.obs_times, self.y[idx], self.survival[idx], self.covariates[idx])


@dataclass(frozen=True)
class LatentVector:
    """Individual logistic parameters ``(Z_1, Z_2, Z_3)`` with ``Z_3 = mu_3``."""

    z12: tuple
    mu3: float
    z: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        z1, z2 = (float(c) for c in self.z12)
        object.__setattr__(self, "z", np.array([z1, z2, float(self.mu3)]))

    @classmethod
    def for_theta(cls, z12, theta: Theta) -> "LatentVector":
        return cls(tuple(z12), theta.mu[2])


def full_latents(z12, mu3: float) -> np.ndarray:
    """Append the degenerate third coordinate to an ``(N, 2)`` latent array."""
    z12 = np.asarray(z12, dtype=float).reshape(-1, 2)
    return np.column_stack([z12, np.full(len(z12), mu3)])


def _latent_array(latents, theta: Theta) -> np.ndarray:
    if isinstance(latents, np.ndarray):
        return full_latents(latents[:, :2], theta.mu[2])
    return full_latents([lv.z[:2] for lv in latents], theta.mu[2])


def logistic(t, z):
    """Logistic growth curve ``Z_1 / (1 + exp((Z_2 - t) / Z_3))``."""
    z = np.asarray(getattr(z, "z", z), dtype=float)
    if np.any(z[..., 2] == 0):
        raise DomainError("logistic growth rate Z_3 must be nonzero")
    out = z[..., 0] * expit((t - z[..., 1]) / z[..., 2])
    return float(out) if np.ndim(out) == 0 else out


def logistic_partials(t, z):
    """Partial derivatives of :func:`logistic` with respect to ``(Z_1, Z_2, Z_3)``."""
    z = np.asarray(getattr(z, "z", z), dtype=float)
    z1, z2, z3 = z[..., 0], z[..., 1], z[..., 2]
    if np.any(z3 == 0):
        raise DomainError("logistic growth rate Z_3 must be nonzero")
    u = (t - z2) / z3
    s = expit(u)
    ds = z1 * s * (1.0 - s)
    return np.array([s, -ds / z3, -ds * u / z3])


def _check(theta: Theta, data: Dataset, Z: np.ndarray):
    if theta.p != data.p:
        raise DimensionError(f"theta has p={theta.p}, data has p={data.p}")
    if Z.shape[-2:] != (data.n, 3):
        raise DimensionError(f"expected {data.n} latent vectors, got shape {Z.shape}")


def loglik_terms(theta: Theta, data: Dataset, Z: np.ndarray, rule=None):
    """Per-individual ``(longitudinal, survival, latent)`` log-density terms.

    ``Z`` is the full ``(N, 3)`` latent array, or ``(..., N, 3)`` for a batch
    of draws; each term then has shape ``(..., N)``.
    """
    _check(theta, data, Z)
    m = Z[..., 0:1] * expit((data.obs_times - Z[..., 1:2]) / Z[..., 2:3])
    r = data.y - m
    s2 = theta.sigma_sq
    long_ = -0.5 * data.j * (LOG_2PI + np.log(s2)) - 0.5 * np.sum(r * r, axis=-1) / s2

    T = data.survival
    eta = data.covariates @ theta.beta
    m_T = Z[..., 0] * expit((T - Z[..., 1]) / Z[..., 2])
    log_h = hz.log_baseline_hazard(T, theta.baseline_a, theta.baseline_b) + eta + theta.alpha * m_T
    with np.errstate(over="ignore"):
        H = np.exp(hz.log_cumulative_hazard_many(T, theta, data.covariates, Z, rule))
    surv = log_h - H

    dev = Z[..., :2] - theta.mu[:2]
    lat = np.sum(-0.5 * (LOG_2PI + np.log(theta.gamma_sq)) - 0.5 * dev * dev / theta.gamma_sq,
                 axis=-1)
    return long_, surv, lat


def conditional_loglik(theta: Theta, data: Dataset, Z: np.ndarray, rule=None) -> np.ndarray:
    """Log-density of the observations given the latents (no prior term)."""
    long_, surv, _ = loglik_terms(theta, data, Z, rule)
    return long_ + surv


def individual_loglik(theta: Theta, data: Dataset, Z: np.ndarray, rule=None) -> np.ndarray:
    """Complete-data log-density of each individual, shape (N,)."""
    long_, surv, lat = loglik_terms(theta, data, Z, rule)
    return long_ + surv + lat


def _raise_nonfinite(values, what):
    bad = ~np.isfinite(values)
    if bad.any():
        idx = np.flatnonzero(bad.reshape(len(values), -1).any(axis=1))[0]
        raise NumericError(f"{what} is not finite", index=int(idx))


def complete_loglik(theta: Theta, data: Dataset, latents, rule=None) -> float:
    """Complete-data log-likelihood summed over individuals.

    ``latents`` is either an ``(N, 2)``/``(N, 3)`` array or a list of
    :class:`LatentVector`; the third coordinate is always taken from ``mu_3``.
    """
    Z = _latent_array(latents, theta)
    ll = individual_loglik(theta, data, Z, rule)
    _raise_nonfinite(ll, "complete log-likelihood")
    return float(np.sum(ll))


def individual_grad(theta: Theta, data: Dataset, Z: np.ndarray, rule=None) -> np.ndarray:
    """Score of each individual's complete log-density in flat coordinates, (N, d)."""
    _check(theta, data, Z)
    lay = Layout(data.p)
    n, s2 = data.n, theta.sigma_sq
    G = np.empty((n, lay.d))

    dm_long = logistic_partials(data.obs_times[None, :], Z[:, None, :])
    m = Z[:, :1] * dm_long[0]
    r = data.y - m
    T = data.survival
    dm_T = logistic_partials(T, Z)
    m_T = Z[:, 0] * dm_T[0]
    H, H_m, H_dz3 = hz.hazard_integrals(T, theta, data.covariates, Z, rule)

    G[:, lay.beta] = data.covariates * (1.0 - H)[:, None]
    G[:, lay.alpha] = m_T - H_m
    dev = Z[:, :2] - theta.mu[:2]
    G[:, lay.p + 1:lay.p + 3] = dev / theta.gamma_sq
    G[:, lay.p + 3] = (np.sum(r * dm_long[2], axis=1) / s2
                       + theta.alpha * (dm_T[2] - H_dz3))
    G[:, lay.log_gamma_sq] = -0.5 + 0.5 * dev * dev / theta.gamma_sq
    G[:, lay.log_sigma_sq] = -0.5 * data.j + 0.5 * np.sum(r * r, axis=1) / s2
    return G


def complete_grad(theta: Theta, data: Dataset, latents, rule=None) -> np.ndarray:
    """Gradient of :func:`complete_loglik` with respect to the flat parameters."""
    Z = _latent_array(latents, theta)
    G = individual_grad(theta, data, Z, rule)
    _raise_nonfinite(G, "complete-data gradient")
    return G.sum(axis=0)
