"""Monte-Carlo marginal log-likelihood and the BIC used to choose lambda."""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from . import hazard as hz
from .exceptions import DomainError, NumericError
from .model import Dataset, Theta, conditional_loglik


@dataclass(frozen=True)
class MarginalEstimate:
    value: float
    mc_se: float
    per_individual: np.ndarray


@dataclass(frozen=True)
class BicRecord:
    lam: float
    log_marginal: float
    active_count: int
    bic: float
    mc_se: float = float("nan")
    n: int = 0

    @classmethod
    def build(cls, lam, log_marginal, active_count, n, mc_se=float("nan")) -> "BicRecord":
        return cls(float(lam), float(log_marginal), int(active_count),
                   -2.0 * log_marginal + active_count * np.log(n), float(mc_se), int(n))


def log_marginal_estimate(theta: Theta, data: Dataset, S: int = 1000, seed=0,
                          rule=None, chunk: int = 128, draws=None) -> MarginalEstimate:
    """Estimate ``log int g(X | Z) p(Z) dZ`` by sampling ``Z`` from its prior.

    The inner average runs in log space. The reported standard error is the
    delta-method error of each individual's log-mean, combined over
    individuals. ``draws`` optionally supplies the standard-normal array of
    shape ``(S, N, 2)`` instead of generating it from ``seed``.
    """
    n = data.n
    if draws is None:
        if S < 1:
            raise DomainError("S must be >= 1")
        eps = np.random.default_rng(seed).standard_normal((S, n, 2))
    else:
        eps = np.asarray(draws, dtype=float)
        if eps.ndim != 3 or eps.shape[1:] != (n, 2):
            raise DomainError(f"draws must have shape (S, {n}, 2), got {eps.shape}")
        S = eps.shape[0]
    rule = rule or hz.gauss_legendre()
    z12 = theta.mu[:2] + np.sqrt(theta.gamma_sq) * eps
    cond = np.empty((S, n))
    for lo in range(0, S, chunk):
        zb = z12[lo:lo + chunk]
        Z = np.concatenate([zb, np.full(zb.shape[:-1] + (1,), theta.mu[2])], axis=-1)
        with np.errstate(all="ignore"):
            cond[lo:lo + chunk] = conditional_loglik(theta, data, Z, rule)
    cond = np.where(np.isnan(cond), -np.inf, cond)
    dead = ~np.isfinite(cond).any(axis=0) | np.isposinf(cond).any(axis=0)
    if dead.any():
        raise NumericError("no finite conditional density among the Monte-Carlo draws",
                           index=int(np.flatnonzero(dead)[0]))
    per = logsumexp(cond, axis=0) - np.log(S)
    if S > 1:
        w = np.exp(cond - cond.max(axis=0))
        rel = w.std(axis=0, ddof=1) / (np.sqrt(S) * w.mean(axis=0))
        se = float(np.sqrt(np.sum(rel ** 2)))
    else:
        se = float("nan")
    return MarginalEstimate(float(per.sum()), se, per)


def log_marginal_mc(theta: Theta, data: Dataset, S: int = 1000, seed=0, rule=None) -> float:
    return log_marginal_estimate(theta, data, S, seed, rule).value


def active_count(beta, zero_tol: float = 1e-8) -> int:
    if zero_tol < 0:
        raise DomainError("zero_tol must be nonnegative")
    return int(np.sum(np.abs(np.asarray(beta)) > zero_tol))


def bic(theta_hat: Theta, data: Dataset, lam: float, S: int = 1000, seed=0,
        zero_tol: float = 1e-8, rule=None) -> BicRecord:
    """``-2 log L_marg + k log N`` with ``k`` the number of nonzero betas."""
    est = log_marginal_estimate(theta_hat, data, S, seed, rule)
    k = active_count(theta_hat.beta, zero_tol)
    return BicRecord.build(lam, est.value, k, data.n, est.mc_se)


def write_bic_csv(records, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["lambda", "log_marginal", "mc_se", "k", "bic"])
        for r in records:
            w.writerow([f"{r.lam:.17g}", f"{r.log_marginal:.17g}", f"{r.mc_se:.17g}",
                        r.active_count, f"{r.bic:.17g}"])
