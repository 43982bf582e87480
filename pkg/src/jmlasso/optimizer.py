"""Preconditioned stochastic proximal gradient (SPG-FIM) and its unpenalised variant.

One iteration:

1. one Metropolis-Hastings sweep over the latent vectors;
2. average complete-data score ``v_k`` over individuals;
3. stochastic-approximation update of the per-individual scores ``Delta_i``
   and of the Fisher information estimate ``FIM_k = mean(Delta_i Delta_i^T)``;
4. forward step ``theta + gamma_k (FIM_k + delta I)^-1 v_k`` (likelihood ascent);
5. soft-thresholding of the beta block with threshold ``gamma_k * lambda``.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from . import hazard as hz
from .exceptions import DimensionError, DomainError, NumericError
from .model import Dataset, Layout, Theta, flatten, full_latents, individual_grad, unflatten
from .sampler import IndividualStreams, MhState, adapt_proposal, mh_step

log = logging.getLogger(__name__)


def as_seed_sequence(seed) -> np.random.SeedSequence:
    if isinstance(seed, np.random.SeedSequence):
        return seed
    return np.random.SeedSequence(seed)


def soft_threshold(v, threshold: float) -> np.ndarray:
    """Proximal operator of ``threshold * ||.||_1``."""
    if threshold < 0:
        raise DomainError("threshold must be nonnegative")
    v = np.asarray(v, dtype=float)
    return np.sign(v) * np.maximum(np.abs(v) - threshold, 0.0)


def soft_threshold_scaled(v, thresholds) -> np.ndarray:
    """Coordinatewise soft-thresholding with per-coordinate thresholds."""
    t = np.asarray(thresholds, dtype=float)
    if np.any(t < 0):
        raise DomainError("thresholds must be nonnegative")
    v = np.asarray(v, dtype=float)
    return np.sign(v) * np.maximum(np.abs(v) - t, 0.0)


def backward_step(omega, beta_idx, thresholds) -> np.ndarray:
    """Soft-threshold the ``beta_idx`` slots of ``omega``; other slots pass through."""
    out = np.array(omega, dtype=float)
    out[beta_idx] = soft_threshold_scaled(out[beta_idx], thresholds)
    return out


@dataclass(frozen=True)
class StepSchedule:
    """Unit steps during warm-up, harmonic decay afterwards."""

    warmup: int = 1100

    def __call__(self, k: int) -> float:
        if k < 1:
            raise DomainError("iterations are numbered from 1")
        return 1.0 if k <= self.warmup else 1.0 / (k - self.warmup)


@dataclass
class FimState:
    delta: np.ndarray        # (N, d)
    fim: np.ndarray          # (d, d)
    damping: float = 1e-3

    @classmethod
    def zeros(cls, n: int, d: int, damping: float = 1e-3) -> "FimState":
        return cls(np.zeros((n, d)), np.zeros((d, d)), damping)


def update_fim(state: FimState, grads, gamma: float) -> FimState:
    grads = np.asarray(grads, dtype=float)
    if grads.shape != state.delta.shape:
        raise DimensionError(f"gradient block {grads.shape} != {state.delta.shape}")
    if not 0.0 < gamma <= 1.0:
        raise DomainError("gamma must lie in (0, 1]")
    delta = (1.0 - gamma) * state.delta + gamma * grads
    fim = delta.T @ delta / len(delta)
    fim = 0.5 * (fim + fim.T)
    return FimState(delta, fim, state.damping)


def shrinkage_weight(d: int, n: int) -> float:
    """Default off-diagonal shrinkage ``d / (n + d)``."""
    return d / (n + d)


@dataclass(frozen=True)
class Preconditioned:
    step: np.ndarray
    metric_diag: np.ndarray     # diagonal of the matrix actually inverted
    damping: float | None       # None: every factorisation failed, identity used


def precondition(fim: np.ndarray, v: np.ndarray, damping: float, shrinkage: float = 0.0,
                 diagonal=None, escalations: int = 8) -> Preconditioned:
    """Solve ``M x = v`` with ``M = (1 - s) FIM + (s + damping) diag(FIM)``.

    The damping is relative to the diagonal so that it acts evenly on
    parameters whose information differs by orders of magnitude. Rows and
    columns flagged in ``diagonal`` keep only their diagonal entry. Diagonal
    entries are floored at ``1e-12 * max(diag)`` so that ``M`` stays positive
    definite when a score component vanishes identically. On factorisation
    failure the damping is multiplied by 10, up to ``escalations`` times,
    before falling back to the identity.
    """
    diag = np.diag(fim).copy()
    if np.all(np.isfinite(diag)) and diag.max() > 0:
        diag = np.maximum(diag, 1e-12 * diag.max())
    core = (1.0 - shrinkage) * fim
    np.fill_diagonal(core, 0.0)
    if diagonal is not None and np.any(diagonal):
        core[diagonal, :] = 0.0
        core[:, diagonal] = 0.0
    delta = damping
    for _ in range(escalations + 1):
        md = (1.0 + delta) * diag
        try:
            c = cho_factor(core + np.diag(md), lower=True, check_finite=True)
            return Preconditioned(cho_solve(c, v), md, delta)
        except (LinAlgError, ValueError):
            delta *= 10.0
    return Preconditioned(v.copy(), np.ones_like(v), None)


@dataclass
class SpgOptions:
    damping: float = 1e-3
    # off-diagonal FIM shrinkage in [0, 1]; None picks d / (N + d)
    shrinkage: float | None = None
    # "diagonal" drops the beta rows/columns of the FIM apart from the diagonal
    beta_block: str = "diagonal"
    # "preconditioned": thresholds scaled by the inverse metric diagonal, so the
    # fixed point is the penalised-likelihood stationarity condition;
    # "euclidean": plain gamma * lambda threshold
    prox_metric: str = "preconditioned"
    # iterations run with the identity preconditioner before switching to the FIM
    identity_iters: int = 50
    # step scale applied to the raw score during those iterations; 0 freezes
    # the parameters while the latent chains burn in
    identity_step: float = 0.0
    target_accept: float = 0.4
    adapt_window: int = 50
    adapt_kappa: float = 1.0
    # adaptation stops here (defaults to the schedule warm-up)
    adapt_until: int | None = None
    quad_order: int = hz.DEFAULT_ORDER
    # start latents / proposal scale, e.g. carried over along a path
    init_latents: np.ndarray | None = None
    init_proposal_sd: np.ndarray | None = None


@dataclass
class FitTrace:
    names: list
    theta: list = field(default_factory=list)
    gamma: list = field(default_factory=list)
    grad_norm: list = field(default_factory=list)
    accept_rate: list = field(default_factory=list)
    active: list = field(default_factory=list)
    events: list = field(default_factory=list)
    final_latents: np.ndarray | None = None
    final_proposal_sd: np.ndarray | None = None

    def __len__(self):
        return len(self.theta)

    def append(self, theta, gamma, grad_norm, accept_rate, active):
        self.theta.append(theta.copy())
        self.gamma.append(gamma)
        self.grad_norm.append(grad_norm)
        self.accept_rate.append(accept_rate)
        self.active.append(active)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["k", "gamma", *self.names, "grad_norm", "accept_rate", "active"])
            for k, row in enumerate(self.theta, start=1):
                w.writerow([k, f"{self.gamma[k - 1]:.17g}", *(f"{x:.17g}" for x in row),
                            f"{self.grad_norm[k - 1]:.17g}",
                            f"{self.accept_rate[k - 1]:.17g}", self.active[k - 1]])


def _run(data: Dataset, theta0: Theta, lam: float, K: int, schedule: StepSchedule,
         seed, options: SpgOptions, free_beta: np.ndarray | None, prox: bool):
    if K < 1:
        raise DomainError("K must be >= 1")
    if lam < 0:
        raise DomainError("lambda must be nonnegative")
    if theta0.p != data.p:
        raise DimensionError(f"theta0 has p={theta0.p}, data has p={data.p}")
    lay = Layout(data.p)
    a, b = theta0.baseline_a, theta0.baseline_b
    rule = hz.gauss_legendre(options.quad_order)
    n = data.n

    free = np.ones(lay.d, dtype=bool)
    if free_beta is not None:
        free[lay.beta] = free_beta
    is_beta = np.zeros(lay.d, dtype=bool)
    is_beta[lay.beta] = True
    beta_free_idx = np.flatnonzero(is_beta[free])

    theta_vec = flatten(theta0)
    theta_vec[np.flatnonzero(~free)] = 0.0
    theta = unflatten(theta_vec, data.p, a, b)

    if options.init_latents is not None:
        z0 = np.asarray(options.init_latents, dtype=float)[:, :2]
    else:
        z0 = np.tile(theta.mu[:2], (n, 1))
    sd0 = (np.sqrt(theta.gamma_sq) / 2.0 if options.init_proposal_sd is None
           else np.asarray(options.init_proposal_sd, dtype=float))
    mh = MhState.initial(z0, sd0)
    streams = IndividualStreams(as_seed_sequence(seed), n)
    fim = FimState.zeros(n, int(free.sum()), options.damping)
    shrink = (shrinkage_weight(int(free.sum()), n) if options.shrinkage is None
              else options.shrinkage)
    adapt_until = schedule.warmup if options.adapt_until is None else options.adapt_until
    if options.beta_block not in ("diagonal", "full"):
        raise DomainError(f"unknown beta_block {options.beta_block!r}")
    if options.prox_metric not in ("preconditioned", "euclidean"):
        raise DomainError(f"unknown prox_metric {options.prox_metric!r}")
    diag_mask = is_beta[free] if options.beta_block == "diagonal" else None

    trace = FitTrace(lay.names())
    for k in range(1, K + 1):
        gamma = schedule(k)
        mh, _ = mh_step(mh, theta, data, streams, rule)
        if k <= adapt_until and k % options.adapt_window == 0:
            mh = adapt_proposal(mh, options.target_accept, options.adapt_kappa)

        Z = full_latents(mh.current, theta.mu[2])
        G = individual_grad(theta, data, Z, rule)[:, free]
        if not np.all(np.isfinite(G)):
            bad = int(np.flatnonzero(~np.isfinite(G).all(axis=1))[0])
            raise NumericError(f"non-finite score at iteration {k}", index=bad)
        v = G.mean(axis=0)
        fim = update_fim(fim, G, gamma)

        if k <= options.identity_iters:
            step = options.identity_step * v
            scale = np.full(len(v), options.identity_step)
        else:
            pre = precondition(fim.fim, v, fim.damping, shrink, diag_mask)
            step = pre.step
            scale = 1.0 / pre.metric_diag
            if pre.damping is None:
                trace.events.append((k, "identity fallback"))
                log.warning("FIM factorisation failed at iteration %d; identity used", k)
                scale = np.ones(len(v))
            elif pre.damping != fim.damping:
                trace.events.append((k, f"damping escalated to {pre.damping:g}"))
        if options.prox_metric == "euclidean":
            scale = np.ones(len(v))

        omega = theta_vec[free] + gamma * step
        if prox and beta_free_idx.size:
            omega = backward_step(omega, beta_free_idx, gamma * lam * scale[beta_free_idx])
        theta_vec = theta_vec.copy()
        theta_vec[free] = omega
        if not np.all(np.isfinite(theta_vec)):
            raise NumericError(f"parameter vector became non-finite at iteration {k}")
        theta = unflatten(theta_vec, data.p, a, b)
        trace.append(theta_vec, gamma, float(np.linalg.norm(v)), mh.acceptance_rate,
                     int(np.count_nonzero(theta_vec[lay.beta])))

    trace.final_latents = full_latents(mh.current, theta.mu[2])
    trace.final_proposal_sd = mh.proposal_sd.copy()
    return theta, trace


def spg_fim(data: Dataset, theta0: Theta, lam: float, K: int = 2000,
            schedule: StepSchedule | None = None, seed=0,
            options: SpgOptions | None = None) -> tuple[Theta, FitTrace]:
    """Lasso-penalised fit; returns the last iterate and the per-iteration trace."""
    return _run(data, theta0, lam, K, schedule or StepSchedule(), seed,
                options or SpgOptions(), None, prox=True)


def sg_fim(data: Dataset, theta0: Theta, support, K: int = 2000,
           schedule: StepSchedule | None = None, seed=0,
           options: SpgOptions | None = None) -> tuple[Theta, FitTrace]:
    """Unpenalised fit with beta restricted to ``support`` (0-based indices)."""
    free_beta = np.zeros(data.p, dtype=bool)
    support = np.asarray(sorted(support), dtype=int)
    if support.size and (support.min() < 0 or support.max() >= data.p):
        raise DomainError(f"support indices must lie in [0, {data.p})")
    free_beta[support] = True
    return _run(data, theta0, 0.0, K, schedule or StepSchedule(), seed,
                options or SpgOptions(), free_beta, prox=False)
