"""Synthetic data from the joint longitudinal/survival model."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import hazard as hz
from .exceptions import DomainError, SaturationError
from .model import Dataset, Theta, full_latents, logistic


def table1_theta(p: int = 100) -> Theta:
    """Reference parameter values of the simulation study."""
    if p < 4:
        raise DomainError("the reference design needs p >= 4")
    beta = np.zeros(p)
    beta[:4] = [-2.0, -1.0, 1.0, 2.0]
    return Theta(
        baseline_a=80.0,
        baseline_b=35.0,
        beta=beta,
        alpha=11.11,
        mu=np.array([0.3, 90.0, 7.5]),
        gamma_sq=np.array([2.5e-3, 20.0]),
        sigma_sq=1e-3,
    )


@dataclass
class SimConfig:
    n: int = 100
    j: int = 20
    p: int = 100
    theta_true: Theta | None = None
    obs_window: tuple = (50.0, 110.0)
    obs_times: np.ndarray | None = None
    covariate_bounds: tuple = (-1.0, 1.0)
    seed: int = 0
    # sigma_sq = 0 gives noiseless observations; Theta itself forbids it
    noise_sd: float | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("n", "j", "p"):
            if int(getattr(self, name)) < 1:
                raise DomainError(f"{name.upper()} must be >= 1, got {getattr(self, name)}")
        if self.theta_true is None:
            self.theta_true = table1_theta(self.p)
        if self.theta_true.p != self.p:
            raise DomainError(f"theta_true has p={self.theta_true.p} but config has p={self.p}")
        lo, hi = self.covariate_bounds
        if not lo < hi:
            raise DomainError("covariate bounds must satisfy lo < hi")

    @classmethod
    def table1(cls, seed: int = 0, **overrides) -> "SimConfig":
        kw = dict(n=100, j=20, p=100)
        kw.update(overrides)
        if "theta_true" not in kw:
            kw["theta_true"] = table1_theta(kw["p"])
        return cls(seed=seed, **kw)

    def grid(self) -> np.ndarray:
        if self.obs_times is not None:
            return np.asarray(self.obs_times, dtype=float)
        return np.linspace(self.obs_window[0], self.obs_window[1], self.j)


@dataclass
class Simulation:
    data: Dataset
    latents: np.ndarray      # (N, 3) true latent vectors, diagnostics only
    uniforms: np.ndarray     # draws fed to the inverse-transform sampler
    config: SimConfig


def simulate(config: SimConfig, rule=None) -> Simulation:
    """Draw latents, longitudinal data, covariates and event times."""
    th = config.theta_true
    n, p = config.n, config.p
    streams = [np.random.default_rng(s) for s in np.random.SeedSequence(config.seed).spawn(4)]
    z_rng, eps_rng, u_rng, t_rng = streams

    z12 = th.mu[:2] + np.sqrt(th.gamma_sq) * z_rng.standard_normal((n, 2))
    Z = full_latents(z12, th.mu[2])
    t = config.grid()
    sd = np.sqrt(th.sigma_sq) if config.noise_sd is None else config.noise_sd
    y = logistic(t[None, :], Z[:, None, :]) + sd * eps_rng.standard_normal((n, len(t)))
    lo, hi = config.covariate_bounds
    U = u_rng.uniform(lo, hi, size=(n, p))
    # open interval: Generator.random can return exactly 0
    uni = 1.0 - t_rng.random(n)
    try:
        T = hz.sample_survival_times(th, U, Z, uni, rule)
    except SaturationError as exc:
        raise SaturationError(f"survival sampler saturated: {exc}", index=exc.index) from exc
    return Simulation(Dataset(t, y, T, U), Z, uni, config)
