"""Random-walk Metropolis-Hastings on the individual latent vectors.

Each call to :func:`mh_step` makes exactly one joint proposal on ``(Z_1, Z_2)``
per individual. Randomness comes from one dedicated stream per individual, so
the result does not depend on how individuals are grouped or ordered.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from scipy.special import ndtri

from .exceptions import DomainError
from .model import Dataset, Theta, full_latents, individual_loglik

_BLOCK = 256


class IndividualStreams:
    """Per-individual random streams, buffered in blocks of draws.

    Each individual owns a generator spawned from the master seed by index.
    A block holds ``_BLOCK`` steps worth of (2 normals, 1 uniform) per
    individual, drawn in a fixed order, so the sequence seen by individual
    ``i`` depends only on the master seed and ``i``.
    """

    def __init__(self, seed, n: int):
        ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
        self.generators = [np.random.default_rng(s) for s in ss.spawn(n)]
        self._pos = _BLOCK
        self._normals = None
        self._uniforms = None

    def __len__(self):
        return len(self.generators)

    def _refill(self):
        draws = [g.random((_BLOCK, 3)) for g in self.generators]
        block = np.stack(draws, axis=1)          # (_BLOCK, N, 3)
        # clip keeps ndtri finite; Generator.random may return exactly 0
        self._normals = ndtri(np.clip(block[..., :2], 1e-300, None))
        self._uniforms = block[..., 2]
        self._pos = 0

    def draw(self):
        """Return ``(normals (N, 2), uniforms (N,))`` for one MH step."""
        if self._pos >= _BLOCK:
            self._refill()
        k = self._pos
        self._pos += 1
        return self._normals[k], self._uniforms[k]

    def subset(self, idx) -> "IndividualStreams":
        """View on the streams of ``idx``; the generators are shared, not copied."""
        out = object.__new__(IndividualStreams)
        out.generators = [self.generators[i] for i in idx]
        out._pos = _BLOCK
        out._normals = out._uniforms = None
        return out


@dataclass
class MhState:
    current: np.ndarray           # (N, 2) latent (Z_1, Z_2)
    proposal_sd: np.ndarray       # (2,)
    accept_count: np.ndarray      # (N,) int
    attempt_count: np.ndarray     # (N,) int
    window_accepts: int = 0
    window_attempts: int = 0

    def __post_init__(self):
        self.current = np.array(self.current, dtype=float).reshape(-1, 2)
        self.proposal_sd = np.array(self.proposal_sd, dtype=float).reshape(2)
        if np.any(self.proposal_sd <= 0):
            raise DomainError("proposal standard deviations must be positive")

    @classmethod
    def initial(cls, z12, proposal_sd) -> "MhState":
        z12 = np.asarray(z12, dtype=float).reshape(-1, 2)
        n = len(z12)
        return cls(z12, proposal_sd, np.zeros(n, dtype=int), np.zeros(n, dtype=int))

    @classmethod
    def from_theta(cls, theta: Theta, n: int) -> "MhState":
        """Start every individual at the prior mean with prior-scaled proposals."""
        z12 = np.tile(theta.mu[:2], (n, 1))
        return cls.initial(z12, np.sqrt(theta.gamma_sq) / 2.0)

    @property
    def acceptance_rate(self) -> float:
        tot = self.attempt_count.sum()
        return float(self.accept_count.sum() / tot) if tot else 0.0

    def window_rate(self) -> float:
        return self.window_accepts / self.window_attempts if self.window_attempts else 0.0


def mh_step(state: MhState, theta: Theta, data: Dataset, streams: IndividualStreams,
            rule=None, log_target=None) -> tuple[MhState, np.ndarray]:
    """One random-walk MH proposal per individual.

    ``log_target(theta, data, Z)`` defaults to the complete-data log-density of
    each individual. Proposals with a non-finite target are rejected.
    Returns the new state and the boolean acceptance vector.
    """
    target = log_target or (lambda th, d, Z: individual_loglik(th, d, Z, rule))
    eps, u = streams.draw()
    mu3 = theta.mu[2]
    prop = state.current + eps * state.proposal_sd
    with np.errstate(all="ignore"):
        cur_ll = target(theta, data, full_latents(state.current, mu3))
        prop_ll = target(theta, data, full_latents(prop, mu3))
        log_ratio = prop_ll - cur_ll
    ok = np.isfinite(prop_ll)
    log_ratio = np.where(ok, log_ratio, -np.inf)
    # a non-finite current density means any finite proposal is accepted
    log_ratio = np.where(ok & ~np.isfinite(cur_ll), 0.0, log_ratio)
    with np.errstate(divide="ignore"):
        accept = np.log(u) < log_ratio
    new = np.where(accept[:, None], prop, state.current)
    n_acc = int(accept.sum())
    return MhState(
        current=new,
        proposal_sd=state.proposal_sd.copy(),
        accept_count=state.accept_count + accept,
        attempt_count=state.attempt_count + 1,
        window_accepts=state.window_accepts + n_acc,
        window_attempts=state.window_attempts + len(accept),
    ), accept


def adapt_proposal(state: MhState, target_rate: float = 0.4, kappa: float = 1.0,
                   observed_rate: float | None = None) -> MhState:
    """Rescale the proposal by ``exp(kappa * (observed - target))`` and reset the window."""
    if not 0.0 < target_rate < 1.0:
        raise DomainError("target acceptance rate must lie in (0, 1)")
    rate = state.window_rate() if observed_rate is None else observed_rate
    return MhState(
        current=state.current.copy(),
        proposal_sd=state.proposal_sd * np.exp(kappa * (rate - target_rate)),
        accept_count=state.accept_count.copy(),
        attempt_count=state.attempt_count.copy(),
    )
