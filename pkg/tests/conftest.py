import math

import numpy as np
import pytest
from scipy import integrate

from jmlasso.model import Dataset, Theta
from jmlasso.simulator import SimConfig, simulate, table1_theta

_ACCEPTANCE: list = []


def record_criterion(number: int, passed: bool, detail: str) -> None:
    _ACCEPTANCE.append((number, passed, detail))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, passed, detail in sorted(_ACCEPTANCE):
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")


@pytest.fixture
def acceptance():
    return record_criterion


# -- reference implementation (plain loops, adaptive quadrature) ------------

def ref_logistic(t, z):
    return z[0] / (1.0 + math.exp((z[1] - t) / z[2]))


def ref_hazard(s, theta, u, z):
    a, b = theta.baseline_a, theta.baseline_b
    eta = float(np.dot(theta.beta, u))
    return b / a * (s / a) ** (b - 1) * math.exp(eta + theta.alpha * ref_logistic(s, z))


def ref_cumhaz(t, theta, u, z):
    # split at the Weibull scale where the integrand turns steep
    a = theta.baseline_a
    pts = [x for x in (0.5 * a, 0.9 * a, a) if x < t]
    val, _ = integrate.quad(ref_hazard, 0.0, t, args=(theta, u, z), epsabs=0.0,
                            epsrel=1e-13, limit=500, points=pts or None)
    return val


def ref_complete_loglik(theta, data, Z):
    total = 0.0
    s2 = theta.sigma_sq
    for i in range(data.n):
        z = Z[i]
        for t, y in zip(data.obs_times, data.y[i]):
            r = y - ref_logistic(t, z)
            total += -0.5 * math.log(2 * math.pi * s2) - 0.5 * r * r / s2
        T = data.survival[i]
        total += math.log(ref_hazard(T, theta, data.covariates[i], z))
        total -= ref_cumhaz(T, theta, data.covariates[i], z)
        for k in range(2):
            g = theta.gamma_sq[k]
            d = z[k] - theta.mu[k]
            total += -0.5 * math.log(2 * math.pi * g) - 0.5 * d * d / g
    return total


def random_instance(rng, n=None, j=None, p=None):
    """Small random (theta, data, Z) with values in a numerically sane range."""
    n = n or int(rng.integers(1, 6))
    j = j or int(rng.integers(1, 6))
    p = p if p is not None else int(rng.integers(0, 6))
    theta = Theta(
        baseline_a=float(rng.uniform(60, 100)),
        baseline_b=float(rng.uniform(2, 35)),
        beta=rng.uniform(-1, 1, p),
        alpha=float(rng.uniform(-5, 12)),
        mu=np.array([rng.uniform(0.1, 0.5), rng.uniform(70, 100), rng.uniform(4, 10)]),
        gamma_sq=np.array([rng.uniform(1e-3, 1e-2), rng.uniform(5, 30)]),
        sigma_sq=float(rng.uniform(1e-3, 1e-1)),
    )
    t = np.sort(rng.uniform(40, 120, j)) + np.arange(j) * 1e-3
    Z = np.column_stack([theta.mu[0] + rng.normal(0, 0.05, n),
                         theta.mu[1] + rng.normal(0, 4, n),
                         np.full(n, theta.mu[2])])
    y = Z[:, :1] / (1 + np.exp((Z[:, 1:2] - t) / Z[:, 2:3])) + rng.normal(0, 0.05, (n, j))
    T = theta.baseline_a * rng.uniform(0.6, 1.1, n)
    U = rng.uniform(-1, 1, (n, p))
    return theta, Dataset(t, y, T, U), Z


@pytest.fixture(scope="session")
def table1_small():
    """Three individuals simulated at the reference parameter values."""
    sim = simulate(SimConfig.table1(seed=5, n=3, p=6))
    return sim


@pytest.fixture(scope="session")
def table1_sim():
    return simulate(SimConfig.table1(seed=2024))


@pytest.fixture
def theta_table1():
    return table1_theta()
