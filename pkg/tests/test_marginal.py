import math

import numpy as np
import pytest

from jmlasso import marginal as mg
from jmlasso.exceptions import DomainError, NumericError
from jmlasso.model import Dataset, Theta, conditional_loglik, full_latents
from jmlasso.optimizer import StepSchedule, sg_fim
from jmlasso.simulator import SimConfig, simulate, table1_theta

TINY = 1e-300


def one_latent_toy():
    """One individual, one observation, alpha = 0, p = 0; only Z1 varies."""
    theta = Theta(80.0, 35.0, np.zeros(0), 0.0, np.array([0.3, 90.0, 7.5]),
                  np.array([2.5e-3, TINY]), 1e-3)
    data = Dataset([95.0], [[0.21]], [85.0], np.zeros((1, 0)))
    return theta, data


def toy_truth(theta, data, nodes=10_000):
    """Trapezoid rule over Z1 on +-10 prior sd."""
    sd = math.sqrt(theta.gamma_sq[0])
    z1 = theta.mu[0] + sd * np.linspace(-10, 10, nodes)
    Z = np.column_stack([z1, np.full(nodes, theta.mu[1]), np.full(nodes, theta.mu[2])])
    cond = conditional_loglik(theta, data, Z[:, None, :])[:, 0]
    prior = -0.5 * math.log(2 * math.pi * theta.gamma_sq[0]) - 0.5 * (z1 - theta.mu[0]) ** 2 / sd ** 2
    logf = cond + prior
    c = logf.max()
    return c + math.log(np.trapezoid(np.exp(logf - c), z1))


def test_toy_matches_quadrature():
    theta, data = one_latent_toy()
    est = mg.log_marginal_mc(theta, data, S=100_000, seed=1)
    truth = toy_truth(theta, data)
    assert abs(est - truth) <= 1e-2 * abs(truth)


def test_degenerate_prior_equals_plugin():
    theta = table1_theta(4).with_(gamma_sq=np.array([TINY, TINY]))
    sim = simulate(SimConfig.table1(seed=3, n=5, p=4))
    plug = conditional_loglik(theta, sim.data, full_latents(np.tile(theta.mu[:2], (5, 1)),
                                                            theta.mu[2])).sum()
    for S in (1, 7, 50):
        assert mg.log_marginal_mc(theta, sim.data, S, seed=S) == pytest.approx(plug, rel=1e-14)


def test_standard_error_follows_root_s():
    sim = simulate(SimConfig.table1(seed=6, n=30, p=4))
    th = sim.config.theta_true
    se1 = np.mean([mg.log_marginal_estimate(th, sim.data, 400, seed=s).mc_se for s in range(20)])
    se2 = np.mean([mg.log_marginal_estimate(th, sim.data, 800, seed=100 + s).mc_se
                   for s in range(20)])
    assert 1.3 <= se1 / se2 <= 1.7


def test_reported_se_matches_replicate_spread():
    sim = simulate(SimConfig.table1(seed=6, n=30, p=4))
    th = sim.config.theta_true
    ests = [mg.log_marginal_estimate(th, sim.data, 400, seed=s) for s in range(40)]
    spread = np.std([e.value for e in ests], ddof=1)
    reported = np.mean([e.mc_se for e in ests])
    assert 0.5 < spread / reported < 2.0


def test_exchangeable_in_draws():
    sim = simulate(SimConfig.table1(seed=2, n=8, p=4))
    th = sim.config.theta_true
    rng = np.random.default_rng(0)
    eps = rng.standard_normal((300, 8, 2))
    a = mg.log_marginal_estimate(th, sim.data, draws=eps).value
    b = mg.log_marginal_estimate(th, sim.data, draws=eps[rng.permutation(300)]).value
    assert a == pytest.approx(b, rel=1e-13)
    assert mg.log_marginal_mc(th, sim.data, 300, seed=5) == mg.log_marginal_mc(th, sim.data, 300,
                                                                               seed=5)


def test_true_theta_beats_shifted_mu2():
    wins = 0
    for seed in range(20):
        sim = simulate(SimConfig.table1(seed=seed, n=50, p=4))
        th = sim.config.theta_true
        shifted = th.with_(mu=th.mu + np.array([0.0, 10.0, 0.0]))
        wins += mg.log_marginal_mc(th, sim.data, 500, seed) > mg.log_marginal_mc(
            shifted, sim.data, 500, seed)
    assert wins >= 19


def test_dead_individual_is_named():
    th = table1_theta(4).with_(beta=np.array([1.0, 0.0, 0.0, 0.0]))
    sim = simulate(SimConfig.table1(seed=1, n=5, p=4))
    U = sim.data.covariates.copy()
    U[3, 0] = 1e4
    data = Dataset(sim.data.obs_times, sim.data.y, sim.data.survival, U)
    with pytest.raises(NumericError) as info:
        mg.log_marginal_mc(th, data, 20, seed=0)
    assert info.value.index == 3


def test_bad_arguments():
    theta, data = one_latent_toy()
    with pytest.raises(DomainError):
        mg.log_marginal_mc(theta, data, 0)
    with pytest.raises(DomainError):
        mg.active_count([0.0], -1.0)
    with pytest.raises(DomainError):
        mg.log_marginal_estimate(theta, data, draws=np.zeros((3, 2, 2)))


# -- BIC -------------------------------------------------------------------------

def test_bic_arithmetic():
    rec = mg.BicRecord.build(0.1, -500.0, 4, 100)
    assert rec.bic == pytest.approx(1018.42, abs=5e-3)
    assert rec.bic == -2 * rec.log_marginal + rec.active_count * math.log(100)


def test_bic_empty_support():
    sim = simulate(SimConfig.table1(seed=1, n=10, p=4))
    th = sim.config.theta_true.with_(beta=np.zeros(4))
    rec = mg.bic(th, sim.data, 1.0, S=50, seed=0)
    assert rec.active_count == 0
    assert rec.bic == -2 * rec.log_marginal


def test_active_count_tolerance():
    assert mg.active_count([0.0, 1e-9, -2e-8, 0.5], 1e-8) == 2
    assert mg.active_count([0.0, 1e-9], 0.0) == 1


def test_write_bic_csv(tmp_path):
    recs = [mg.BicRecord.build(0.5, -10.0, 0, 10, 0.1), mg.BicRecord.build(0.1, -9.0, 2, 10, 0.2)]
    mg.write_bic_csv(recs, tmp_path / "bic.csv")
    rows = (tmp_path / "bic.csv").read_text().splitlines()
    assert rows[0] == "lambda,log_marginal,mc_se,k,bic"
    assert len(rows) == 3
    assert float(rows[2].split(",")[4]) == recs[1].bic


@pytest.mark.slow
def test_bic_prefers_true_support_over_noise_extension():
    """Refits on the true support versus the true support plus 4 noise coordinates."""
    wins = 0
    for seed in range(10):
        sim = simulate(SimConfig.table1(seed=500 + seed))
        th = sim.config.theta_true
        extra = (0, 1, 2, 3, 10, 20, 30, 40)
        small, _ = sg_fim(sim.data, th, (0, 1, 2, 3), 1000, StepSchedule(550), seed=seed)
        big, _ = sg_fim(sim.data, th, extra, 1000, StepSchedule(550), seed=seed)
        b_small = mg.bic(small, sim.data, 0.0, 1000, seed)
        b_big = mg.bic(big, sim.data, 0.0, 1000, seed)
        wins += b_small.bic < b_big.bic
    assert wins >= 9
