import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from jmlasso.exceptions import DimensionError, DomainError, NumericError
from jmlasso.model import (Dataset, LatentVector, Layout, Theta, complete_grad, complete_loglik,
                           flatten, full_latents, logistic, logistic_partials, loglik_terms,
                           unflatten)
from jmlasso.simulator import table1_theta

from conftest import random_instance, ref_complete_loglik

Z0 = np.array([0.3, 90.0, 7.5])


def fd_grad(theta, data, Z, h_rel=1e-5):
    v0 = flatten(theta)
    g = np.empty_like(v0)
    for k in range(len(v0)):
        h = h_rel * max(1.0, abs(v0[k]))
        vp, vm = v0.copy(), v0.copy()
        vp[k] += h
        vm[k] -= h
        tp = unflatten(vp, theta.p, theta.baseline_a, theta.baseline_b)
        tm = unflatten(vm, theta.p, theta.baseline_a, theta.baseline_b)
        g[k] = (complete_loglik(tp, data, Z[:, :2]) - complete_loglik(tm, data, Z[:, :2])) / (2 * h)
    return g


def grad_matches(g, fd, rel=1e-4, floor=1e-7):
    err = np.abs(g - fd)
    return np.all((err <= rel * np.abs(fd)) | (err <= floor))


# -- logistic -------------------------------------------------------------

def test_logistic_midpoint():
    assert logistic(90.0, Z0) == pytest.approx(0.15, abs=1e-15)
    assert logistic(42.0, [0.3, 42.0, 3.0]) == pytest.approx(0.15, abs=1e-15)


def test_logistic_upper_asymptote():
    assert 0.29 < logistic(90 + 20 * 7.5, Z0) < 0.3


def test_logistic_high_precision_oracle():
    with mpmath.workdps(50):
        want = mpmath.mpf("0.3") / (1 + mpmath.exp((mpmath.mpf(90) - 60) / mpmath.mpf("7.5")))
    assert logistic(60.0, Z0) == pytest.approx(float(want), rel=1e-14)


def test_logistic_rejects_zero_rate():
    with pytest.raises(DomainError):
        logistic(1.0, [0.3, 90.0, 0.0])
    with pytest.raises(DomainError):
        logistic_partials(1.0, [0.3, 90.0, 0.0])


def test_partials_at_midpoint():
    d = logistic_partials(90.0, Z0)
    assert d[0] == pytest.approx(0.5)
    assert d[1] == pytest.approx(-0.01, rel=1e-12)
    assert d[2] == pytest.approx(0.0, abs=1e-15)


def test_partials_match_finite_differences():
    h = 1e-6
    d = logistic_partials(75.0, Z0)
    for k in range(3):
        e = np.zeros(3)
        e[k] = h
        fd = (logistic(75.0, Z0 + e) - logistic(75.0, Z0 - e)) / (2 * h)
        assert d[k] == pytest.approx(fd, rel=1e-6)


@given(st.floats(0.01, 5), st.floats(-100, 100), st.floats(0.1, 20),
       st.lists(st.floats(-200, 200), min_size=2, max_size=20))
def test_logistic_monotone_and_bounded(z1, z2, z3, ts):
    t = np.unique(np.array(ts))
    m = logistic(t, np.array([z1, z2, z3]))
    assert np.all(np.diff(m) >= 0)
    assert np.all((m >= 0) & (m <= z1))


# -- parameter container ------------------------------------------------------

def test_theta_validation():
    th = table1_theta(4)
    with pytest.raises(DomainError):
        th.with_(sigma_sq=0.0)
    with pytest.raises(DomainError):
        th.with_(gamma_sq=np.array([1.0, -1.0]))
    with pytest.raises(DomainError):
        th.with_(baseline_a=0.0)
    with pytest.raises(DimensionError):
        th.with_(mu=np.zeros(2))


def test_table1_alpha_slot():
    v = flatten(table1_theta(100))
    assert len(v) == 107
    assert v[100] == 11.11


def test_unit_variance_gives_zero_log_slot():
    assert flatten(table1_theta(4).with_(sigma_sq=1.0))[-1] == 0.0


@settings(max_examples=50)
@given(st.integers(0, 8), st.integers(0, 2 ** 32 - 1))
def test_flatten_round_trip(p, seed):
    rng = np.random.default_rng(seed)
    v = rng.normal(0, 3, p + 7)
    th = unflatten(v, p, 80.0, 35.0)
    back = flatten(th)
    np.testing.assert_array_equal(back[:p + 4], v[:p + 4])
    np.testing.assert_allclose(back[p + 4:], v[p + 4:], rtol=1e-15, atol=1e-15)
    assert np.all(th.gamma_sq > 0) and th.sigma_sq > 0


def test_unflatten_length_mismatch():
    with pytest.raises(DimensionError):
        unflatten(np.zeros(9), 3, 80.0, 35.0)


def test_layout_names():
    lay = Layout(2)
    assert lay.names() == ["beta1", "beta2", "alpha", "mu1", "mu2", "mu3",
                           "log_gamma1_sq", "log_gamma2_sq", "log_sigma_sq"]


# -- dataset and latents ----------------------------------------------------

def test_dataset_validation():
    t = np.array([1.0, 2.0])
    with pytest.raises(DomainError):
        Dataset(np.array([2.0, 1.0]), np.zeros((1, 2)), [1.0], np.zeros((1, 0)))
    with pytest.raises(DomainError):
        Dataset(t, np.zeros((1, 2)), [0.0], np.zeros((1, 0)))
    with pytest.raises(DimensionError):
        Dataset(t, np.zeros((2, 2)), [1.0], np.zeros((1, 0)))


def test_latent_third_coordinate_pinned():
    th = table1_theta(4)
    lv = LatentVector.for_theta((0.2, 80.0), th)
    assert lv.z[2] == th.mu[2]
    Z = full_latents(np.array([[0.1, 2.0]]), 3.5)
    assert Z.tolist() == [[0.1, 2.0, 3.5]]


# -- complete log-likelihood ----------------------------------------------------------

def test_survival_term_reduces_to_weibull():
    a, b, T = 80.0, 35.0, 77.0
    th = Theta(a, b, np.zeros(1), 0.0, Z0, np.array([1e-2, 1.0]), 1.0)
    data = Dataset([1.0], [[0.0]], [T], [[0.4]])
    _, surv, _ = loglik_terms(th, data, full_latents([[0.3, 90.0]], 7.5))
    want = math.log(b * a ** -b * T ** (b - 1)) - (T / a) ** b
    assert surv[0] == pytest.approx(want, rel=1e-12)


def test_zero_residuals_longitudinal_term():
    th = Theta(80.0, 35.0, np.zeros(0), 0.0, Z0, np.array([1e-2, 1.0]), 1.0)
    t = np.linspace(50, 110, 4)
    Z = full_latents([[0.3, 90.0], [0.25, 85.0]], 7.5)
    y = logistic(t[None, :], Z[:, None, :])
    data = Dataset(t, y, [70.0, 75.0], np.zeros((2, 0)))
    long_, _, _ = loglik_terms(th, data, Z)
    assert long_.sum() == pytest.approx(-(2 * 4 / 2) * math.log(2 * math.pi), rel=1e-14)


def test_complete_loglik_matches_reference(table1_small):
    sim = table1_small
    th = sim.config.theta_true
    got = complete_loglik(th, sim.data, sim.latents)
    want = ref_complete_loglik(th, sim.data, sim.latents)
    assert got == pytest.approx(want, rel=1e-8)


def test_complete_loglik_accepts_latent_vectors(table1_small):
    sim = table1_small
    th = sim.config.theta_true
    lvs = [LatentVector.for_theta(z[:2], th) for z in sim.latents]
    assert complete_loglik(th, sim.data, lvs) == complete_loglik(th, sim.data, sim.latents)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_complete_loglik_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    th, data, Z = random_instance(rng, n=5)
    perm = rng.permutation(5)
    a = complete_loglik(th, data, Z)
    b = complete_loglik(th, data.subset(perm), Z[perm])
    assert a == pytest.approx(b, rel=1e-13, abs=1e-12)


def test_nonfinite_reports_individual():
    th = Theta(80.0, 35.0, np.array([1.0]), 0.0, Z0, np.array([1e-2, 1.0]), 1.0)
    data = Dataset([1.0], [[0.0], [0.0]], [70.0, 70.0], [[0.0], [1e4]])
    with pytest.raises(NumericError) as info:
        complete_loglik(th, data, full_latents([[0.3, 90.0]] * 2, 7.5))
    assert info.value.index == 1


# -- gradient -----------------------------------------------------------------

def test_beta_gradient_weibull_reduction():
    a, b, T, u = 80.0, 35.0, 81.0, 0.7
    th = Theta(a, b, np.zeros(1), 0.0, Z0, np.array([1e-2, 1.0]), 1.0)
    data = Dataset([1.0], [[0.0]], [T], [[u]])
    g = complete_grad(th, data, full_latents([[0.3, 90.0]], 7.5))
    assert g[0] == pytest.approx(u * (1 - (T / a) ** b), rel=1e-10)


def test_log_sigma_gradient_zero_residuals():
    th = Theta(80.0, 35.0, np.zeros(0), 1.0, Z0, np.array([1e-2, 1.0]), 0.5)
    t = np.linspace(50, 110, 6)
    Z = full_latents([[0.3, 90.0], [0.31, 88.0], [0.29, 91.0]], 7.5)
    data = Dataset(t, logistic(t[None, :], Z[:, None, :]), [70.0, 75.0, 80.0], np.zeros((3, 0)))
    g = complete_grad(th, data, Z)
    assert g[-1] == pytest.approx(-3 * 6 / 2, rel=1e-14)


def test_gradient_matches_fd_at_table1(table1_small):
    sim = table1_small
    th = sim.config.theta_true
    g = complete_grad(th, sim.data, sim.latents)
    fd = fd_grad(th, sim.data, sim.latents)
    assert grad_matches(g, fd)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_gradient_matches_fd_random(seed):
    th, data, Z = random_instance(np.random.default_rng(seed))
    g = complete_grad(th, data, Z)
    assert grad_matches(g, fd_grad(th, data, Z))
