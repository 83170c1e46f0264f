import numpy as np
import pytest

from splitsmc import (CsmcLikelihood, EstimatorAbort, InvalidInputError, ObservationScheme, SpsaConfig,
                      bridging_overhead, gaussian_log_prior, kalman_log_likelihood, make_family, pmmh,
                      simulate_path, spsa_gradient, spsa_initialize_bridged, spsa_maximize)
from splitsmc.errors import ParticleCollapseError

TARGET = np.array([1.0, 2.0])


def batch_means_se(x, n_batches=30):
    x = x[: len(x) // n_batches * n_batches].reshape(n_batches, -1, *x.shape[1:])
    return x.mean(axis=1).std(axis=0, ddof=1) / np.sqrt(n_batches)


def noisy_quadratic(theta, rng):
    return -float(np.sum((theta - TARGET) ** 2)) + 0.01 * rng.standard_normal()


@pytest.mark.parametrize("scaling", ["identity", "adaptive"])
def test_spsa_finds_quadratic_maximum(scaling):
    cfg = SpsaConfig(a=0.5, c=0.1, n_iter=500, scaling=scaling, max_step=0.5)
    res = spsa_maximize(noisy_quadratic, [0.0, 0.0], cfg, np.random.default_rng(0))
    np.testing.assert_allclose(res.theta, TARGET, atol=1e-2)
    assert res.trace.shape == (501, 2)
    assert res.n_measurements == 500 * (2 if scaling == "identity" else 5)
    if scaling == "adaptive":
        # curvature of the concave objective
        np.testing.assert_allclose(res.hessian, [-2.0, -2.0], rtol=0.2)


def test_spsa_gradient_is_unbiased():
    H = np.array([[-2.0, 0.5], [0.5, -1.0]])
    g0 = np.array([3.0, -4.0])

    def f(theta, rng):
        return float(g0 @ theta + 0.5 * theta @ H @ theta)

    theta = np.array([0.3, -0.2])
    # the Monte Carlo standard error is about 1% of each component here
    rng = np.random.default_rng(2)
    est = np.mean([spsa_gradient(f, theta, 0.05, rng) for _ in range(10_000)], axis=0)
    true = g0 + H @ theta
    np.testing.assert_allclose(est, true, rtol=0.02)


def test_spsa_common_random_numbers():
    # a measurement that is pure noise in the seed cancels exactly
    seen = []

    def f(theta, rng):
        u = rng.standard_normal()
        seen.append(u)
        return u

    g = spsa_gradient(f, np.zeros(3), 0.1, np.random.default_rng(0))
    np.testing.assert_array_equal(g, np.zeros(3))
    assert seen[0] == seen[1]


def test_spsa_aborts_on_nonfinite():
    cfg = SpsaConfig(n_iter=5)
    with pytest.raises(EstimatorAbort):
        spsa_maximize(lambda th, rng: np.nan, [0.0], cfg, np.random.default_rng(0))


def test_spsa_retries_once():
    calls = {"n": 0}

    def flaky(theta, rng):
        calls["n"] += 1
        return np.nan if calls["n"] == 1 else -float(theta @ theta)

    res = spsa_maximize(flaky, [0.5], SpsaConfig(n_iter=3), np.random.default_rng(0))
    assert res.n_measurements == 2 * 3 + 2


def test_spsa_zero_iterations_and_config_checks():
    res = spsa_maximize(noisy_quadratic, [0.2, 0.1], SpsaConfig(n_iter=0), np.random.default_rng(0))
    np.testing.assert_array_equal(res.theta, [0.2, 0.1])
    with pytest.raises(InvalidInputError):
        SpsaConfig(a=0.0)
    with pytest.raises(InvalidInputError):
        SpsaConfig(scaling="newton")


def test_bridging_overhead():
    assert bridging_overhead(1) == 1.0
    assert bridging_overhead(4) == pytest.approx(1.125)
    with pytest.raises(InvalidInputError):
        bridging_overhead(0)
    theta0 = np.array([0.3, 0.4])
    out = spsa_initialize_bridged(noisy_quadratic, theta0, SpsaConfig(n_iter=10), np.random.default_rng(0), 1)
    np.testing.assert_array_equal(out, theta0)
    moved = spsa_initialize_bridged(noisy_quadratic, theta0, SpsaConfig(n_iter=50), np.random.default_rng(0), 4)
    assert np.sum((moved - TARGET) ** 2) < np.sum((theta0 - TARGET) ** 2)


def test_pmmh_with_flat_likelihood_samples_the_prior():
    prior = gaussian_log_prior(0.5, 2.0)
    res = pmmh(prior, 2.0, [0.0], lambda th, rng: 0.0, 20_000, np.random.default_rng(0))
    draws = res.chain[2000:, 0]
    assert draws.mean() == pytest.approx(0.5, abs=0.15)
    assert draws.std() == pytest.approx(2.0, rel=0.08)
    assert 0.2 < res.acceptance_rate < 0.8


def test_pmmh_conjugate_posterior_with_noisy_likelihood():
    """An unbiased but noisy likelihood still targets the exact posterior."""
    y = np.random.default_rng(5).normal(1.0, 1.0, 20)
    s2 = 0.3 ** 2

    def noisy(theta, rng):
        exact = -0.5 * np.sum((y - theta[0]) ** 2)
        # log-normal noise with mean one on the likelihood scale
        return exact + 0.3 * rng.standard_normal() - 0.5 * s2

    res = pmmh(gaussian_log_prior(0.0, 1.0), 0.4, [0.0], noisy, 30_000, np.random.default_rng(2))
    post_var = 1.0 / (1.0 + y.size)
    post_mean = post_var * y.sum()
    draws = res.chain[3000:, 0]
    assert draws.mean() == pytest.approx(post_mean, abs=0.04)
    assert draws.var() == pytest.approx(post_var, rel=0.2)


def test_pmmh_rejects_and_counts_failures():
    def fails_right(theta, rng):
        if theta[0] > 1.0:
            raise ParticleCollapseError("collapsed", step=0)
        return 0.0

    res = pmmh(gaussian_log_prior(), 1.0, [0.0], fails_right, 2000, np.random.default_rng(0))
    assert res.n_failures > 0
    assert res.chain.max() <= 1.0


def test_pmmh_zero_iterations_and_bad_start():
    res = pmmh(gaussian_log_prior(), 0.1, [0.0], lambda th, rng: 0.0, 0, np.random.default_rng(0))
    assert res.chain.shape == (0, 1) and np.isnan(res.acceptance_rate)
    with pytest.raises(EstimatorAbort):
        pmmh(gaussian_log_prior(), 0.1, [0.0], lambda th, rng: -np.inf, 5, np.random.default_rng(0))
    with pytest.raises(InvalidInputError):
        pmmh(gaussian_log_prior(), 0.0, [0.0], lambda th, rng: 0.0, 5, np.random.default_rng(0))


def test_csmc_likelihood_failure_is_minus_infinity():
    fam = make_family("cubic")
    obs = ObservationScheme("full", (0,), 0.1, 1)
    # outside the image of the half-step flow for Strang at this step
    like = CsmcLikelihood(fam, "strang", obs, np.array([[0.0], [10.0], [0.0]]))
    assert like(np.log([1.0]), np.random.default_rng(0)) == -np.inf
    assert like.n_failures == 1 and like.last_error is not None
    with pytest.raises(InvalidInputError):
        like(np.zeros(2), np.random.default_rng(0))


def test_csmc_likelihood_matches_kalman_for_ou():
    fam = make_family("ou2")
    theta = fam.to_log([0.6, 0.5])
    path = simulate_path(fam(theta), "lt", [0.2, -0.1], 0.25, 30, 1, np.random.default_rng(3)).states
    obs = ObservationScheme("partial", (0,), 0.25, 1)
    like = CsmcLikelihood(fam, "lt", obs, path[:, [0]], N=10, warm_start=True)
    m = fam(theta)
    ref = kalman_log_likelihood(m.matrix_exponential(0.25), m.integrated_covariance(0.25), path[:, [0]],
                                (0,), np.zeros(1), np.eye(1))
    assert like(theta, np.random.default_rng(0)) == pytest.approx(ref, abs=1e-4)
    assert like(theta, np.random.default_rng(1)) == pytest.approx(ref, abs=1e-4)
    assert like.last_report.n_iterations <= 2


@pytest.mark.slow
def test_pmmh_csmc_posterior_matches_exact_likelihood():
    fam = make_family("ou2")
    theta = fam.to_log([0.6, 0.5])
    path = simulate_path(fam(theta), "lt", [0.2, -0.1], 0.25, 40, 1, np.random.default_rng(3)).states
    v = path[:, [0]]
    obs = ObservationScheme("partial", (0,), 0.25, 1)

    def exact(th, rng):
        m = fam(th)
        return kalman_log_likelihood(m.matrix_exponential(0.25), m.integrated_covariance(0.25), v,
                                     (0,), np.zeros(1), np.eye(1))

    prior = gaussian_log_prior(0.0, 1.0)
    a = pmmh(prior, 0.25, theta, exact, 6000, np.random.default_rng(0))
    b = pmmh(prior, 0.25, theta, CsmcLikelihood(fam, "lt", obs, v, N=10), 6000, np.random.default_rng(1))
    ca, cb = a.chain[600:], b.chain[600:]
    se = np.hypot(batch_means_se(ca), batch_means_se(cb))
    assert np.all(np.abs(ca.mean(axis=0) - cb.mean(axis=0)) < 3 * se)
