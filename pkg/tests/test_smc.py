import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from splitsmc import (InvalidInputError, ParticleCollapseError, PolicySet, QuadraticLogPolicy, bpf,
                      bridged_full, coarse_policies, csmc, cubic_model, fhn_model, fit_policies,
                      kalman_log_likelihood, latent_coordinate_map, optimal_log_policy, partial_bridged,
                      ou_model, partial_unbridged, particle_filter, simulate_path, twist)
from splitsmc import _accel
from splitsmc.feynman_kac import _Builder, _twist_buffers
from splitsmc.schemes import mean_flow

IDENTITY_FLOW = mean_flow(ou_model([[0.0]], [[1.0]]), "lt", 1.0)


@pytest.fixture(scope="module")
def ou_fk(ou, ou_data):
    return partial_unbridged(ou, "lt", ou_data, (0,), 0.2)


@pytest.fixture(scope="module")
def kalman_ref(ou, ou_data):
    F, Q = ou.matrix_exponential(0.2), ou.integrated_covariance(0.2)
    return kalman_log_likelihood(F, Q, ou_data, (0,), np.zeros(1), np.eye(1))


def optimal_policies(ou, data, T):
    F, Q = ou.matrix_exponential(0.2), ou.integrated_covariance(0.2)
    return [QuadraticLogPolicy(P, b, c) for P, b, c in (optimal_log_policy(F, Q, data, (0,), k) for k in range(T))]


@given(st.integers(0, 2**32 - 1), st.integers(2, 40))
def test_weights_normalized_and_ess_bounded(ou_fk, seed, N):
    ens = particle_filter(ou_fk, N, np.random.default_rng(seed)).ensemble
    for k in range(ou_fk.T):
        assert ens.weights(k).sum() == pytest.approx(1.0, abs=1e-12)
        assert 1.0 - 1e-9 <= ens.ess(k) <= N + 1e-9


def test_single_step_model():
    # one Gaussian step with a Gaussian potential: Z is the predictive density of y
    b = _Builder(1, IDENTITY_FLOW, 1)
    b.step(1, np.array([[0.5]]), mean=np.array([0.2]))
    b.potential(0, np.array([1.0]), np.eye(1), np.array([[0.3]]))
    fk = b.build(0.0, "toy")
    expected = -0.5 * 0.8 ** 2 / 0.8 - 0.5 * np.log(2 * np.pi * 0.8)
    est = np.mean([np.exp(bpf(fk, 4000, np.random.default_rng(s))) for s in range(5)])
    assert np.log(est) == pytest.approx(expected, abs=0.02)
    rep = csmc(fk, 5, np.random.default_rng(0), max_iters=3, tol=1e-10)
    # exact up to the ridge term of the regression
    assert rep.log_Z == pytest.approx(expected, abs=1e-7)


def test_bpf_unbiased_against_kalman(ou_fk, kalman_ref):
    z = np.array([bpf(ou_fk, 50, np.random.default_rng(s)) for s in range(400)])
    ratio = np.exp(z - kalman_ref)
    assert abs(ratio.mean() - 1.0) < 4 * ratio.std() / np.sqrt(ratio.size)


def test_twisted_filter_unbiased(ou, ou_data, ou_fk, kalman_ref):
    """Any fixed admissible policy set leaves the estimator of Z unbiased."""
    pols = optimal_policies(ou, ou_data, ou_fk.T)
    rough = [QuadraticLogPolicy(0.5 * p.P, 0.8 * p.b, p.c) for p in pols]
    tm = twist(ou_fk, rough)
    z = np.array([particle_filter(tm, 5, np.random.default_rng(s)).log_Z for s in range(400)])
    ratio = np.exp(z - kalman_ref)
    assert abs(ratio.mean() - 1.0) < 4 * ratio.std() / np.sqrt(ratio.size) + 1e-12


def test_optimal_policies_give_zero_variance(ou, ou_data, ou_fk, kalman_ref):
    tm = twist(ou_fk, optimal_policies(ou, ou_data, ou_fk.T))
    z = np.array([particle_filter(tm, 2, np.random.default_rng(s)).log_Z for s in range(100)])
    np.testing.assert_allclose(z, kalman_ref, atol=1e-10)
    assert np.var(z) < 1e-20


def test_fit_recovers_optimal_policies(ou, ou_data, ou_fk):
    opt = optimal_policies(ou, ou_data, ou_fk.T)
    ens = particle_filter(ou_fk, 200, np.random.default_rng(0)).ensemble
    fitted = fit_policies(ens, ou_fk).policies
    assert fitted.n_fallback == 0
    for k, p in enumerate(opt):
        assert fitted.P[k, 0, 0] == pytest.approx(p.P[0, 0], abs=1e-6)
        assert fitted.b[k, 0] == pytest.approx(p.b[0], abs=1e-6)
        assert fitted.c[k] == pytest.approx(p.c, abs=1e-6)


def test_constant_potentials_fit_flat_policies():
    b = _Builder(1, IDENTITY_FLOW, 3)
    b.step(1, np.eye(1), mean=np.zeros(1))
    b.step(1, np.eye(1) * 0.5, Q=np.eye(1) * 0.9, o=np.zeros(1))
    b.step(1, np.eye(1) * 0.5, Q=np.eye(1) * 0.9, o=np.zeros(1))
    fk = b.build(0.0, "no potentials")
    fitted = fit_policies(particle_filter(fk, 50, np.random.default_rng(0)).ensemble, fk).policies
    np.testing.assert_allclose(fitted.P, 0.0, atol=1e-9)
    np.testing.assert_allclose(fitted.b, 0.0, atol=1e-9)
    np.testing.assert_allclose(fitted.c, 0.0, atol=1e-9)


def test_non_concave_fit_falls_back():
    b = _Builder(1, IDENTITY_FLOW, 1)
    b.step(1, np.eye(1), mean=np.zeros(1))
    b.potential(0, np.zeros(1), np.eye(1), np.eye(1))
    fk = b.build(0.0, "convex")
    # a negative precision turns the potential into exp(+3 x^2 / 2), so the fitted policy is inadmissible
    pot = list(fk.pot)
    pot[6] = -3.0 * fk.gCi
    X = np.random.default_rng(0).standard_normal((1, 30, 1))
    pol = PolicySet.unit(1, 1)
    _accel.fit_backward(fk.flow, fk.kern, tuple(pot), fk.kCi, fk.kld, fk.kL, X, 1e-8,
                        pol.P, pol.b, pol.c, pol.fallback, *_twist_buffers(fk))
    assert pol.fallback[0]
    assert pol.P[0, 0, 0] == 0.0 and pol.c[0] == 0.0


def test_csmc_converges_on_linear_gaussian(ou_fk, kalman_ref):
    rep = csmc(ou_fk, 10, np.random.default_rng(1))
    assert rep.converged and rep.n_iterations <= 3
    assert rep.log_Z == pytest.approx(kalman_ref, abs=1e-4)
    assert rep.fallback_counts[-1] == 0


def test_single_iteration_is_bootstrap(ou_fk):
    rep = csmc(ou_fk, 15, np.random.default_rng(7), max_iters=1, tol=np.inf)
    rng = np.random.default_rng(7)
    first = bpf(ou_fk, 15, rng)
    second = bpf(ou_fk, 15, rng)
    assert rep.iteration_log_Z == [first]
    assert rep.log_Z == second
    assert rep.final.policies.P.max() == 0.0 and not rep.converged


def test_determinism(ou_fk):
    a = csmc(ou_fk, 10, np.random.default_rng(3))
    b = csmc(ou_fk, 10, np.random.default_rng(3))
    assert a.log_Z == b.log_Z and a.iteration_log_Z == b.iteration_log_Z


def test_csmc_reduces_variance():
    m = fhn_model(0.1, 1.5, 0.8, 0.0, 0.3)
    path = simulate_path(m, "strang", [0.0, 0.0], 1e-4, 40 * 200, 200, np.random.default_rng(0)).states
    fk = partial_unbridged(m, "strang", path[:, [0]], (0,), 0.02)
    boot = [bpf(fk, 10, np.random.default_rng(s)) for s in range(20)]
    ctrl = [csmc(fk, 10, np.random.default_rng(s)).log_Z for s in range(20)]
    assert np.var(ctrl) < 0.1 * np.var(boot)


def test_resampling_keeps_ancestry_consistent(ou_fk):
    ens = particle_filter(ou_fk, 8, np.random.default_rng(2)).ensemble
    assert ens.resampled[0] == 0
    for k in range(1, ou_fk.T):
        if not ens.resampled[k]:
            np.testing.assert_array_equal(ens.ancestors[k], np.arange(8))
        assert ens.ancestors[k].min() >= 0 and ens.ancestors[k].max() < 8


def test_coarse_initialization_on_bridged_fhn():
    m = fhn_model(0.1, 1.5, 0.8, 0.0, 0.3)
    path = simulate_path(m, "strang", [0.0, 0.0], 1e-4, 100 * 500, 500, np.random.default_rng(1)).states
    v = path[:, [0]]
    fine = partial_bridged(m, "strang", v, (0,), 0.05, 4)
    coarse = partial_unbridged(m, "strang", v, (0,), 0.05)
    rng = np.random.default_rng(0)
    init = coarse_policies(fine, coarse, rng, to_fine=latent_coordinate_map(m, "strang", (0,), 0.05, 0.0125))
    rep = csmc(fine, 20, rng, initial=init, max_iters=5)
    assert np.isfinite(rep.log_Z)
    ens = particle_filter(rep.final, 20, rng).ensemble
    assert min(ens.ess(k) for k in range(fine.T)) > 1.5


def test_coarse_initialization_needs_partial():
    fk = bridged_full(cubic_model(1.0), "lt", np.zeros((3, 1)), 0.1, 2)
    with pytest.raises(InvalidInputError):
        coarse_policies(fk, fk, np.random.default_rng(0))


def test_collapse_is_reported():
    b = _Builder(1, IDENTITY_FLOW, 1)
    b.step(1, np.eye(1) * 1e-4, mean=np.zeros(1))
    # the squared residual overflows, so every weight is zero
    b.potential(0, np.array([1e160]), np.eye(1), np.array([[1e-6]]))
    fk = b.build(0.0, "unreachable observation")
    with pytest.raises(ParticleCollapseError) as info:
        particle_filter(fk, 4, np.random.default_rng(0))
    assert info.value.step == 0
    with pytest.raises(ParticleCollapseError, match="increase the number of particles"):
        csmc(fk, 4, np.random.default_rng(0))


def test_filter_rejects_one_particle(ou_fk):
    with pytest.raises(InvalidInputError):
        particle_filter(ou_fk, 1, np.random.default_rng(0))
    with pytest.raises(InvalidInputError):
        csmc(ou_fk, 10, np.random.default_rng(0), max_iters=0)
