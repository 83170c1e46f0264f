import numpy as np
import pytest
import scipy.integrate
from hypothesis import given
from hypothesis import strategies as st

from splitsmc import (InvalidInputError, NumericalDegeneracyError, ObservationScheme, PolicyDegeneracyError, QuadraticLogPolicy,
                      bridged_full, build_formulation, check_dimensions, csmc, cubic_model, fhn_model,
                      full_unbridged, kalman_log_likelihood, latent_coordinate_map, make_kernel, ou_model,
                      partial_bridged, partial_unbridged, quadrature_log_normalizer, simulate_path, twist)
from splitsmc.gaussian import GaussianDensity

FHN = fhn_model(0.1, 1.5, 0.8, 0.0, 0.3)
# EuM needs noise on both coordinates
FHN_NOISY = fhn_model(0.1, 1.5, 0.8, 0.1, 0.3)


def _norm_logpdf(x, m, v):
    return -0.5 * (x - m) ** 2 / v - 0.5 * np.log(2 * np.pi * v)


def test_full_unbridged_single_point():
    assert full_unbridged(cubic_model(1.0), "lt", np.array([[0.3]]), 0.1) == 0.0
    mu0 = GaussianDensity([0.0], [[1.0]])
    assert full_unbridged(cubic_model(1.0), "lt", np.array([[0.3]]), 0.1, mu0) == \
        pytest.approx(_norm_logpdf(0.3, 0.0, 1.0))


def test_full_unbridged_ar1_by_hand():
    a, s, dt = -0.7, 0.9, 0.25
    m = ou_model([[a]], [[s]])
    x = np.array([0.4, -0.1, 0.3, 1.2, 0.8])
    phi = np.exp(a * dt)
    var = s * s * (1 - phi ** 2) / (-2 * a)
    expected = sum(_norm_logpdf(x[k], phi * x[k - 1], var) for k in range(1, len(x)))
    for scheme in ("lt", "strang"):
        assert full_unbridged(m, scheme, x[:, None], dt) == pytest.approx(expected, rel=1e-12)


@pytest.mark.parametrize("scheme", ["eum", "lt", "strang"])
def test_full_unbridged_is_sum_of_kernel_densities(scheme):
    m = cubic_model(2.0)
    path = simulate_path(m, "strang", [0.2], 1e-3, 400, 100, np.random.default_rng(1)).states
    ker = make_kernel(m, scheme, 0.1)
    expected = sum(ker.log_density(path[k - 1], path[k]) for k in range(1, len(path)))
    assert full_unbridged(m, scheme, path, 0.1) == pytest.approx(expected, rel=1e-12)


@pytest.mark.parametrize("scheme", ["eum", "lt", "strang"])
def test_bridged_full_k2_matches_nested_quadrature(scheme):
    m = cubic_model(2.0)
    path = simulate_path(m, "strang", [0.2], 1e-3, 600, 200, np.random.default_rng(2)).states
    fk = bridged_full(m, scheme, path, 0.2, 2)
    assert fk.T == 3
    ker = make_kernel(m, scheme, 0.1)
    total = 0.0
    for k in range(1, len(path)):
        f = lambda x: np.exp(ker.log_density(path[k - 1], np.array([x])) + ker.log_density(np.array([x]), path[k]))
        lo, hi = -8.0, 8.0
        if scheme == "strang":
            edge = (1 - np.exp(-0.1)) ** -0.5
            lo, hi = -edge * (1 - 1e-9), edge * (1 - 1e-9)
        val, _ = scipy.integrate.quad(f, lo, hi, epsabs=0, epsrel=1e-12, limit=400)
        total += np.log(val)
    assert quadrature_log_normalizer(fk, -8, 8, 8001) == pytest.approx(total, abs=1e-8)


def test_bridged_full_k1_is_exact():
    m = cubic_model(2.0)
    path = np.array([[0.1], [0.3], [-0.2]])
    fk = bridged_full(m, "lt", path, 0.1, 1)
    assert fk.T == 0
    assert fk.log_offset == pytest.approx(full_unbridged(m, "lt", path, 0.1))
    assert quadrature_log_normalizer(fk) == fk.log_offset


def test_bridged_full_ou_independent_of_k():
    m = ou_model([[-0.6]], [[0.5]])
    path = np.array([[0.3], [0.1], [-0.2], [0.05]])
    ref = full_unbridged(m, "lt", path, 0.3)
    for K in (2, 3, 6):
        assert quadrature_log_normalizer(bridged_full(m, "lt", path, 0.3, K), -4, 4, 4001) == \
            pytest.approx(ref, abs=1e-8)


def test_bridged_full_rejects_k():
    with pytest.raises(InvalidInputError):
        bridged_full(cubic_model(1.0), "lt", np.zeros((3, 1)), 0.1, 0)


def test_partial_unbridged_matches_kalman(ou, ou_data):
    F, Q = ou.matrix_exponential(0.2), ou.integrated_covariance(0.2)
    ref = kalman_log_likelihood(F, Q, ou_data, (0,), np.zeros(1), np.eye(1))
    for scheme in ("lt", "strang"):
        fk = partial_unbridged(ou, scheme, ou_data, (0,), 0.2)
        assert fk.T == 25
        np.testing.assert_array_equal(fk.anchors, np.arange(25))
        assert quadrature_log_normalizer(fk, -8, 8, 3201) == pytest.approx(ref, abs=1e-8)


def test_partial_unbridged_single_interval(ou, ou_data):
    F, Q = ou.matrix_exponential(0.2), ou.integrated_covariance(0.2)
    v = ou_data[:2]
    fk = partial_unbridged(ou, "lt", v, (0,), 0.2, prior=([0.3], [[0.5]]))
    ref = kalman_log_likelihood(F, Q, v, (0,), np.array([0.3]), np.array([[0.5]]))
    assert quadrature_log_normalizer(fk, -8, 8, 3201) == pytest.approx(ref, abs=1e-10)


@pytest.mark.parametrize("scheme", ["eum", "lt"])
def test_marginal_factorization_by_nested_quadrature(scheme):
    """The partial formulation equals the joint density integrated over the latent path."""
    rng = np.random.default_rng(4)
    path = simulate_path(FHN_NOISY, "strang", [0.2, 0.1], 1e-3, 300, 100, rng).states
    v, u_true = path[:, 0], path[:, 1]
    ker = make_kernel(FHN_NOISY, scheme, 0.1)
    fk = partial_unbridged(FHN_NOISY, scheme, path[:, [0]], (0,), 0.1)
    grid = [np.linspace(c - 2.5, c + 2.5, 1001) for c in u_true]
    dx = grid[0][1] - grid[0][0]

    C = ker.kernel.covariance
    Ci = np.linalg.inv(C)
    _, logdet = np.linalg.slogdet(2 * np.pi * C)

    def logmat(k):
        # log f(v_{k+1}, b | v_k, a) on the grid pair (a, b)
        m = np.array([ker.mean(np.array([v[k], a])) for a in grid[k]])
        r0 = v[k + 1] - m[:, 0:1]
        r1 = grid[k + 1][None, :] - m[:, 1:2]
        quad = Ci[0, 0] * r0 ** 2 + 2 * Ci[0, 1] * r0 * r1 + Ci[1, 1] * r1 ** 2
        return -0.5 * quad - 0.5 * logdet

    la = _norm_logpdf(grid[0], 0.0, 1.0)
    for k in range(len(v) - 1):
        la = scipy.special.logsumexp(la[:, None] + logmat(k), axis=0) + np.log(dx)
    direct = scipy.special.logsumexp(la) + np.log(dx)
    assert quadrature_log_normalizer(fk, -6, 6, 2401) == pytest.approx(direct, abs=1e-8)


def test_partial_bridged_k1_reduces(ou, ou_data):
    a = partial_bridged(ou, "lt", ou_data, (0,), 0.2, 1)
    b = partial_unbridged(ou, "lt", ou_data, (0,), 0.2)
    assert a.T == b.T
    np.testing.assert_array_equal(a.kC, b.kC)


def test_partial_bridged_layout(ou, ou_data):
    fk = partial_bridged(ou, "strang", ou_data, (0,), 0.2, 4)
    assert fk.T == 25 * 4
    assert fk.dims[0] == 1 and fk.dims[1] == 2 and fk.dims[4] == 1
    assert fk.anchors[0] == 0 and fk.anchors[8] == 2 and fk.anchors[1] == -1
    assert int(np.count_nonzero(fk.gk)) == 25
    check_dimensions(fk)


@pytest.mark.parametrize("K", [2, 4])
def test_partial_bridged_ou_independent_of_k(ou, ou_data, K):
    F, Q = ou.matrix_exponential(0.2), ou.integrated_covariance(0.2)
    ref = kalman_log_likelihood(F, Q, ou_data, (0,), np.zeros(1), np.eye(1))
    fk = partial_bridged(ou, "lt", ou_data, (0,), 0.2, K)
    rep = csmc(fk, 50, np.random.default_rng(K), max_iters=4, tol=1e-8)
    assert rep.log_Z == pytest.approx(ref, abs=1e-6)


def test_degenerate_eum_partial():
    with pytest.raises(NumericalDegeneracyError):
        partial_unbridged(FHN, "eum", np.zeros((3, 1)), (0,), 0.1)


def test_partial_rejects_bad_inputs(ou, ou_data):
    with pytest.raises(InvalidInputError):
        partial_unbridged(ou, "lt", ou_data, (0, 1), 0.2)
    with pytest.raises(InvalidInputError):
        partial_unbridged(ou, "lt", ou_data[:1], (0,), 0.2)
    with pytest.raises(InvalidInputError):
        partial_bridged(ou, "lt", ou_data, (0,), 0.2, 2.5)


@pytest.mark.parametrize("model,regime,observed", [
    (cubic_model(1.0), "full", (0,)),
    (FHN_NOISY, "full", (0,)),
    (FHN_NOISY, "partial", (0,)),
    (ou_model([[-0.5, 0.4], [-0.3, -0.6]], np.eye(2)), "partial", (1,)),
])
@pytest.mark.parametrize("scheme", ["eum", "lt", "strang"])
@pytest.mark.parametrize("K", [1, 3])
def test_dimension_bookkeeping(model, regime, observed, scheme, K):
    path = simulate_path(model, "strang", np.zeros(model.dim), 1e-3, 300, 100, np.random.default_rng(0)).states
    data = path if regime == "full" else path[:, list(observed)]
    if regime == "full":
        observed = tuple(range(model.dim))
    fk = build_formulation(model, scheme, data, ObservationScheme(regime, observed, 0.1, K))
    assert check_dimensions(fk)


def test_latent_coordinate_map():
    to_fine = latent_coordinate_map(FHN, "strang", (0,), 0.1, 0.025)
    back = latent_coordinate_map(FHN, "strang", (0,), 0.025, 0.1)
    u = np.array([[0.3], [-1.2]])
    np.testing.assert_allclose(to_fine(u), u + 0.8 * (0.05 - 0.0125))
    np.testing.assert_allclose(back(to_fine(u)), u, atol=1e-14)
    np.testing.assert_array_equal(latent_coordinate_map(FHN, "lt", (0,), 0.1, 0.025)(u), u)


def test_unit_twist_is_base(ou, ou_data):
    fk = partial_bridged(ou, "strang", ou_data, (0,), 0.2, 2)
    tm = twist(fk)
    x_prev = np.random.default_rng(0).standard_normal((5, 2))
    for k in (1, 2, 3):
        p = int(fk.dims[k])
        prev = x_prev[:, :int(fk.dims[k - 1])]
        x = x_prev[:, :p]
        np.testing.assert_allclose(tm.kernel_mean(k, prev), fk.kernel_mean(k, prev)[:, :p])
        np.testing.assert_allclose(tm.kernel_covariance(k), fk.kernel_covariance(k), atol=1e-15)
        np.testing.assert_allclose(tm.log_potential(k, x), fk.log_potential(k, x))
        np.testing.assert_allclose(tm.kernel_log_density(k, prev, x), fk.kernel_log_density(k, prev, x))


@given(st.integers(0, 2**32 - 1))
def test_twisting_preserves_normalizer(seed):
    rng = np.random.default_rng(seed)
    m = cubic_model(1.5)
    path = np.array([[0.1], [0.4], [-0.3], [0.2]])
    fk = bridged_full(m, "lt", path, 0.2, 2)
    pols = [QuadraticLogPolicy([[-rng.uniform(0, 3)]], [rng.normal()], rng.normal()) for _ in range(fk.T)]
    tm = twist(fk, pols)
    assert quadrature_log_normalizer(tm, -4, 4, 4001) == \
        pytest.approx(quadrature_log_normalizer(fk, -4, 4, 4001), abs=1e-8)


def test_inadmissible_twist_reports_step():
    fk = bridged_full(cubic_model(1.5), "lt", np.array([[0.1], [0.4], [-0.3]]), 0.2, 2)
    pols = [QuadraticLogPolicy.unit(1), QuadraticLogPolicy([[1e3]], [0.0], 0.0)]
    with pytest.raises(PolicyDegeneracyError) as info:
        twist(fk, pols)
    assert info.value.step == 1
    with pytest.raises(InvalidInputError):
        twist(fk, pols[:1])
