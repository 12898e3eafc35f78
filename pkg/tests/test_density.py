import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from anticipating import density as dn
from anticipating.gaussian_space import (CovModel, CrossCovarianceSpec, TimeGrid, build_covariance,
                                         noise_from_whitened, noise_from_xi, sample_pairs)


def volterra(n, c=0.6):
    grid = TimeGrid(n)
    return build_covariance(grid, CrossCovarianceSpec.volterra_from_function(
        lambda t, s: c * math.exp(-(t - s)), grid, strict=False))


def test_shift_density_matches_gaussian_ratio():
    cov = volterra(3)
    gen = np.random.default_rng(0)
    h = gen.standard_normal(cov.dim) * 0.3
    s = sample_pairs(cov, 4, 6)
    law = stats.multivariate_normal(np.zeros(cov.dim), cov.S)
    expect = np.exp(law.logpdf(s.xi - h) - law.logpdf(s.xi))
    np.testing.assert_allclose(dn.shift_density(h, s, cov), expect, rtol=1e-10)


def test_gaussian_log_density_against_scipy():
    cov = volterra(3)
    xi = sample_pairs(cov, 1, 4).xi
    law = stats.multivariate_normal(np.zeros(cov.dim), cov.S)
    np.testing.assert_allclose(dn.gaussian_log_density(xi, cov), law.logpdf(xi), rtol=1e-12)


def test_shift_exponent_two_routes_agree():
    cov = volterra(5)
    gen = np.random.default_rng(2)
    h1, h2 = gen.standard_normal(5), gen.standard_normal(5)
    s = sample_pairs(cov, 3, 1)
    sdt = math.sqrt(cov.grid.dt)
    direct = math.log(dn.shift_density(np.concatenate([h1, h2]) * sdt, noise_from_whitened(cov, s.xi_prime[0]), cov))
    paths = dn.shift_exponent_paths(h1, h2, s.w1[0], s.w2[0], cov)
    assert paths == pytest.approx(direct, rel=1e-10)


def test_drift_jacobian_against_finite_differences():
    cov = volterra(4)
    drift = dn.DriftSpec.preset("tanh", 0.4, "sin", 0.3)
    base = sample_pairs(cov, 5, 1).xi[0]
    h0, Dh = dn.drift_jacobian(drift, noise_from_xi(cov, base), cov)
    eps = 1e-6
    for j in range(cov.dim):
        e = np.zeros(cov.dim)
        e[j] = eps
        hp, _ = dn.drift_jacobian(drift, noise_from_xi(cov, base + e), cov)
        hm, _ = dn.drift_jacobian(drift, noise_from_xi(cov, base - e), cov)
        np.testing.assert_allclose((hp - hm) / (2 * eps), Dh[:, j], atol=1e-8)


def test_det2_routes_and_special_cases():
    gen = np.random.default_rng(1)
    M = gen.standard_normal((6, 6)) * 0.2
    assert dn.det2(M)[0] == pytest.approx(dn.det2_eigen(M), rel=1e-10)
    L = np.tril(gen.standard_normal((6, 6)), -1)
    assert dn.det2(L)[0] == pytest.approx(1.0, abs=1e-14)
    d = np.array([0.3, -0.2, 0.5])
    assert dn.det2(np.diag(d))[0] == pytest.approx(np.prod((1 + d) * np.exp(-d)))
    assert dn.det2(-np.eye(2))[1]


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10 ** 5))
def test_density_matches_change_of_variables(seed):
    cov = volterra(3, 0.5)
    drift = dn.DriftSpec.preset("tanh", 0.2, "sin", 0.1)
    s = sample_pairs(cov, seed, 1)
    one = noise_from_whitened(cov, s.xi_prime[0])
    p = dn.density_p(drift, one, cov).value
    assert p == pytest.approx(dn.exact_density_oracle(drift, (s.w1[0], s.w2[0]), cov), rel=1e-7)


def test_density_zeta_is_one_for_causal_V():
    cov = volterra(8)
    drift = dn.DriftSpec.preset("linear", 0.3, "tanh", 0.2)
    ev = dn.density_p(drift, sample_pairs(cov, 0, 20), cov)
    np.testing.assert_allclose(ev.zeta, 1.0, atol=1e-12)


def test_density_zeta_departs_from_one_for_anticipating_V():
    grid = TimeGrid(4)
    V = np.full((4, 4), 0.2)              # w2 increments correlate with future w1 increments
    cov = CovModel.from_matrix(grid, V)
    assert not cov.is_causal
    # the top-left block of S Dh is D11 + V D21, nilpotent only when V is causal or a2 = 0
    drift = dn.DriftSpec.preset("linear", 0.5, "linear", 0.5)
    s = sample_pairs(cov, 1, 1)
    _, Dh = dn.drift_jacobian(drift, noise_from_whitened(cov, s.xi_prime[0]), cov)
    assert abs(dn.det2(cov.S @ Dh)[0] - 1) > 1e-4


def test_density_batch_matches_single():
    cov = volterra(5)
    drift = dn.DriftSpec.preset("sin", 0.3, "linear", 0.1)
    s = sample_pairs(cov, 2, 4)
    batch = dn.density_p(drift, s, cov).value
    single = [dn.density_p(drift, noise_from_whitened(cov, z), cov).value for z in s.xi_prime]
    np.testing.assert_allclose(batch, single, rtol=1e-13)


def test_density_of_zero_drift_is_one():
    cov = volterra(4)
    ev = dn.density_p(dn.DriftSpec.zero(), sample_pairs(cov, 0, 5), cov)
    np.testing.assert_allclose(ev.value, 1.0)


def test_constant_drift_density_is_a_pure_shift():
    cov = volterra(4)
    drift = dn.DriftSpec.preset("constant", 0.7)
    s = sample_pairs(cov, 0, 5)
    h = np.concatenate([np.full(4, 0.7), np.zeros(4)]) * math.sqrt(cov.grid.dt)
    np.testing.assert_allclose(dn.density_p(drift, s, cov).value, dn.shift_density(h, s, cov), rtol=1e-12)


def test_euler_paths_with_zero_drift_return_noise():
    cov = volterra(4)
    s = sample_pairs(cov, 0, 3)
    x1, x2 = dn.euler_paths(dn.DriftSpec.zero(), s.w1, s.w2, cov.grid.dt)
    np.testing.assert_array_equal(x1, s.w1)
    np.testing.assert_array_equal(x2, s.w2)


def test_derivative_recursion_against_finite_differences():
    cov = volterra(6)
    drift = dn.DriftSpec.preset("tanh", 0.8)
    s = sample_pairs(cov, 1, 1)
    w1, w2 = s.w1[0], s.w2[0]
    x1, _ = dn.euler_paths(drift, w1, w2, cov.grid.dt)
    D = dn.derivative_recursion(drift, x1, cov.grid.dt)
    eps = 1e-6
    for t in range(cov.n):
        bump = np.zeros(cov.n + 1)
        bump[t + 1:] = eps
        xp, _ = dn.euler_paths(drift, w1 + bump, w2, cov.grid.dt)
        xm, _ = dn.euler_paths(drift, w1 - bump, w2, cov.grid.dt)
        np.testing.assert_allclose((xp - xm) / (2 * eps), D[:, t], atol=1e-8)


def test_smallness_condition_is_enforced():
    cov = build_covariance(TimeGrid(4), CrossCovarianceSpec.scalar(0.5))
    big = dn.DriftSpec.preset("tanh", 5.0)
    assert big.smallness(cov) >= 1
    with pytest.raises(ValueError):
        big.check(cov)
    dn.DriftSpec.preset("tanh", 0.1).check(cov)


def test_quasinilpotence_curve_decays_for_volterra_jacobian():
    cov = volterra(16)
    drift = dn.DriftSpec.preset("tanh", 0.3, "sin", 0.2)
    _, Dh = dn.drift_jacobian(drift, noise_from_whitened(cov, sample_pairs(cov, 0, 1).xi_prime[0]), cov)
    curve = dn.quasinilpotence_certificate(cov.S @ Dh, 40)
    bound = dn.factorial_bound(cov, drift, 40)
    assert np.all(curve <= bound)
    # nilpotent on the grid: the 2n-th power vanishes
    assert curve[2 * cov.n - 1] < 1e-10
