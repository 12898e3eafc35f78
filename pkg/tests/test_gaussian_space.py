import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from anticipating import rng
from anticipating.gaussian_space import (CovModel, CrossCovarianceSpec, TimeGrid, build_covariance,
                                         conditional_projector, noise_from_whitened, noise_from_xi,
                                         regress_gamma, sample_pairs)


def volterra(n, c=0.6, strict=False):
    grid = TimeGrid(n)
    return build_covariance(grid, CrossCovarianceSpec.volterra_from_function(
        lambda t, s: c * math.exp(-(t - s)), grid, strict=strict))


def test_rng_blocks_are_position_independent():
    full = rng.normals(5, 9000, 3)
    part = rng.normals(5, 3000, 3, start=4000)       # crosses a block boundary
    np.testing.assert_array_equal(full[4000:7000], part)
    assert not np.array_equal(rng.normals(5, 10, 3), rng.normals(5, 10, 3, stream=rng.STREAM_ORACLE))


def test_time_grid_index_and_indicator():
    g = TimeGrid(8, 2.0)
    assert g.dt == pytest.approx(0.25)
    assert g.index(1.0) == 4
    ind = g.indicator(1.0)
    assert ind @ ind == pytest.approx(1.0)   # orthonormal cell coefficients: squared norm is t


def test_scalar_covariance_structure():
    cov = build_covariance(TimeGrid(6), CrossCovarianceSpec.scalar(0.4))
    np.testing.assert_allclose(cov.V, 0.4 * np.eye(6))
    np.testing.assert_allclose(cov.S_half @ cov.S_half, cov.S, atol=1e-12)
    np.testing.assert_allclose(cov.S_inv_half @ cov.S_inv_half @ cov.S, np.eye(12), atol=1e-12)


def test_rejects_non_contractive_cross_covariance():
    with pytest.raises(ValueError):
        CovModel.from_matrix(TimeGrid(4), 1.2 * np.eye(4))


@settings(max_examples=15, deadline=None)
@given(st.floats(-0.9, 0.9))
def test_sampled_increments_have_covariance_S(rho):
    cov = build_covariance(TimeGrid(4), CrossCovarianceSpec.scalar(rho))
    m = 40_000
    s = sample_pairs(cov, 1, m)
    emp = s.xi.T @ s.xi / m
    se = np.sqrt((1 + cov.S ** 2) / m)
    assert np.all(np.abs(emp - cov.S) <= 5 * se)


def test_paths_from_whitened_match_first_chaos_rows():
    cov = volterra(6)
    z = rng.normals(2, 5, cov.dim)
    s = noise_from_whitened(cov, z)
    np.testing.assert_allclose(s.w1, z @ cov.w_rows(1).T, atol=1e-12)
    np.testing.assert_allclose(s.w2, z @ cov.w_rows(2).T, atol=1e-12)
    again = noise_from_xi(cov, s.xi)
    np.testing.assert_allclose(again.xi_prime, z, atol=1e-12)


def test_path_covariance_oracle():
    # Cov(w1(t_i), w2(t_j)) = sum_{a<i, b<j} V_ab dt
    cov = volterra(5)
    dt = cov.grid.dt
    R1, R2 = cov.w_rows(1), cov.w_rows(2)
    cross = R1 @ R2.T
    csum = np.zeros((6, 6))
    csum[1:, 1:] = np.cumsum(np.cumsum(cov.V * dt, axis=0), axis=1)
    np.testing.assert_allclose(cross, csum, atol=1e-12)
    np.testing.assert_allclose(np.diag(R1 @ R1.T), cov.grid.times, atol=1e-12)


def test_prefix_property_holds_for_diagonal_V_only():
    assert build_covariance(TimeGrid(6), CrossCovarianceSpec.zero()).prefix_defect() == 0.0
    assert build_covariance(TimeGrid(6), CrossCovarianceSpec.scalar(0.5)).prefix_defect() == pytest.approx(0.0, abs=1e-14)
    assert volterra(6).prefix_defect() > 1e-3


def test_causality_flag():
    assert volterra(5).is_causal
    grid = TimeGrid(4)
    V = np.zeros((4, 4))
    V[0, 3] = 0.3
    assert not CovModel.from_matrix(grid, V).is_causal


def test_conditional_projector_is_orthogonal_projector():
    cov = volterra(5)
    P = conditional_projector(cov)
    np.testing.assert_allclose(P @ P, P, atol=1e-12)
    np.testing.assert_allclose(P, P.T, atol=1e-14)
    assert np.trace(P) == pytest.approx(cov.n)


def test_regression_gamma_against_gaussian_conditioning():
    cov = volterra(5, 0.7)
    R1, R2 = cov.w_rows(1)[1:], cov.w_rows(2)[1:]
    # E(w1 | w2) = C12 C22^{-1} w2 in path coordinates
    B = (R1 @ R2.T) @ np.linalg.inv(R2 @ R2.T)
    z = rng.normals(3, 7, cov.dim)
    s = noise_from_whitened(cov, z)
    gamma = regress_gamma(cov)
    np.testing.assert_allclose(gamma.evaluate(z)[:, 1:], s.w2[:, 1:] @ B.T, atol=1e-10)
    assert gamma.bound_constant <= 1 + 1e-10


def test_zero_correlation_makes_gamma_vanish():
    cov = build_covariance(TimeGrid(4), CrossCovarianceSpec.zero())
    assert np.abs(regress_gamma(cov).rows).max() < 1e-14
