import math

import numpy as np
import pytest

from anticipating import chaos as ch
from anticipating import density as dn
from anticipating import smoothing as sm
from anticipating.gaussian_space import CrossCovarianceSpec, TimeGrid, build_covariance


def model(n=8, corr=None, drift=None, f="gauss", r=None):
    cov = build_covariance(TimeGrid(n), corr or CrossCovarianceSpec.zero())
    return sm.SmoothingModel(cov, drift or dn.DriftSpec.zero(), sm.TestFunction.preset(f),
                             np.linspace(-6, 6, 49) if r is None else r)


def observation(n, seed=0, scale=1.0):
    gen = np.random.default_rng(seed)
    return np.concatenate([[0.0], np.cumsum(gen.standard_normal(n) * scale / math.sqrt(n))])


def gauss_of_normal(mu, var):
    """``E exp(-X^2 / 2)`` for ``X ~ N(mu, var)``."""
    return math.exp(-mu * mu / (2 * (1 + var))) / math.sqrt(1 + var)


@pytest.mark.parametrize("rho", [0.3, 0.7])
def test_smoother_without_drift_is_gaussian_conditioning(rho):
    mdl = model(corr=CrossCovarianceSpec.scalar(rho))
    u = observation(8, 1, 1.5)
    out = sm.bayes_smoother(mdl, u, 1.0, seed=3, m=50_000)
    mu, var = sm.gaussian_conditional_oracle(mdl.cov, u, 1.0)
    # without drift every weight is one: the estimate is a plain conditional average
    assert out.ess == pytest.approx(50_000)
    assert abs(out.psi - gauss_of_normal(mu, var)) < 4 * out.stderr


def test_gaussian_conditional_oracle_closed_form():
    # scalar rho: w1(t) | w2 ~ N(rho w2(t), t (1 - rho^2))
    mdl = model(corr=CrossCovarianceSpec.scalar(0.6))
    u = observation(8, 2)
    mu, var = sm.gaussian_conditional_oracle(mdl.cov, u, 0.5)
    assert mu == pytest.approx(0.6 * u[4])
    assert var == pytest.approx(0.5 * (1 - 0.36))


def test_smoother_random_measure_is_a_probability():
    mdl = model(corr=CrossCovarianceSpec.scalar(0.5), drift=dn.DriftSpec.preset("tanh", 0.3))
    out = sm.bayes_smoother(mdl, observation(8), 0.5, seed=0)
    np.testing.assert_allclose(out.pi_t.sum(axis=1), 1.0)
    assert np.all(out.pi_t >= 0)
    assert out.r_edges[0] == -np.inf and out.r_edges[-1] == np.inf
    est, se = sm.smoother_functional(out, mdl.f.f, mdl.grid.index(0.5))
    assert est == pytest.approx(out.psi) and se == pytest.approx(out.stderr)


def test_smoother_needs_enough_samples():
    with pytest.raises(ValueError):
        sm.bayes_smoother(model(), observation(8), 1.0, seed=0, m=100)


def test_smoother_flags_collapsed_weights():
    grid = TimeGrid(8)
    cov = build_covariance(grid, CrossCovarianceSpec.volterra_from_function(lambda t, s: 0.6, grid, strict=False))
    mdl = sm.SmoothingModel(cov, dn.DriftSpec.preset("tanh", 0.1, "linear", 0.6), sm.TestFunction.preset("gauss"),
                            np.linspace(-4, 4, 41))
    u = np.concatenate([[0.0], np.cumsum(np.full(8, 6.0))])   # far outside typical observations
    out = sm.bayes_smoother(mdl, u, 1.0, seed=0)
    assert out.ess < sm.ESS_FLOOR
    assert "unreliable-estimate" in out.flags
    typical = sm.bayes_smoother(mdl, observation(8), 1.0, seed=0)
    assert typical.ess > sm.ESS_FLOOR and not typical.flags


def test_model_rejects_bad_inputs():
    with pytest.raises(ValueError):
        model(r=np.array([0.0, 0.1, 0.3]))
    with pytest.raises(ValueError):
        model(corr=CrossCovarianceSpec.scalar(0.5), drift=dn.DriftSpec.preset("tanh", 5.0))


def test_heat_reference_is_gaussian_expectation():
    r, t = 0.7, 0.4
    x = np.linspace(-12, 12, 20001)
    dens = np.exp(-(x - r) ** 2 / (2 * t)) / math.sqrt(2 * math.pi * t)
    assert sm.heat_gauss(np.array(r), t) == pytest.approx(np.trapezoid(np.exp(-x * x / 2) * dens, x), rel=1e-9)


def test_spde_without_drift_or_correlation_solves_heat_equation():
    mdl = model(n=16)
    fld = sm.solve_spde(mdl, K=4)
    times = mdl.grid.times[fld.stored_steps]
    ref = sm.heat_gauss(mdl.r_grid[None, :], times[:, None])
    assert np.abs(fld.mean_surface() - ref).max() < 0.01


def test_spde_rejects_unstable_substeps_and_bad_modes():
    mdl = model(n=4)
    with pytest.raises(ValueError, match="unstable"):
        sm.solve_spde(mdl, substeps=1)
    with pytest.raises(ValueError):
        sm.solve_spde(model(drift=dn.DriftSpec.preset("tanh", 0.2, "sin", 0.1)), mode="simplified")
    with pytest.raises(ValueError):
        sm.solve_spde(mdl, mode="sideways")


def test_spde_initial_condition_is_test_function_when_uncorrelated():
    mdl = model(n=8, drift=dn.DriftSpec.preset("tanh", 0.3))
    fld = sm.solve_spde(mdl, K=2, store="all")
    np.testing.assert_allclose(fld.mean_surface()[0], mdl.f.f(mdl.r_grid), atol=1e-12)


def test_spde_field_lives_on_observation_chaos():
    mdl = model(n=4, corr=CrossCovarianceSpec.scalar(0.5), drift=dn.DriftSpec.preset("tanh", 0.2))
    fld = sm.solve_spde(mdl, K=3)
    assert fld.off_subspace_norm(mdl.cov, 24) < 1e-12


def test_feynman_kac_without_drift_matches_heat():
    r = np.linspace(-2, 2, 5)
    times = np.linspace(0, 1, 5)
    fk = sm.feynman_kac(lambda x: 0 * x, sm.TestFunction.preset("gauss").f, r, times, seed=1, m=20_000)
    ref = sm.heat_gauss(r[None, :], times[:, None])
    assert np.all(np.abs(fk.mean - ref) <= 4 * fk.stderr + 1e-12)


def test_wick_step_pathwise_on_first_chaos():
    F = ch.constant(2.0, 3, "w2")
    c = np.array([0.1, -0.2, 0.3])
    out = sm.wick_step_pathwise(F, c)
    z = np.array([1.0, 0.5, -1.0])
    assert ch.evaluate(ch.ChaosVector(3, out.coeffs), z) == pytest.approx(2.0 * (c @ z))


@pytest.mark.parametrize("name", ["brownian", "ou"])
def test_kolmogorov_check_small(name):
    rep = sm.kolmogorov_check(sm.sde_preset(name), r=(0.0, 0.5), s=(0.5,), m=20_000, seed=2)
    assert rep.passed


def test_consistency_check_small():
    # coarser grids separate the continuous-r field from the Euler chain by an O(dt) bias
    mdl = sm.SmoothingModel(build_covariance(TimeGrid(8), CrossCovarianceSpec.scalar(0.5)),
                            dn.DriftSpec.preset("tanh", 0.3), sm.TestFunction.preset("gauss"),
                            np.linspace(-6, 6, 41))
    rep = sm.consistency_check(mdl, seed=1, paths=40, inner_m=10_000, chaos_m=20_000)
    assert rep.passed, rep.stats
