import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.polynomial import hermite_e

from anticipating import chaos as ch

FAST = settings(max_examples=25, deadline=None)


def brute_value(v: ch.ChaosVector, z: np.ndarray) -> float:
    """Sum over full index tuples of A[i1..ik] prod_j He_{count_j}(z_j)."""
    total = 0.0
    for k in range(v.K + 1):
        A = v.full(k) if k else np.array(v.coeffs[0][0])
        for idx in itertools.product(range(v.dim), repeat=k):
            counts = np.bincount(np.array(idx, dtype=int), minlength=v.dim)
            prod = 1.0
            for j, c in enumerate(counts):
                if c:
                    prod *= hermite_e.hermeval(z[j], [0] * c + [1])
            total += (A[idx] if k else float(A)) * prod
    return total


def test_layout_sizes_and_multiplicities():
    for d, k in [(3, 2), (4, 3), (5, 4), (2, 6)]:
        L = ch.layout(d, k)
        assert L.size == math.comb(d + k - 1, k)
        assert L.mult.sum() == d ** k
        assert sorted(ch.rank(L.reps).tolist()) == list(range(L.size))


def test_evaluate_matches_explicit_hermite_products():
    gen = np.random.default_rng(3)
    v = ch.random_chaos(3, 3, gen)
    for z in gen.standard_normal((5, 3)):
        assert ch.evaluate(v, z) == pytest.approx(brute_value(v, z), abs=1e-12)


def test_norm_is_second_moment_of_hermite_expansion():
    # E[He_a He_b] = a! delta_ab gives the norm directly for a diagonal monomial
    v = ch.ChaosVector(2, [np.zeros(1), np.zeros(2), np.array([1.0, 0.0, 0.0])])
    # (A, :z^2:) with A = e1 (x) e1 is He_2(z_1), second moment 2
    assert ch.norm_sq(v) == pytest.approx(2.0)


@FAST
@given(st.integers(0, 10 ** 6))
def test_derivative_matches_finite_differences(seed):
    gen = np.random.default_rng(seed)
    v = ch.random_chaos(4, 3, gen)
    z = gen.standard_normal(4)
    Dv = ch.derivative(v)
    eps = 1e-5
    for h in range(4):
        e = np.zeros(4)
        e[h] = eps
        fd = (ch.evaluate(v, z + e) - ch.evaluate(v, z - e)) / (2 * eps)
        assert ch.evaluate(Dv.component(h), z) == pytest.approx(fd, abs=1e-6)


@FAST
@given(st.integers(0, 10 ** 6))
def test_divergence_is_adjoint_of_derivative(seed):
    gen = np.random.default_rng(seed)
    d = 4
    alpha = ch.random_chaos(d, 3, gen)
    x = ch.VectorChaos.from_components([ch.random_chaos(d, 2, gen) for _ in range(d)])
    lhs = ch.inner(alpha, ch.divergence(x))
    Da = ch.derivative(alpha)
    rhs = sum(ch.inner(Da.component(h), x.component(h)) for h in range(d))
    assert lhs == pytest.approx(rhs, abs=1e-10)


def test_divergence_of_deterministic_element_is_gaussian():
    phi = np.array([0.3, -1.2, 0.5])
    dv = ch.divergence(ch.deterministic_element(phi, 3))
    z = np.array([0.7, 0.1, -2.0])
    assert ch.evaluate(dv, z) == pytest.approx(phi @ z)


def test_divergence_pointwise_skorokhod_formula():
    # delta(F phi) = F (phi, z) - (DF, phi)
    gen = np.random.default_rng(11)
    F = ch.random_chaos(3, 2, gen)
    phi = gen.standard_normal(3)
    x = ch.VectorChaos.from_components([F * p for p in phi])
    dv = ch.divergence(x)
    for z in gen.standard_normal((4, 3)):
        expect = ch.evaluate(F, z) * (phi @ z) - ch.evaluate(ch.directional_derivative(F, phi), z)
        assert ch.evaluate(dv, z) == pytest.approx(expect, abs=1e-12)


@FAST
@given(st.integers(0, 10 ** 6))
def test_ordinary_product_is_pointwise(seed):
    gen = np.random.default_rng(seed)
    a, b = ch.random_chaos(3, 2, gen), ch.random_chaos(3, 2, gen)
    prod = ch.multiply(a, b)
    z = gen.standard_normal((6, 3))
    np.testing.assert_allclose(ch.evaluate(prod, z), ch.evaluate(a, z) * ch.evaluate(b, z), atol=1e-10)


def test_wick_product_of_exponentials():
    a, b = np.array([0.3, -0.2, 0.1]), np.array([-0.1, 0.4, 0.2])
    w = ch.wick_product(ch.exp_vector(a, 3), ch.exp_vector(b, 3), capacity=6)
    ref = ch.exp_vector(a + b, 6)
    # degrees up to 3 are exact; higher degrees miss terms from the truncated factors
    for k in range(4):
        np.testing.assert_allclose(w.coeffs[k], ref.coeffs[k], atol=1e-14)


def test_exp_vector_value_and_tail():
    phi = np.array([0.6, -0.5])
    v = ch.exp_vector(phi, 20)
    z = np.array([0.4, 1.1])
    assert ch.evaluate(v, z) == pytest.approx(math.exp(phi @ z - 0.5 * phi @ phi), rel=1e-9)
    full = math.exp(phi @ phi)
    assert ch.norm_sq(v) + v.tail_norm_sq == pytest.approx(full, rel=1e-12)


def test_second_quantization_identity_and_zero():
    gen = np.random.default_rng(5)
    v = ch.random_chaos(4, 3, gen)
    same = ch.second_quantization(np.eye(4), v)
    assert ch.norm_sq(same - v) < 1e-28
    zero = ch.second_quantization(np.zeros((4, 4)), v)
    assert zero.mean == pytest.approx(v.mean)
    assert ch.norm_sq(zero) == pytest.approx(v.mean ** 2)


def test_second_quantization_composition_and_contraction():
    gen = np.random.default_rng(9)
    v = ch.random_chaos(3, 3, gen)
    C1, C2 = (M / np.linalg.norm(M, 2) * 0.9 for M in gen.standard_normal((2, 3, 3)))
    lhs = ch.second_quantization(C1, ch.second_quantization(C2, v))
    rhs = ch.second_quantization(C2 @ C1, v)
    assert ch.norm_sq(lhs - rhs) < 1e-26
    assert ch.norm_sq(ch.second_quantization(C1, v)) <= ch.norm_sq(v) + 1e-12


def test_second_quantization_rejects_expansions():
    with pytest.raises(ValueError):
        ch.second_quantization(2 * np.eye(2), ch.constant(1.0, 2))


def test_basis_round_trip():
    gen = np.random.default_rng(1)
    A = gen.standard_normal((4, 4)) * 0.2
    S = np.eye(4) + A @ A.T
    lam, U = np.linalg.eigh(S)
    S_half = (U * np.sqrt(lam)) @ U.T
    S_inv_half = (U / np.sqrt(lam)) @ U.T
    v = ch.random_chaos(4, 3, gen)
    back = ch.to_xi_prime_basis(ch.to_xi_basis(v, S_inv_half), S_half)
    assert ch.norm_sq(back - v) < 1e-24


def test_json_round_trip():
    gen = np.random.default_rng(2)
    v = ch.random_chaos(3, 4, gen)
    w = ch.ChaosVector.from_json(v.to_json())
    assert w.dim == v.dim and w.K == v.K and w.basis == v.basis
    for a, b in zip(v.coeffs, w.coeffs):
        np.testing.assert_array_equal(a, b)


def test_from_full_rejects_non_symmetric():
    T = np.zeros((2, 2))
    T[0, 1] = 1.0
    with pytest.raises(ValueError):
        ch.ChaosVector.from_full([np.zeros(()), np.zeros(2), T])


def test_expand_recovers_polynomial_coefficients():
    gen = np.random.default_rng(4)
    v = ch.random_chaos(2, 2, gen)
    est = ch.expand(lambda z: ch.evaluate(v, z), 2, 2, 200_000, seed=3)
    for k in range(3):
        err = np.abs(est.coeffs[k] - v.coeffs[k])
        assert np.all(err <= 5 * est.stderr[k] + 1e-12)


def test_expand_flags_constant_functional():
    est = ch.expand(lambda z: np.full(len(z), 2.0), 2, 2, 2000, seed=0)
    assert "degenerate-variance" in est.flags
    assert est.mean == pytest.approx(2.0)


def test_expand_requires_enough_samples():
    with pytest.raises(ValueError):
        ch.expand(lambda z: z[:, 0], 2, 1, 10, seed=0)
