"""Acceptance criteria at full size; one pass/fail line per criterion is printed in the summary."""

import warnings

import pytest

from anticipating import verification as vf

SEED = 20240601

CRITERIA = [
    (1, "chaos norm identity", ["chaos_norm"]),
    (2, "second quantization of exponential vectors", ["exp_vector_quantization"]),
    (3, "second quantization as conditional expectation", ["conditional_representation"]),
    (4, "operator commutes with second quantization", ["commutation"]),
    (5, "extended integral equals Ito integral for adapted integrands", ["ito_agreement"]),
    (6, "fBm covariance", ["fbm_covariance"]),
    (7, "integrator bound for contracted noise", ["integrator_bound"]),
    (8, "drift density: change of variables and normalization", ["density_oracle", "density_normalization"]),
    (9, "unit Carleman-Fredholm determinant and quasi-nilpotence", ["carleman_fredholm", "quasinilpotence"]),
    (10, "divergence product rule and commutator", ["product_rule", "commutator"]),
    (11, "smoothing equation vs Feynman-Kac", ["spde_feynman_kac"]),
    (12, "Bayes smoother vs tube conditioning and degenerate cases", ["smoother_tube", "smoother_degenerate"]),
    (13, "smoothing equation vs Bayes smoother consistency", ["spde_smoother_consistency"]),
    (14, "backward Kolmogorov expectation case", ["kolmogorov"]),
]


@pytest.mark.parametrize("number,title,checks", CRITERIA, ids=[f"criterion_{c[0]:02d}" for c in CRITERIA])
def test_criterion(number, title, checks, acceptance_log):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        records = [vf.run_check(name, SEED, "full") for name in checks]
    ok = all(r.passed for r in records)
    parts = "; ".join(f"{r.name}: measured={r.measured:.4g} tol={r.tolerance:.4g}" for r in records)
    line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'} {title} ({parts})"
    acceptance_log.append(line)
    print(line)
    for r in records:
        assert r.anchor in vf.ANCHORS.values()
        assert r.passed, r.line()
