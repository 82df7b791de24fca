"""Coefficient algebra, builtin models, and condition checks."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hjbfolio.model import (
    DegeneratePointError,
    ModelSpec,
    StatePoint,
    builtin_model,
    check_conditions,
    coefficient_fields,
    eval_coefficients,
    matrix_sqrt_spd,
)

ORIGIN = StatePoint(0.0, np.array([0.0]), np.array([0.0]))


def test_merton_derived_values():
    m = builtin_model("merton_constant")
    c = eval_coefficients(m, ORIGIN)
    np.testing.assert_allclose(c.M, [[0.04]], rtol=1e-14)
    np.testing.assert_allclose(c.M1, [[0.04]], rtol=1e-14)
    np.testing.assert_allclose(c.M2, [[0.0]], atol=0)
    np.testing.assert_allclose(c.N, [[0.0]], atol=0)
    np.testing.assert_allclose(c.beta, [0.02], rtol=1e-14)
    np.testing.assert_allclose(c.mu1, [0.10], rtol=1e-14)
    np.testing.assert_allclose(c.mu2, [0.0], atol=0)


def test_scott_volatility_split_gives_exact_N():
    rho = 0.5
    m = builtin_model("scott_bounded_vol", {"rho": rho})
    for y in (-2.0, 0.0, 1.3):
        c = eval_coefficients(m, StatePoint(0.2, np.array([0.1]),
                                            np.array([y])))
        # N = sigma2' M^{-1} sigma2 collapses to rho^2 for this split.
        assert c.N[0, 0] == pytest.approx(rho ** 2, abs=1e-14)
        assert np.linalg.eigvalsh(c.M).min() > 0


def test_scott_total_volatility_bounded():
    m = builtin_model("scott_bounded_vol",
                      {"sigma_min": 0.1, "sigma_ampl": 0.3})
    for y in np.linspace(-50, 50, 11):
        c = eval_coefficients(m, StatePoint(0.0, np.array([0.0]),
                                            np.array([y])))
        s_tot = np.sqrt(c.M[0, 0])
        assert 0.1 <= s_tot <= 0.4


def test_spec_rejects_bad_exponent():
    m = builtin_model("merton_constant")
    with pytest.raises(ValueError):
        builtin_model("merton_constant", {"a": 0.0})
    with pytest.raises(ValueError):
        builtin_model("merton_constant", {"a": 1.0})
    assert m.a == 0.5


def test_unknown_builtin():
    with pytest.raises(ValueError, match="unknown builtin"):
        builtin_model("nope")


def test_degenerate_market_rejected():
    base = builtin_model("merton_constant")
    flat = ModelSpec(n=1, m=1, d=1, T=1.0, a=0.5,
                     mu1_tilde=base.mu1_tilde,
                     sigma1=lambda t, z: np.zeros(
                         np.asarray(z, float).shape[:-1] + (1, 1)),
                     sigma2=base.sigma2, mu2=base.mu2, vectorized=True)
    with pytest.raises(DegeneratePointError):
        eval_coefficients(flat, ORIGIN)
    with pytest.raises(ValueError):
        builtin_model("merton_constant", {"sigma": 0.0})


def test_batched_fields_match_pointwise():
    m = builtin_model("scott_bounded_vol")
    rng = np.random.default_rng(5)
    z = rng.normal(size=(7, 2))
    f = coefficient_fields(m, 0.3, z)
    for i in range(7):
        c = eval_coefficients(m, StatePoint(0.3, z[i, :1], z[i, 1:]))
        np.testing.assert_allclose(f["M"][i], c.M, rtol=1e-13)
        np.testing.assert_allclose(f["mu1"][i], c.mu1, rtol=1e-13)
        np.testing.assert_allclose(f["sigma"][i], c.sigma, rtol=1e-13)
        np.testing.assert_allclose(f["N"][i], c.N, rtol=1e-12, atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0.05, 20.0), min_size=1, max_size=4),
       st.integers(0, 10 ** 6))
def test_matrix_sqrt_spd_squares_back(eigs, seed):
    k = len(eigs)
    rng = np.random.default_rng(seed)
    Q, _ = np.linalg.qr(rng.normal(size=(k, k)))
    M = Q @ np.diag(eigs) @ Q.T
    M = 0.5 * (M + M.T)
    root = matrix_sqrt_spd(M)
    np.testing.assert_allclose(root @ root, M, rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(root, root.T, atol=1e-12)


def test_matrix_sqrt_rejects_asymmetric():
    with pytest.raises(ValueError):
        matrix_sqrt_spd(np.array([[1.0, 0.5], [0.0, 1.0]]))


def test_condition_report_passes_for_builtins():
    box = (np.array([-1.0, -3.0]), np.array([1.0, 3.0]))
    for name in ("merton_constant", "scott_bounded_vol"):
        rep = check_conditions(builtin_model(name), box, sample_count=64)
        assert rep.all_pass, [r.condition for r in rep.records
                              if not r.passed]
        payload = rep.to_json()
        assert payload["all_pass"] is True
        assert {"condition", "max_value", "bound", "pass"} <= set(
            payload["records"][0])


def test_condition_report_flags_violation():
    # Shrink the B2 volatility bound below the model's actual sup.
    m = builtin_model("scott_bounded_vol")
    box = (np.array([-1.0, -3.0]), np.array([1.0, 3.0]))
    rep = check_conditions(m, box, sample_count=64,
                           bounds={"B2_sigma": 1e-3})
    assert not rep.all_pass


def test_condition_check_deterministic():
    m = builtin_model("scott_bounded_vol")
    box = (np.array([-1.0, -3.0]), np.array([1.0, 3.0]))
    r1 = check_conditions(m, box, sample_count=64, seed=9)
    r2 = check_conditions(m, box, sample_count=64, seed=9)
    assert r1.to_json() == r2.to_json()


def test_price_dependent_model_varies_in_x():
    m = builtin_model("price_dependent_test", {"coupling": 0.5})
    assert m.vectorized
    c0 = eval_coefficients(m, StatePoint(0.0, np.array([0.0]),
                                         np.array([0.0])))
    c1 = eval_coefficients(m, StatePoint(0.0, np.array([1.0]),
                                         np.array([0.0])))
    assert abs(c0.M[0, 0] - c1.M[0, 0]) > 1e-6


def test_statepoint_concatenates():
    pt = StatePoint(0.5, np.array([1.0, 2.0]), np.array([3.0]))
    np.testing.assert_array_equal(pt.z, [1.0, 2.0, 3.0])


def test_modelspec_dim():
    m = builtin_model("scott_bounded_vol")
    assert m.dim == m.n + m.d == 2


def test_modelspec_validation():
    m = builtin_model("merton_constant")
    with pytest.raises(ValueError):
        ModelSpec(n=m.n, m=m.m, d=m.d, T=-1.0, a=m.a,
                  mu1_tilde=m.mu1_tilde, sigma1=m.sigma1,
                  sigma2=m.sigma2, mu2=m.mu2)
