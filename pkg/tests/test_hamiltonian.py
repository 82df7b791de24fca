"""Hamiltonian algebra: closed form, Schur solves, duality, cutoff."""

import numpy as np
import pytest

from hjbfolio.hamiltonian import (
    assemble_quadratic,
    dual_maximizer,
    hamiltonian_closed,
    hamiltonian_field,
    hamiltonian_maxform,
    hamiltonian_truncated,
    optimal_portfolio,
    quadratic_fields,
    running_cost_L,
)
from hjbfolio.model import (
    StatePoint,
    builtin_model,
    coefficient_fields,
    eval_coefficients,
)


def merton_qf(a=0.5):
    m = builtin_model("merton_constant", {"a": a})
    c = eval_coefficients(m, StatePoint(0.0, np.zeros(1), np.zeros(1)))
    return c, assemble_quadratic(c, c.mu2, a)


def random_coeffs(rng, model):
    t = rng.uniform(0.0, model.T)
    z = rng.normal(size=2, scale=1.5)
    return eval_coefficients(model, StatePoint(t, z[:1], z[1:]))


def test_hand_values():
    c, qf = merton_qf()
    np.testing.assert_allclose(qf.A, np.diag([0.08, 1.0]), atol=1e-15)
    np.testing.assert_allclose(qf.ell, [0.18, 0.0], atol=1e-15)
    assert qf.k == pytest.approx(0.125, abs=1e-15)
    r = np.array([1.0, 0.0])
    assert hamiltonian_closed(qf, r) == pytest.approx(-0.015, abs=1e-12)
    assert running_cost_L(qf, np.zeros(2)) == pytest.approx(0.0775,
                                                            abs=1e-12)
    np.testing.assert_allclose(dual_maximizer(qf, r), [0.10, 0.0],
                               atol=1e-15)


def test_hand_values_negative_power():
    _, qf = merton_qf(a=-1.0)
    assert qf.k == pytest.approx(-0.0625, abs=1e-15)


def test_cutoff_hand_case():
    _, qf = merton_qf()
    res = hamiltonian_truncated(qf, np.array([1.0, 0.0]), 0.05)
    assert res.value == pytest.approx(-0.030625, abs=1e-9)
    assert res.active
    assert np.linalg.norm(res.maximizer) == pytest.approx(0.05, rel=1e-12)
    assert res.kkt_residual <= 1e-9


def test_cutoff_inactive_reduces_to_closed_form():
    _, qf = merton_qf()
    r = np.array([0.3, -0.2])
    res = hamiltonian_truncated(qf, r, 50.0)
    assert not res.active
    assert res.multiplier == 0.0
    assert res.value == hamiltonian_closed(qf, r)
    np.testing.assert_allclose(res.maximizer, dual_maximizer(qf, r),
                               rtol=1e-12)


def test_schur_apply_and_solve_match_dense():
    rng = np.random.default_rng(2)
    model = builtin_model("scott_bounded_vol")
    for _ in range(25):
        c = random_coeffs(rng, model)
        qf = assemble_quadratic(c, c.mu2, model.a)
        r = rng.normal(size=2)
        np.testing.assert_allclose(qf.apply(r), qf.A @ r, rtol=1e-12)
        np.testing.assert_allclose(qf.solve(r), np.linalg.solve(qf.A, r),
                                   rtol=1e-10)


def test_schur_factors_reconstruct_A():
    rng = np.random.default_rng(3)
    model = builtin_model("scott_bounded_vol", {"rho": -0.7})
    c = random_coeffs(rng, model)
    qf = assemble_quadratic(c, c.mu2, model.a)
    T, D = qf.schur_T, qf.schur_D
    np.testing.assert_allclose(T @ D @ T.T, qf.A, rtol=1e-12)
    assert np.linalg.eigvalsh(qf.A).min() > 0


def test_maxform_matches_closed_form():
    rng = np.random.default_rng(4)
    for name in ("merton_constant", "scott_bounded_vol",
                 "price_dependent_test"):
        model = builtin_model(name)
        for _ in range(50):
            c = random_coeffs(rng, model)
            qf = assemble_quadratic(c, c.mu2, model.a)
            r = rng.normal(size=2, scale=2.0)
            h1 = hamiltonian_closed(qf, r)
            h2 = hamiltonian_maxform(c, model.a, r)
            assert h2 == pytest.approx(h1, rel=1e-9, abs=1e-12)


def test_duality_inequality_and_tightness():
    rng = np.random.default_rng(6)
    model = builtin_model("scott_bounded_vol")
    for _ in range(30):
        c = random_coeffs(rng, model)
        qf = assemble_quadratic(c, c.mu2, model.a)
        r = rng.normal(size=2)
        h = hamiltonian_closed(qf, r)
        rhat = dual_maximizer(qf, r)
        # Tight at the dual maximizer...
        assert -rhat @ r - running_cost_L(qf, rhat) == pytest.approx(
            h, rel=1e-10, abs=1e-12)
        # ... and an upper bound everywhere else.
        for rho in rng.normal(size=(20, 2), scale=2.0):
            assert -rho @ r - running_cost_L(qf, rho) <= h + 1e-10


def test_optimal_portfolio_merton():
    c, _ = merton_qf()
    pi = optimal_portfolio(c, 0.5, np.zeros(2))
    np.testing.assert_allclose(pi, [5.0], rtol=1e-12)
    pi, risk = optimal_portfolio(c, 0.5, np.zeros(2), with_risk=True)
    assert risk == pytest.approx((0.2 * 5.0) ** 2, rel=1e-12)


def test_truncated_value_decreases_with_R():
    _, qf = merton_qf()
    r = np.array([1.0, 0.0])
    values = [hamiltonian_truncated(qf, r, R).value
              for R in (0.01, 0.05, 0.2, 1.0, 10.0)]
    assert all(a <= b + 1e-14 for a, b in zip(values, values[1:]))
    assert values[-1] == pytest.approx(hamiltonian_closed(qf, r), abs=1e-12)


def test_field_evaluation_matches_scalar():
    model = builtin_model("scott_bounded_vol")
    rng = np.random.default_rng(8)
    z = rng.normal(size=(9, 2))
    r = rng.normal(size=(9, 2))
    f = coefficient_fields(model, 0.4, z)
    A, ell, k = quadratic_fields(f, model.a)
    hv = hamiltonian_field(A, ell, k, r)
    for i in range(9):
        c = eval_coefficients(model, StatePoint(0.4, z[i, :1], z[i, 1:]))
        qf = assemble_quadratic(c, c.mu2, model.a)
        assert hv[i] == pytest.approx(hamiltonian_closed(qf, r[i]),
                                      rel=1e-12)
