"""Simulation estimators: determinism, exactness cases, diagnostics."""

import numpy as np
import pytest

from hjbfolio import montecarlo as mc
from hjbfolio import pde
from hjbfolio.model import builtin_model

Z0 = np.zeros(2)


@pytest.fixture(scope="module")
def merton():
    return builtin_model("merton_constant")


@pytest.fixture(scope="module")
def scott():
    return builtin_model("scott_bounded_vol")


@pytest.fixture(scope="module")
def merton_field(merton):
    grid = pde.default_grid(merton, Z0, nodes=21, time_steps=32)
    return pde.solve_semilinear(merton, grid, pde.SolverConfig())


def sim(seed=1, n_paths=4000, n_steps=32, **kw):
    return mc.SimConfig(seed=seed, n_paths=n_paths, n_steps=n_steps, **kw)


def test_simconfig_validation():
    with pytest.raises(ValueError):
        mc.SimConfig(seed=0, n_paths=0)
    with pytest.raises(ValueError):
        mc.SimConfig(seed=0, n_steps=0)


def test_direct_estimator_determinism(merton):
    pi = np.array([5.0])
    e1 = mc.estimate_utility_direct(merton, pi, 1.0, 0.0, Z0, sim(seed=42))
    e2 = mc.estimate_utility_direct(merton, pi, 1.0, 0.0, Z0, sim(seed=42))
    e3 = mc.estimate_utility_direct(merton, pi, 1.0, 0.0, Z0, sim(seed=43))
    assert e1.mean == e2.mean and e1.stderr == e2.stderr
    assert e1.mean != e3.mean


def test_direct_estimator_consistent(merton):
    # True value at the Merton weight is 2 e^{0.125}.
    e = mc.estimate_utility_direct(merton, np.array([5.0]), 1.0, 0.0, Z0,
                                   sim(n_paths=30000, n_steps=64))
    assert abs(e.mean - 2.0 * np.exp(0.125)) < 4.0 * e.stderr + 5e-3


def test_girsanov_zero_variance_at_merton_optimum(merton):
    # The Girsanov integrand is constant for constant coefficients, so the
    # tilted estimator collapses to the closed-form value with zero spread.
    e = mc.estimate_utility_girsanov(merton, np.array([5.0]), 1.0, 0.0, Z0,
                                     sim(n_paths=500))
    assert e.mean == pytest.approx(2.0 * np.exp(0.125), rel=1e-12)
    assert e.stderr < 1e-15


def test_homogeneity_is_exact(merton):
    pi = np.array([5.0])
    e1 = mc.estimate_utility_direct(merton, pi, 1.0, 0.0, Z0, sim())
    e2 = mc.estimate_utility_direct(merton, pi, 2.0, 0.0, Z0, sim())
    assert e2.mean == 2.0 ** merton.a * e1.mean


def test_antithetic_pairing(merton):
    e = mc.estimate_utility_direct(merton, np.array([5.0]), 1.0, 0.0, Z0,
                                   sim(antithetic=True))
    assert np.isfinite(e.mean)
    # Antithetic noise must be deterministic too.
    e2 = mc.estimate_utility_direct(merton, np.array([5.0]), 1.0, 0.0, Z0,
                                    sim(antithetic=True))
    assert e.mean == e2.mean


def test_block_boundary_path_counts(merton):
    # Path counts straddling the RNG block size must work.
    for n in (mc.BLOCK_SIZE - 1, mc.BLOCK_SIZE, mc.BLOCK_SIZE + 100):
        e = mc.estimate_utility_direct(merton, np.array([5.0]), 1.0, 0.0,
                                       Z0, sim(n_paths=n, n_steps=4))
        assert e.n_paths == n


def test_dual_value_merton_exact(merton, merton_field):
    # nu_hat is constant, L is constant: zero-variance recovery of u(0).
    nu = mc.dual_control_from_field(merton_field, merton)
    e = mc.estimate_dual_value(merton, nu, 0.0, Z0, sim(n_paths=500))
    assert e.mean == pytest.approx(-0.125, abs=1e-12)
    assert e.stderr < 1e-15


def test_dual_gradient_merton_exactly_zero(merton, merton_field):
    nu = mc.dual_control_from_field(merton_field, merton)
    e = mc.estimate_dual_gradient(merton, nu, 0.0, Z0, sim(n_paths=500))
    np.testing.assert_array_equal(e.mean, [0.0, 0.0])
    np.testing.assert_array_equal(e.stderr, [0.0, 0.0])


def test_dual_minimality(merton, merton_field):
    # Any perturbed control must not beat the optimal one.
    nu = mc.dual_control_from_field(merton_field, merton)
    base = mc.estimate_dual_value(merton, nu, 0.0, Z0, sim())
    worse = mc.estimate_dual_value(merton, nu.shifted([0.3, 0.0]), 0.0, Z0,
                                   sim())
    assert worse.mean >= base.mean - 3.0 * np.hypot(base.stderr,
                                                    worse.stderr)


def test_markov_control_clipping():
    ctrl = mc.MarkovControl.constant([3.0, 4.0], bound=1.0)
    out = ctrl(0.0, np.zeros((5, 2)))
    np.testing.assert_allclose(np.linalg.norm(out, axis=-1), 1.0, rtol=1e-12)


def test_constant_policy_accepts_scalar_state(scott):
    e = mc.estimate_utility_direct(scott, np.array([2.0]), 1.0, 0.0, Z0,
                                   sim(n_paths=1000, n_steps=16))
    assert np.isfinite(e.mean) and e.stderr > 0


def test_simulate_state_shapes(scott):
    out = mc.simulate_state(scott, "physical", 0.0, Z0,
                            sim(n_paths=100, n_steps=8))
    assert out["terminal"].shape == (100, 2)
    assert np.all(np.isfinite(out["terminal"]))
    assert out["excluded"] == 0
    with pytest.raises(ValueError):
        mc.simulate_state(scott, "lognormal", 0.0, Z0, sim())
    with pytest.raises(ValueError):
        mc.simulate_state(scott, "dual", 0.0, Z0, sim())


def test_box_exit_error_on_tiny_grid(scott):
    # A solve box far smaller than the diffusion scale forces the policy
    # interpolator to clamp most lookups.
    grid = pde.make_grid(scott, [-0.1, -0.1], [0.1, 0.1], 5, 600)
    field = pde.solve_semilinear(scott, grid, pde.SolverConfig())
    pol = pde.extract_policy(field, scott)
    with pytest.raises(mc.BoxExitError):
        mc.estimate_utility_direct(scott, pol, 1.0, 0.0, Z0,
                                   sim(n_paths=1000, n_steps=16))


def test_estimate_to_json(merton):
    e = mc.estimate_utility_direct(merton, np.array([5.0]), 1.0, 0.0, Z0,
                                   sim(n_paths=100, n_steps=4))
    payload = e.to_json()
    assert payload["estimator"] == "direct"
    assert {"mean", "stderr", "n_paths", "n_steps", "seed"} <= set(payload)


def test_admissibility_diagnostic(scott):
    d = mc.admissibility_diagnostic(scott, np.array([2.0]), 0.0, Z0,
                                    sim(n_paths=2000, n_steps=32))
    assert d["moments_finite"]
    assert d["risk_ratio_max"] >= 0.0
    assert len(d["exp_moments"]) == 4
