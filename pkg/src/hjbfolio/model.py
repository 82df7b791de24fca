"""Market model definitions and pointwise coefficient algebra.

A model is a set of coefficient functions on [0, T] x E, E = R^n x R^d:
the log-price drift mu1_tilde, the price volatilities sigma1 (traded noise)
and sigma2 (exogenous noise), and the factor drift mu2.  From these we
derive the covariance matrices M1, M2, M, the Ito correction beta, the
full drift mu1 = mu1_tilde + beta and the contraction N = sigma2' M^-1
sigma2, whose operator norm stays strictly below 1 whenever M1 is
invertible.

Coefficient functions may be vectorized (accept a leading batch axis on z)
which the PDE and Monte Carlo modules exploit; set ``vectorized=True`` on
the spec only if they are.  All builtins are vectorized.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import expit
from scipy.stats import qmc


class DegeneratePointError(ValueError):
    """M (or A) is numerically singular at a model point."""

    def __init__(self, msg, point=None, min_eig=None):
        super().__init__(msg)
        self.point = point
        self.min_eig = min_eig


@dataclass(frozen=True)
class ModelSpec:
    """Immutable market model: dimensions, horizon, utility power, coefficients.

    Coefficient signatures (z = (x, y) concatenated, shape (..., n+d)):
      mu1_tilde(t, z) -> (..., n)
      sigma1(t, z)    -> (..., n, m)
      sigma2(t, z)    -> (..., n, d)
      mu2(t, y)       -> (..., d)
    """

    n: int
    m: int
    d: int
    T: float
    a: float
    mu1_tilde: Callable
    sigma1: Callable
    sigma2: Callable
    mu2: Callable
    name: str = "custom"
    params: dict = field(default_factory=dict)
    vectorized: bool = False

    def __post_init__(self):
        if self.n < 1 or self.m < 1 or self.d < 1:
            raise ValueError("dimensions n, m, d must all be >= 1")
        if not self.T > 0:
            raise ValueError("horizon T must be positive")
        if not (self.a < 1.0) or self.a == 0.0:
            raise ValueError("utility power a must lie in (-inf, 1) \\ {0}")

    @property
    def dim(self) -> int:
        return self.n + self.d


@dataclass(frozen=True)
class StatePoint:
    """A space-time point (t, z) with z = (x, y)."""

    t: float
    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "x", np.atleast_1d(np.asarray(self.x, float)))
        object.__setattr__(self, "y", np.atleast_1d(np.asarray(self.y, float)))

    @property
    def z(self) -> np.ndarray:
        return np.concatenate([self.x, self.y])


@dataclass
class DerivedCoefficients:
    """All derived matrices of a model at one point."""

    M1: np.ndarray
    M2: np.ndarray
    M: np.ndarray
    N: np.ndarray
    beta: np.ndarray
    mu1: np.ndarray
    mu1_tilde: np.ndarray
    mu2: np.ndarray
    sigma: np.ndarray     # n x (m+d) block [sigma1 sigma2]
    sigma1: np.ndarray
    sigma2: np.ndarray


def _as_batch(fn, t, z, out_shape):
    """Evaluate a possibly non-vectorized coefficient function on a z batch."""
    z = np.asarray(z, float)
    if z.ndim == 1:
        return np.asarray(fn(t, z), float).reshape(out_shape)
    flat = z.reshape(-1, z.shape[-1])
    out = np.empty((flat.shape[0],) + out_shape)
    for i, zi in enumerate(flat):
        out[i] = np.asarray(fn(t, zi), float).reshape(out_shape)
    return out.reshape(z.shape[:-1] + out_shape)


def coefficient_fields(spec: ModelSpec, t: float, z: np.ndarray) -> dict:
    """Evaluate all derived coefficients on a batch of points.

    Returns a dict of arrays with leading batch shape ``z.shape[:-1]``:
    sigma1, sigma2, sigma, M1, M2, M, beta, mu1_tilde, mu1, mu2, N.
    Raises DegeneratePointError if M is singular anywhere in the batch.
    """
    z = np.asarray(z, float)
    n, m, d = spec.n, spec.m, spec.d
    y = z[..., n:]
    if spec.vectorized:
        s1 = np.asarray(spec.sigma1(t, z), float)
        s2 = np.asarray(spec.sigma2(t, z), float)
        m1t = np.asarray(spec.mu1_tilde(t, z), float)
        m2v = np.asarray(spec.mu2(t, y), float)
        batch = z.shape[:-1]
        s1 = np.broadcast_to(s1, batch + (n, m)).copy()
        s2 = np.broadcast_to(s2, batch + (n, d)).copy()
        m1t = np.broadcast_to(m1t, batch + (n,)).copy()
        m2v = np.broadcast_to(m2v, batch + (d,)).copy()
    else:
        s1 = _as_batch(spec.sigma1, t, z, (n, m))
        s2 = _as_batch(spec.sigma2, t, z, (n, d))
        m1t = _as_batch(spec.mu1_tilde, t, z, (n,))
        m2v = _as_batch(spec.mu2, t, y, (d,))

    if not (np.all(np.isfinite(s1)) and np.all(np.isfinite(s2))
            and np.all(np.isfinite(m1t)) and np.all(np.isfinite(m2v))):
        raise DegeneratePointError("coefficient function returned non-finite values")

    sigma = np.concatenate([s1, s2], axis=-1)
    M1 = s1 @ np.swapaxes(s1, -1, -2)
    M2 = s2 @ np.swapaxes(s2, -1, -2)
    M = M1 + M2
    beta = 0.5 * np.einsum("...ij,...ij->...i", sigma, sigma)
    mu1 = m1t + beta

    eigs = np.linalg.eigvalsh(M)
    min_eig = eigs[..., 0]
    max_eig = eigs[..., -1]
    bad = min_eig <= 1e-14 * np.maximum(1.0, max_eig)
    if np.any(bad):
        idx = np.unravel_index(np.argmax(bad), bad.shape) if bad.shape else ()
        raise DegeneratePointError(
            "M is singular at a grid point (Condition B4 fails pointwise)",
            point=z[idx] if z.ndim > 1 else z,
            min_eig=float(np.min(min_eig)),
        )

    # N = sigma2' M^-1 sigma2 via linear solve, never an explicit inverse.
    Minv_s2 = np.linalg.solve(M, s2)
    N = np.einsum("...ij,...ik->...jk", s2, Minv_s2)

    return {
        "sigma1": s1, "sigma2": s2, "sigma": sigma,
        "M1": M1, "M2": M2, "M": M,
        "beta": beta, "mu1_tilde": m1t, "mu1": mu1, "mu2": m2v, "N": N,
    }


def eval_coefficients(spec: ModelSpec, pt: StatePoint) -> DerivedCoefficients:
    """Assemble M1, M2, M, N, beta, mu1 and the volatility block at one point."""
    f = coefficient_fields(spec, pt.t, pt.z)
    return DerivedCoefficients(
        M1=f["M1"], M2=f["M2"], M=f["M"], N=f["N"], beta=f["beta"],
        mu1=f["mu1"], mu1_tilde=f["mu1_tilde"], mu2=f["mu2"],
        sigma=f["sigma"], sigma1=f["sigma1"], sigma2=f["sigma2"],
    )


def matrix_sqrt_spd(M1: np.ndarray) -> np.ndarray:
    """Symmetric square root of an SPD matrix via eigendecomposition."""
    M1 = np.asarray(M1, float)
    if M1.ndim != 2 or M1.shape[0] != M1.shape[1]:
        raise ValueError("matrix_sqrt_spd expects a square matrix")
    scale = max(1.0, float(np.abs(M1).max()))
    if np.abs(M1 - M1.T).max() > 1e-12 * scale:
        raise ValueError("matrix_sqrt_spd expects a symmetric matrix")
    w, Q = np.linalg.eigh(0.5 * (M1 + M1.T))
    if w[0] <= 0:
        raise ValueError(f"matrix_sqrt_spd expects positive eigenvalues, got {w[0]:.3e}")
    S = (Q * np.sqrt(w)) @ Q.T
    return 0.5 * (S + S.T)


# ---------------------------------------------------------------------------
# Condition diagnostics
# ---------------------------------------------------------------------------

#: Default bounds for check_conditions; a record fails when the sampled max
#: exceeds its bound.  Users pass their own dict to override.
DEFAULT_BOUNDS = {
    "A1": 50.0,     # |d(mu1_tilde)/dz|, |d(sigma)/dz|
    "A2": 50.0,     # |d(mu2)/dy|
    "B1": 50.0,     # finite-difference continuity of sigma
    "B2_sigma": 10.0,     # |sigma|
    "B2_M1inv": 1.0e4,    # |M1^-1|
    "B3": 10.0,     # |mu1_tilde| / sqrt(1+|y|), |mu2| / sqrt(1+|y|)
    "B4": 100.0,    # |M^-1/2 mu1|^2 and its z-gradient
    "C1": 50.0,     # |d(sigma2' M^-1 mu1)/dz| / sqrt(1+|y|)
}


@dataclass
class ConditionRecord:
    condition: str
    expression: str
    max_value: float
    argmax_point: list
    bound: float
    passed: bool
    note: str = ""

    def to_json(self) -> dict:
        return {
            "condition": self.condition,
            "expression": self.expression,
            "max_value": self.max_value,
            "argmax_point": self.argmax_point,
            "bound": self.bound,
            "pass": self.passed,
            "note": self.note,
        }


@dataclass
class ConditionReport:
    records: list
    sample_count: int
    seed: int

    @property
    def all_pass(self) -> bool:
        return all(r.passed for r in self.records)

    def to_json(self) -> dict:
        return {
            "sample_count": self.sample_count,
            "seed": self.seed,
            "all_pass": self.all_pass,
            "records": [r.to_json() for r in self.records],
        }


def _fd_jacobian_norm(fn, t, z, rel_step=1e-5):
    """Spectral norm of the finite-difference z-Jacobian of fn(t, z)."""
    z = np.asarray(z, float)
    h = rel_step * (1.0 + np.linalg.norm(z))
    cols = []
    for j in range(z.size):
        e = np.zeros_like(z)
        e[j] = h
        fp = np.asarray(fn(t, z + e), float).ravel()
        fm = np.asarray(fn(t, z - e), float).ravel()
        cols.append((fp - fm) / (2.0 * h))
    J = np.column_stack(cols)
    return float(np.linalg.norm(J, 2))


def check_conditions(spec: ModelSpec, box, sample_count: int = 256,
                     seed: int = 0, bounds: dict | None = None) -> ConditionReport:
    """Spot-check the model's structural conditions at quasi-random points.

    ``box`` is a pair (lo, hi) of length-(n+d) arrays.  Each record reports
    the sampled maximum of the bounded quantity, the worst point, and
    pass/fail against the supplied bound.  Diagnostic only: failures are
    recorded, never raised.
    """
    lo = np.asarray(box[0], float)
    hi = np.asarray(box[1], float)
    b = dict(DEFAULT_BOUNDS)
    if bounds:
        b.update(bounds)
    nd = spec.dim
    n = spec.n

    sampler = qmc.Sobol(d=1 + nd, scramble=True, seed=seed)
    pts = sampler.random(sample_count)
    ts = pts[:, 0] * spec.T
    zs = lo + pts[:, 1:] * (hi - lo)

    def sig_fn(t, z):
        p = StatePoint(t, z[:n], z[n:])
        c = eval_coefficients(spec, p)
        return c.sigma

    quantities = {
        ("A1", "|d(mu1_tilde)/dz| (sampled, not proved)"): [],
        ("A1", "|d(sigma)/dz| (sampled, not proved)"): [],
        ("A2", "|d(mu2)/dy| (sampled, not proved)"): [],
        ("B1", "finite-difference |d(sigma)/dz| continuity spot-check"): [],
        ("B2_sigma", "|sigma|"): [],
        ("B2_M1inv", "|M1^-1|"): [],
        ("B2_M1inv", "|N| (info: 1-|N| should stay away from 0)"): [],
        ("B3", "|mu1_tilde| / sqrt(1+|y|)"): [],
        ("B3", "|mu2| / sqrt(1+|y|)"): [],
        ("B4", "|M^-1/2 mu1|^2"): [],
        ("B4", "|d(|M^-1/2 mu1|^2)/dz| (finite differences)"): [],
        ("C1", "|d(sigma2' M^-1 mu1)/dz| / sqrt(1+|y|)"): [],
    }

    def b4_fn(t, z):
        p = StatePoint(t, z[:n], z[n:])
        c = eval_coefficients(spec, p)
        w = np.linalg.solve(c.M, c.mu1)
        return np.array([float(c.mu1 @ w)])

    def c1_fn(t, z):
        p = StatePoint(t, z[:n], z[n:])
        c = eval_coefficients(spec, p)
        return c.sigma2.T @ np.linalg.solve(c.M, c.mu1)

    for t, z in zip(ts, zs):
        pt = StatePoint(t, z[:n], z[n:])
        y = pt.y
        sqrt_y = math.sqrt(1.0 + np.linalg.norm(y))
        try:
            c = eval_coefficients(spec, pt)
            degenerate = False
        except DegeneratePointError:
            degenerate = True

        def mu1t_fn(tt, zz):
            return np.asarray(spec.mu1_tilde(tt, zz), float)

        def mu2_fn(tt, yy):
            return np.asarray(spec.mu2(tt, yy), float)

        q = quantities
        q[("A1", "|d(mu1_tilde)/dz| (sampled, not proved)")].append(
            (_fd_jacobian_norm(mu1t_fn, t, z), z))
        sig_grad = _fd_jacobian_norm(sig_fn, t, z) if not degenerate else math.inf
        q[("A1", "|d(sigma)/dz| (sampled, not proved)")].append((sig_grad, z))
        q[("A2", "|d(mu2)/dy| (sampled, not proved)")].append(
            (_fd_jacobian_norm(mu2_fn, t, y), z))
        q[("B1", "finite-difference |d(sigma)/dz| continuity spot-check")].append(
            (sig_grad, z))
        q[("B3", "|mu1_tilde| / sqrt(1+|y|)")].append(
            (float(np.linalg.norm(mu1t_fn(t, z))) / sqrt_y, z))
        q[("B3", "|mu2| / sqrt(1+|y|)")].append(
            (float(np.linalg.norm(mu2_fn(t, y))) / sqrt_y, z))

        if degenerate:
            for key in (("B2_sigma", "|sigma|"), ("B2_M1inv", "|M1^-1|"),
                        ("B2_M1inv", "|N| (info: 1-|N| should stay away from 0)"),
                        ("B4", "|M^-1/2 mu1|^2"),
                        ("B4", "|d(|M^-1/2 mu1|^2)/dz| (finite differences)"),
                        ("C1", "|d(sigma2' M^-1 mu1)/dz| / sqrt(1+|y|)")):
                q[key].append((math.inf, z))
            continue

        q[("B2_sigma", "|sigma|")].append((float(np.linalg.norm(c.sigma, 2)), z))
        m1_eigs = np.linalg.eigvalsh(c.M1)
        m1inv = math.inf if m1_eigs[0] <= 0 else 1.0 / float(m1_eigs[0])
        q[("B2_M1inv", "|M1^-1|")].append((m1inv, z))
        q[("B2_M1inv", "|N| (info: 1-|N| should stay away from 0)")].append(
            (float(np.linalg.norm(c.N, 2)), z))
        q[("B4", "|M^-1/2 mu1|^2")].append((float(b4_fn(t, z)[0]), z))
        q[("B4", "|d(|M^-1/2 mu1|^2)/dz| (finite differences)")].append(
            (_fd_jacobian_norm(b4_fn, t, z), z))
        q[("C1", "|d(sigma2' M^-1 mu1)/dz| / sqrt(1+|y|)")].append(
            (_fd_jacobian_norm(c1_fn, t, z) / sqrt_y, z))

    records = []
    for (cond, expr), samples in quantities.items():
        vals = np.array([s[0] for s in samples])
        i = int(np.argmax(vals))
        bound = b[cond] if cond in b else b.get(cond.split("_")[0], math.inf)
        info = "info" in expr
        records.append(ConditionRecord(
            condition=cond.split("_")[0] if "_" in cond else cond,
            expression=expr,
            max_value=float(vals[i]),
            argmax_point=list(np.asarray(samples[i][1], float)),
            bound=math.inf if info else float(bound),
            passed=True if info else bool(vals[i] <= bound),
            note="sampled, not proved" if cond in ("A1", "B1") else "",
        ))
    return ConditionReport(records=records, sample_count=sample_count, seed=seed)


# ---------------------------------------------------------------------------
# Builtin model catalog
# ---------------------------------------------------------------------------

def _const_fn(value, trailing_shape):
    value = np.asarray(value, float).reshape(trailing_shape)

    def fn(t, z):
        z = np.asarray(z, float)
        return np.broadcast_to(value, z.shape[:-1] + trailing_shape)
    return fn


def _merton_constant(params):
    p = {"sigma": 0.2, "mu1_tilde": 0.08, "mu2": 0.0, "a": 0.5, "T": 1.0}
    p.update(params)
    if p["sigma"] <= 0:
        raise ValueError("merton_constant: sigma must be positive")
    return ModelSpec(
        n=1, m=1, d=1, T=float(p["T"]), a=float(p["a"]),
        mu1_tilde=_const_fn([p["mu1_tilde"]], (1,)),
        sigma1=_const_fn([[p["sigma"]]], (1, 1)),
        sigma2=_const_fn([[0.0]], (1, 1)),
        mu2=lambda t, y: np.broadcast_to(
            np.array([p["mu2"]]), np.asarray(y, float).shape[:-1] + (1,)),
        name="merton_constant", params=p, vectorized=True,
    )


def _scott_bounded_vol(params, price_coupling=0.0, name="scott_bounded_vol"):
    p = {"rho": 0.5, "kappa": 1.0, "lam": 2.0, "sigma_min": 0.1,
         "sigma_ampl": 0.3, "a": 0.5, "T": 1.0, "unchecked_ou_drift": False}
    if price_coupling is not None:
        p["coupling"] = price_coupling
    p.update(params)
    rho, kappa, lam = float(p["rho"]), float(p["kappa"]), float(p["lam"])
    smin, sampl = float(p["sigma_min"]), float(p["sigma_ampl"])
    eps = float(p.get("coupling", 0.0))
    if not abs(rho) < 1:
        raise ValueError(f"{name}: need |rho| < 1")
    if smin <= 0 or sampl < 0 or kappa < 0:
        raise ValueError(f"{name}: need sigma_min > 0, sigma_ampl >= 0, kappa >= 0")
    if abs(eps) > 0.9:
        raise ValueError(f"{name}: need |coupling| <= 0.9")

    def s_tot(z):
        z = np.asarray(z, float)
        s = smin + sampl * expit(z[..., 1])
        if eps != 0.0:
            s = s * (1.0 + 0.5 * eps * np.sin(z[..., 0]))
        return s

    def sigma1(t, z):
        return (math.sqrt(1.0 - rho * rho) * s_tot(z))[..., None, None]

    def sigma2(t, z):
        return (rho * s_tot(z))[..., None, None]

    def mu1_tilde(t, z):
        s2 = s_tot(z) ** 2
        return ((lam - 0.5) * s2)[..., None]

    if p["unchecked_ou_drift"]:
        def mu2(t, y):
            return -kappa * np.asarray(y, float)
    else:
        def mu2(t, y):
            return -kappa * np.tanh(np.asarray(y, float))

    return ModelSpec(
        n=1, m=1, d=1, T=float(p["T"]), a=float(p["a"]),
        mu1_tilde=mu1_tilde, sigma1=sigma1, sigma2=sigma2, mu2=mu2,
        name=name, params=p, vectorized=True,
    )


_BUILTINS = {
    "merton_constant": lambda params: _merton_constant(params),
    "scott_bounded_vol": lambda params: _scott_bounded_vol(params, price_coupling=None),
    "price_dependent_test": lambda params: _scott_bounded_vol(
        params, price_coupling=0.3, name="price_dependent_test"),
}


def builtin_model(name: str, params: dict | None = None) -> ModelSpec:
    """Construct a catalog model by name.

    Catalog: merton_constant (constant coefficients, sigma2 = 0),
    scott_bounded_vol (logistic-bounded volatility, tanh-bounded factor
    drift, correlation rho with N = rho^2 exactly), price_dependent_test
    (scott with bounded x-modulation of the volatility surface).
    """
    if name not in _BUILTINS:
        raise ValueError(f"unknown builtin model {name!r}; have {sorted(_BUILTINS)}")
    return _BUILTINS[name](dict(params or {}))
