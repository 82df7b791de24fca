"""Pointwise quadratic Hamiltonian, its Schur factors, dual cost and cutoff.

The optimized generator term is the convex quadratic

    H(t, z, r) = 1/2 (r, A r) - (r, ell) + k,

with A factorized as T D T' where T is unit lower block-triangular and
D = blockdiag(M / (1-a), I - N).  The dual running cost L is the
Legendre-Fenchel conjugate of H (in -rbar) and the cutoff Hamiltonian H^R
is the same conjugate maximization restricted to the ball |rbar| <= R,
solved exactly as a trust-region subproblem via the secular equation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.optimize import brentq

from .model import DegeneratePointError, DerivedCoefficients


@dataclass
class QuadraticForm:
    """The triple (A, ell, k) at one model point plus Schur factors."""

    A: np.ndarray          # (n+d) x (n+d) symmetric positive definite
    ell: np.ndarray        # (n+d,)
    k: float
    n: int
    d: int
    schur_T: np.ndarray    # unit lower block-triangular
    schur_D: np.ndarray    # blockdiag(M/(1-a), I - N)
    _M_cho: tuple          # cholesky factor of M
    _sigma2: np.ndarray
    _N: np.ndarray
    _a: float

    def apply(self, r: np.ndarray) -> np.ndarray:
        """A r through the factorization T (D (T' r))."""
        return self.schur_T @ (self.schur_D @ (self.schur_T.T @ r))

    def solve(self, b: np.ndarray) -> np.ndarray:
        """Solve A w = b through the block factors, no dense inverse."""
        n = self.n
        b = np.asarray(b, float)
        # T y = b
        y1 = b[:n]
        y2 = b[n:] - self._sigma2.T @ cho_solve(self._M_cho, y1)
        # D v = y
        v1 = (1.0 - self._a) * cho_solve(self._M_cho, y1)
        v2 = np.linalg.solve(np.eye(self.d) - self._N, y2)
        # T' w = v
        w2 = v2
        w1 = v1 - cho_solve(self._M_cho, self._sigma2 @ w2)
        return np.concatenate([w1, w2])


@dataclass
class TruncatedMaxResult:
    value: float
    maximizer: np.ndarray
    active: bool
    multiplier: float
    kkt_residual: float


def assemble_quadratic(coeffs: DerivedCoefficients, mu2_val: np.ndarray,
                       a: float) -> QuadraticForm:
    """Build (A, ell, k) and the Schur factors at one model point."""
    M, s2, N = coeffs.M, coeffs.sigma2, coeffs.N
    mu1, beta = coeffs.mu1, coeffs.beta
    mu2_val = np.asarray(mu2_val, float)
    n = mu1.size
    d = mu2_val.size
    one = 1.0 / (1.0 - a)

    eigs = np.linalg.eigvalsh(M)
    if eigs[0] <= 1e-14 * max(1.0, eigs[-1]):
        raise DegeneratePointError("singular M in assemble_quadratic",
                                   min_eig=float(eigs[0]))

    A = np.zeros((n + d, n + d))
    A[:n, :n] = one * M
    A[:n, n:] = one * s2
    A[n:, :n] = one * s2.T
    A[n:, n:] = np.eye(d) + (a * one) * N

    M_cho = cho_factor(M)
    Minv_mu1 = cho_solve(M_cho, mu1)
    ell = np.concatenate([one * mu1 - beta,
                          mu2_val + (a * one) * (s2.T @ Minv_mu1)])
    k = 0.5 * a * one * float(mu1 @ Minv_mu1)

    T = np.eye(n + d)
    T[n:, :n] = s2.T @ cho_solve(M_cho, np.eye(n))
    D = np.zeros((n + d, n + d))
    D[:n, :n] = one * M
    D[n:, n:] = np.eye(d) - N

    return QuadraticForm(A=A, ell=ell, k=k, n=n, d=d, schur_T=T, schur_D=D,
                         _M_cho=M_cho, _sigma2=s2, _N=N, _a=a)


def hamiltonian_closed(qf: QuadraticForm, r: np.ndarray) -> float:
    """1/2 r'Ar - r'ell + k."""
    r = np.asarray(r, float)
    return 0.5 * float(r @ qf.apply(r)) - float(r @ qf.ell) + qf.k


def optimal_portfolio(coeffs: DerivedCoefficients, a: float, r: np.ndarray,
                      with_risk: bool = False):
    """Feedback portfolio pi_tilde = M^-1 (mu1 - M p - sigma2 q) / (1 - a).

    With ``with_risk`` also returns |sigma' pi_tilde|^2.
    """
    r = np.asarray(r, float)
    n = coeffs.mu1.size
    p, q = r[:n], r[n:]
    c = coeffs.mu1 - coeffs.M @ p - coeffs.sigma2 @ q
    eigs = np.linalg.eigvalsh(coeffs.M)
    if eigs[0] <= 1e-14 * max(1.0, eigs[-1]):
        raise DegeneratePointError("singular M in optimal_portfolio",
                                   min_eig=float(eigs[0]))
    w = np.linalg.solve(coeffs.M, c)
    pi = w / (1.0 - a)
    if with_risk:
        risk = float(c @ w) / (1.0 - a) ** 2
        return pi, risk
    return pi


def hamiltonian_maxform(coeffs: DerivedCoefficients, a: float,
                        r: np.ndarray) -> float:
    """H evaluated through its defining inner maximization over portfolios.

    Substitutes the explicit maximizer; agrees with hamiltonian_closed up to
    roundoff, serving as an internal consistency route.
    """
    r = np.asarray(r, float)
    n = coeffs.mu1.size
    p, q = r[:n], r[n:]
    sp = coeffs.sigma.T @ p
    pi = optimal_portfolio(coeffs, a, r)
    c = coeffs.mu1 - coeffs.M @ p - coeffs.sigma2 @ q
    spi = coeffs.sigma.T @ pi
    bracket = float(pi @ c) - 0.5 * (1.0 - a) * float(spi @ spi)
    return (0.5 * float(sp @ sp) + float(q @ (coeffs.sigma2.T @ p))
            + 0.5 * float(q @ q) - float(coeffs.mu1_tilde @ p)
            - float(coeffs.mu2 @ q) + a * bracket)


def running_cost_L(qf: QuadraticForm, r: np.ndarray) -> float:
    """Dual running cost L(r) = 1/2 (r - ell)' A^-1 (r - ell) - k."""
    r = np.asarray(r, float)
    diff = r - qf.ell
    return 0.5 * float(diff @ qf.solve(diff)) - qf.k


def dual_maximizer(qf: QuadraticForm, r: np.ndarray) -> np.ndarray:
    """rhat = ell - A r, the unconstrained maximizer of -rbar.r - L(rbar)."""
    return qf.ell - qf.apply(np.asarray(r, float))


def hamiltonian_truncated(qf: QuadraticForm, r: np.ndarray, R: float,
                          kkt_tol: float = 1e-9) -> TruncatedMaxResult:
    """H^R(r) = sup over |rbar| <= R of -rbar.r - L(rbar).

    The maximand is strictly concave, so when the unconstrained maximizer
    rhat = ell - A r lies inside the ball the value is H(r).  Otherwise the
    maximizer sits on the boundary and solves the secular equation
    |(A^-1 + lam I)^-1 (A^-1 ell - r)| = R for the KKT multiplier lam >= 0,
    located by bracketing + Brent root finding (|rbar(lam)| is strictly
    decreasing in lam).
    """
    if not R > 0:
        raise ValueError("cutoff radius R must be positive")
    r = np.asarray(r, float)
    rhat = dual_maximizer(qf, r)
    rhat_norm = float(np.linalg.norm(rhat))
    if rhat_norm <= R:
        value = hamiltonian_closed(qf, r)
        return TruncatedMaxResult(value=value, maximizer=rhat, active=False,
                                  multiplier=0.0, kkt_residual=0.0)

    # eigenbasis of A: A = Q diag(mu) Q', A^-1 has eigenvalues 1/mu
    mu, Q = np.linalg.eigh(qf.A)
    if mu[0] <= 0:
        raise DegeneratePointError("A not positive definite",
                                   min_eig=float(mu[0]))
    g = qf.solve(qf.ell) - r           # A^-1 ell - r
    gt = Q.T @ g
    inv_mu = 1.0 / mu

    def norm_rbar(lam):
        return float(np.sqrt(np.sum((gt / (inv_mu + lam)) ** 2)))

    lam_hi = 1.0
    while norm_rbar(lam_hi) >= R:
        lam_hi *= 2.0
        if lam_hi > 1e300:  # cannot happen: norm decreases ~ 1/lam
            raise AssertionError("secular bracket expansion failed")
    lam = brentq(lambda l: norm_rbar(l) - R, 0.0, lam_hi,
                 xtol=1e-16, rtol=8.881784197001252e-16, maxiter=200)
    rbar = Q @ (gt / (inv_mu + lam))
    # polish the boundary constraint by rescaling onto |rbar| = R
    nb = float(np.linalg.norm(rbar))
    if nb > 0:
        rbar = rbar * (R / nb)
    value = -float(rbar @ r) - running_cost_L(qf, rbar)
    kkt = float(np.linalg.norm(-r - qf.solve(rbar - qf.ell) - lam * rbar))
    if kkt > kkt_tol:
        raise AssertionError(f"trust-region KKT residual {kkt:.3e} > {kkt_tol:.1e}")
    return TruncatedMaxResult(value=value, maximizer=rbar, active=True,
                              multiplier=float(lam), kkt_residual=kkt)


# ---------------------------------------------------------------------------
# Batched (field) versions used by the PDE and Monte Carlo modules
# ---------------------------------------------------------------------------

def quadratic_fields(fields: dict, a: float) -> tuple:
    """Batched (A, ell, k) from a coefficient-field dict.

    ``fields`` is the output of model.coefficient_fields; returns arrays of
    shape (..., nd, nd), (..., nd) and (...,).
    """
    M, s2, N = fields["M"], fields["sigma2"], fields["N"]
    mu1, beta, mu2 = fields["mu1"], fields["beta"], fields["mu2"]
    n = mu1.shape[-1]
    d = mu2.shape[-1]
    one = 1.0 / (1.0 - a)
    batch = M.shape[:-2]

    A = np.zeros(batch + (n + d, n + d))
    A[..., :n, :n] = one * M
    A[..., :n, n:] = one * s2
    A[..., n:, :n] = one * np.swapaxes(s2, -1, -2)
    A[..., n:, n:] = np.eye(d) + (a * one) * N

    Minv_mu1 = np.linalg.solve(M, mu1[..., None])[..., 0]
    ell = np.concatenate([
        one * mu1 - beta,
        mu2 + (a * one) * np.einsum("...ij,...i->...j", s2, Minv_mu1),
    ], axis=-1)
    k = 0.5 * a * one * np.einsum("...i,...i->...", mu1, Minv_mu1)
    return A, ell, k


def hamiltonian_field(A, ell, k, r):
    """Batched 1/2 r'Ar - r'ell + k."""
    return (0.5 * np.einsum("...i,...ij,...j->...", r, A, r)
            - np.einsum("...i,...i->...", r, ell) + k)


def running_cost_field(A, ell, k, r):
    """Batched L(r) = 1/2 (r-ell)' A^-1 (r-ell) - k."""
    diff = r - ell
    w = np.linalg.solve(A, diff[..., None])[..., 0]
    return 0.5 * np.einsum("...i,...i->...", diff, w) - k


def dual_maximizer_field(A, ell, r):
    """Batched rhat = ell - A r."""
    return ell - np.einsum("...ij,...j->...i", A, r)


def optimal_portfolio_field(fields: dict, a: float, r):
    """Batched feedback portfolio and risk |sigma' pi|^2."""
    M, s2, mu1 = fields["M"], fields["sigma2"], fields["mu1"]
    n = mu1.shape[-1]
    p, q = r[..., :n], r[..., n:]
    c = (mu1 - np.einsum("...ij,...j->...i", M, p)
         - np.einsum("...ij,...j->...i", s2, q))
    w = np.linalg.solve(M, c[..., None])[..., 0]
    pi = w / (1.0 - a)
    risk = np.einsum("...i,...i->...", c, w) / (1.0 - a) ** 2
    return pi, risk
