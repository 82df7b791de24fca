"""Closed-form and brute-force references used to anchor the numerical modules.

Deliberately self-contained: nothing here imports from the rest of the
package, so every other module's tests can lean on these oracles without
import cycles.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np


@dataclass
class MertonSolution:
    """Exact solution for a constant-coefficient model.

    With spatially constant coefficients the gradient term vanishes and the
    exponent u solves the ODE u_t = k, so u(t) = -k (T - t), the value is
    v(t, w) = (w^a / a) e^{k (T - t)}, and the optimal fraction is the
    constant pi_star = M^-1 mu1 / (1 - a).
    """

    k: float
    T: float
    a: float
    pi_star: np.ndarray

    def u(self, t: float) -> float:
        return -self.k * (self.T - t)

    def v(self, t: float, w: float) -> float:
        return (w ** self.a / self.a) * np.exp(self.k * (self.T - t))


def merton_closed_form(spec, check_points: int = 100,
                       check_radius: float = 2.0) -> MertonSolution:
    """Closed-form solution for a constant-coefficient ModelSpec.

    Constancy is verified by sampling ``check_points`` points in the box
    |z_i| <= check_radius, t in [0, T]; deviation above 1e-12 is an error.
    """
    n, d, nd = spec.n, spec.d, spec.n + spec.d
    rng = np.random.default_rng(0)
    ts = rng.uniform(0.0, spec.T, check_points)
    zs = rng.uniform(-check_radius, check_radius, (check_points, nd))

    def eval_all(t, z):
        return (np.asarray(spec.mu1_tilde(t, z), float).reshape(n),
                np.asarray(spec.sigma1(t, z), float).reshape(n, spec.m),
                np.asarray(spec.sigma2(t, z), float).reshape(n, d),
                np.asarray(spec.mu2(t, z[n:]), float).reshape(d))

    ref = eval_all(0.0, np.zeros(nd))
    worst = 0.0
    for t, z in zip(ts, zs):
        cur = eval_all(t, z)
        for r, c in zip(ref, cur):
            worst = max(worst, float(np.abs(r - c).max()))
    if worst > 1e-12:
        raise ValueError(
            f"merton_closed_form requires constant coefficients; "
            f"worst sampled deviation {worst:.3e}")

    mu1t, s1, s2, _ = ref
    sigma = np.hstack([s1, s2])
    M = sigma @ sigma.T
    beta = 0.5 * np.einsum("ij,ij->i", sigma, sigma)
    mu1 = mu1t + beta
    w = np.linalg.solve(M, mu1)
    k = 0.5 * spec.a / (1.0 - spec.a) * float(mu1 @ w)
    pi_star = w / (1.0 - spec.a)
    return MertonSolution(k=k, T=spec.T, a=spec.a, pi_star=pi_star)


def brute_force_hR(qf, r, R: float, resolution: int = 201) -> float:
    """Dense-search value of the ball-constrained dual maximization.

    Evaluates -rbar.r - L(rbar) over an interior lattice of the cube
    [-R, R]^dim masked to the ball, plus a dense sampling of the boundary
    sphere (dim <= 3).  Independent of the trust-region path it checks.
    """
    r = np.asarray(r, float)
    A = np.asarray(qf.A, float)
    ell = np.asarray(qf.ell, float)
    k = float(qf.k)
    dim = A.shape[0]
    if dim > 3:
        raise ValueError("brute_force_hR supports dim <= 3 only")

    def f(pts):
        diff = pts - ell
        w = np.linalg.solve(A, diff.T).T
        L = 0.5 * np.einsum("ij,ij->i", diff, w) - k
        return -pts @ r - L

    axes = [np.linspace(-R, R, resolution)] * dim
    mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, dim)
    mesh = mesh[np.linalg.norm(mesh, axis=1) <= R]
    best = f(mesh).max() if len(mesh) else -np.inf

    if dim == 1:
        boundary = np.array([[-R], [R]])
    elif dim == 2:
        theta = np.linspace(0.0, 2.0 * np.pi, 20 * resolution, endpoint=False)
        boundary = R * np.stack([np.cos(theta), np.sin(theta)], axis=-1)
    else:
        # Fibonacci sphere
        count = resolution * resolution
        i = np.arange(count) + 0.5
        phi = np.arccos(1.0 - 2.0 * i / count)
        golden = np.pi * (1.0 + np.sqrt(5.0))
        theta = golden * i
        boundary = R * np.stack([np.cos(theta) * np.sin(phi),
                                 np.sin(theta) * np.sin(phi),
                                 np.cos(phi)], axis=-1)
    best = max(best, f(boundary).max())
    return float(best)


def fd_gradient(sampler: Callable, point, step=1e-6) -> np.ndarray:
    """Componentwise central finite differences of a scalar field."""
    point = np.asarray(point, float)
    step = np.broadcast_to(np.asarray(step, float), point.shape)
    g = np.empty_like(point)
    for j in range(point.size):
        e = np.zeros_like(point)
        e[j] = step[j]
        fp = float(sampler(point + e))
        fm = float(sampler(point - e))
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise ValueError("fd_gradient: sampler returned non-finite value")
        g[j] = (fp - fm) / (2.0 * step[j])
    return g
