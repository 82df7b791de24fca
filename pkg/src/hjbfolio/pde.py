"""Explicit finite-difference solver for the semilinear exponent PDE.

The value function factorizes as v(t, w, z) = (w^a / a) e^{-u(t, z)} and u
solves, backwards from u(T, .) = 0,

    -u_t - 1/2 tr(sigma' u_xx sigma) - tr(sigma2' u_xy) - 1/2 Lap_y u
        + H(t, z, u_z) = 0.

We march with explicit Euler under a CFL-limited step, second-order central
differences in the interior and second-order one-sided stencils at the
boundary (the PDE itself is imposed there; the problem has no natural
Dirichlet data on a truncated box).  Optionally H is replaced by the
ball-constrained cutoff H^R.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy.interpolate import RegularGridInterpolator
from scipy.optimize import brentq

from .hamiltonian import (dual_maximizer_field, hamiltonian_field,
                          optimal_portfolio_field, quadratic_fields)
from .model import ModelSpec, coefficient_fields


class ConfigError(ValueError):
    """Inconsistent grid/solver configuration (e.g. CFL violation)."""


class DivergenceError(RuntimeError):
    """The explicit march produced non-finite values."""

    def __init__(self, msg, layer=None):
        super().__init__(msg)
        self.layer = layer


@dataclass(frozen=True)
class Grid:
    """Uniform tensor grid on [0, T] x box."""

    T: float
    time_steps: int
    axes: tuple          # one 1-d node array per spatial axis (n first, then d)
    n: int
    d: int

    def __post_init__(self):
        if self.time_steps < 2:
            raise ConfigError("need at least 2 time steps")
        for ax in self.axes:
            if len(ax) < 5:
                raise ConfigError("need at least 5 nodes per axis")

    @property
    def dt(self) -> float:
        return self.T / self.time_steps

    @property
    def t_nodes(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.time_steps + 1)

    @property
    def shape(self) -> tuple:
        return tuple(len(ax) for ax in self.axes)

    @property
    def spacings(self) -> tuple:
        return tuple(float(ax[1] - ax[0]) for ax in self.axes)

    @property
    def box(self) -> tuple:
        return (np.array([ax[0] for ax in self.axes]),
                np.array([ax[-1] for ax in self.axes]))

    def mesh(self) -> np.ndarray:
        """Node coordinates, shape (*shape, n+d)."""
        return np.stack(np.meshgrid(*self.axes, indexing="ij"), axis=-1)


def make_grid(model: ModelSpec, lo, hi, nodes, time_steps) -> Grid:
    lo = np.asarray(lo, float)
    hi = np.asarray(hi, float)
    nd = model.dim
    if lo.size != nd or hi.size != nd or np.any(hi <= lo):
        raise ConfigError("grid box must be n+d intervals with hi > lo")
    nodes = np.broadcast_to(np.asarray(nodes, int), (nd,))
    axes = tuple(np.linspace(lo[i], hi[i], int(nodes[i])) for i in range(nd))
    return Grid(T=model.T, time_steps=int(time_steps), axes=axes,
                n=model.n, d=model.d)


def default_grid(model: ModelSpec, z0, nodes=41, time_steps=64) -> Grid:
    """Box of x0 +- 4 max|sigma| sqrt(T) and y0 +- (4 sqrt(T) + drift allowance)."""
    z0 = np.asarray(z0, float)
    n, d = model.n, model.d
    x0, y0 = z0[:n], z0[n:]
    rt = np.sqrt(model.T)

    y_half = 4.0 * rt * np.ones(d)
    probe_y = y0 + np.linspace(-1.0, 1.0, 9)[:, None] * y_half
    mu2_max = np.abs(np.stack([np.asarray(model.mu2(t, probe_y), float)
                               for t in (0.0, model.T)])).max()
    y_half = y_half + mu2_max * model.T

    probe_z = np.concatenate([np.broadcast_to(x0, (9, n)),
                              y0 + np.linspace(-1, 1, 9)[:, None] * y_half], axis=-1)
    smax = 0.0
    for t in (0.0, model.T):
        f = coefficient_fields(model, t, probe_z)
        smax = max(smax, float(np.linalg.norm(f["sigma"], axis=(-2, -1)).max()))
    x_half = max(4.0 * smax * rt, 0.5) * np.ones(n)

    lo = np.concatenate([x0 - x_half, y0 - y_half])
    hi = np.concatenate([x0 + x_half, y0 + y_half])
    if time_steps is None:
        probe = make_grid(model, lo, hi, nodes, 2)
        time_steps = cfl_time_steps(model, probe)
    return make_grid(model, lo, hi, nodes, time_steps)


@dataclass
class SolverConfig:
    safety: float = 0.9
    cutoff: float | None = None
    verbose: int = 0

    def __post_init__(self):
        if not 0.0 < self.safety <= 1.0:
            raise ConfigError("CFL safety factor must lie in (0, 1]")
        if self.cutoff is not None and not self.cutoff > 0:
            raise ConfigError("cutoff radius must be positive")


# ---------------------------------------------------------------------------
# Finite difference stencils (second order, one-sided at the edges)
# ---------------------------------------------------------------------------

def _sl(ndim, axis, s):
    out = [slice(None)] * ndim
    out[axis] = s
    return tuple(out)

def deriv1(u: np.ndarray, h: float, axis: int) -> np.ndarray:
    out = np.empty_like(u)
    nd = u.ndim
    out[_sl(nd, axis, slice(1, -1))] = (
        u[_sl(nd, axis, slice(2, None))] - u[_sl(nd, axis, slice(0, -2))]) / (2 * h)
    out[_sl(nd, axis, 0)] = (
        -3 * u[_sl(nd, axis, 0)] + 4 * u[_sl(nd, axis, 1)]
        - u[_sl(nd, axis, 2)]) / (2 * h)
    out[_sl(nd, axis, -1)] = (
        3 * u[_sl(nd, axis, -1)] - 4 * u[_sl(nd, axis, -2)]
        + u[_sl(nd, axis, -3)]) / (2 * h)
    return out


def deriv2(u: np.ndarray, h: float, axis: int) -> np.ndarray:
    out = np.empty_like(u)
    nd = u.ndim
    out[_sl(nd, axis, slice(1, -1))] = (
        u[_sl(nd, axis, slice(2, None))] - 2 * u[_sl(nd, axis, slice(1, -1))]
        + u[_sl(nd, axis, slice(0, -2))]) / (h * h)
    out[_sl(nd, axis, 0)] = (
        2 * u[_sl(nd, axis, 0)] - 5 * u[_sl(nd, axis, 1)]
        + 4 * u[_sl(nd, axis, 2)] - u[_sl(nd, axis, 3)]) / (h * h)
    out[_sl(nd, axis, -1)] = (
        2 * u[_sl(nd, axis, -1)] - 5 * u[_sl(nd, axis, -2)]
        + 4 * u[_sl(nd, axis, -3)] - u[_sl(nd, axis, -4)]) / (h * h)
    return out


def gradient_field(u: np.ndarray, grid: Grid) -> np.ndarray:
    """First derivatives along every spatial axis, shape (*grid.shape, n+d)."""
    hs = grid.spacings
    return np.stack([deriv1(u, hs[i], i) for i in range(len(hs))], axis=-1)


# ---------------------------------------------------------------------------
# Fields
# ---------------------------------------------------------------------------

class FieldInterpolant:
    """Multilinear interpolation in (t, z) with nearest-edge clamping.

    Queries outside the box are clamped to its faces; the clamp count is
    tracked so callers can report the exit frequency.
    """

    def __init__(self, t_nodes, axes, values):
        self._lo = np.array([t_nodes[0]] + [ax[0] for ax in axes])
        self._hi = np.array([t_nodes[-1]] + [ax[-1] for ax in axes])
        self._rgi = RegularGridInterpolator(
            (np.asarray(t_nodes),) + tuple(axes), np.asarray(values))
        self.queries = 0
        self.clamped = 0

    def __call__(self, t, z):
        z = np.atleast_2d(np.asarray(z, float))
        pts = np.concatenate([np.full((z.shape[0], 1), t), z], axis=1)
        clipped = np.clip(pts, self._lo, self._hi)
        self.queries += pts.shape[0]
        self.clamped += int(np.any(clipped != pts, axis=1).sum())
        return self._rgi(clipped)

    @property
    def exit_fraction(self) -> float:
        return self.clamped / self.queries if self.queries else 0.0


@dataclass
class ValueField:
    """Solution u on the grid, with cached per-layer gradients."""

    grid: Grid
    u: np.ndarray           # (K+1, *shape)
    grad: np.ndarray        # (K+1, *shape, n+d)
    metadata: dict = dc_field(default_factory=dict)
    cutoff: float | None = None
    cutoff_active_nodes: int = 0
    max_dual_norm: float = 0.0

    def interpolant(self) -> FieldInterpolant:
        return FieldInterpolant(self.grid.t_nodes, self.grid.axes, self.u)

    def grad_interpolant(self) -> FieldInterpolant:
        return FieldInterpolant(self.grid.t_nodes, self.grid.axes, self.grad)

    def value_at(self, t, z) -> float:
        return float(self.interpolant()(t, np.asarray(z, float)[None, :])[0])

    def grad_at(self, t, z) -> np.ndarray:
        return np.asarray(self.grad_interpolant()(t, np.asarray(z, float)[None, :])[0])


@dataclass
class PolicyField:
    """Feedback portfolio on the grid plus the risk field |sigma' pi|^2."""

    grid: Grid
    pi: np.ndarray          # (K+1, *shape, n)
    risk: np.ndarray        # (K+1, *shape)
    growth_const: float = 0.0   # max of risk / (1 + |y|^2) over the grid

    def interpolant(self) -> FieldInterpolant:
        return FieldInterpolant(self.grid.t_nodes, self.grid.axes, self.pi)


# ---------------------------------------------------------------------------
# Solver
# ---------------------------------------------------------------------------

def _config_hash(model: ModelSpec, grid: Grid, cfg: SolverConfig) -> str:
    payload = json.dumps({
        "model": model.name, "params": {k: repr(v) for k, v in model.params.items()},
        "a": model.a, "T": model.T,
        "shape": grid.shape, "steps": grid.time_steps,
        "box": [list(map(float, b)) for b in grid.box],
        "safety": cfg.safety, "cutoff": cfg.cutoff,
    }, sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def _diffusion_term(u, fields, grid):
    n = grid.n
    hs = grid.spacings
    nd = len(hs)
    g = gradient_field(u, grid)
    M, s2 = fields["M"], fields["sigma2"]

    out = np.zeros_like(u)
    for i in range(n):
        out += 0.5 * M[..., i, i] * deriv2(u, hs[i], i)
        for j in range(i + 1, n):
            out += M[..., i, j] * deriv1(g[..., i], hs[j], j)
    for j in range(nd - n):
        out += 0.5 * deriv2(u, hs[n + j], n + j)
        for i in range(n):
            out += s2[..., i, j] * deriv1(g[..., i], hs[n + j], n + j)
    return out, g


def _truncated_field(A, ell, k, r, R):
    """Batched H^R with exact secular solves on the active set.

    Returns (values, active_count, max dual norm).
    """
    rhat = dual_maximizer_field(A, ell, r)
    norms = np.linalg.norm(rhat, axis=-1)
    H = hamiltonian_field(A, ell, k, r)
    active = norms > R
    count = int(active.sum())
    if count:
        flatA = A[active]
        flatell = ell[active]
        flatk = np.broadcast_to(k, norms.shape)[active]
        flatr = r[active]
        vals = np.empty(count)
        for idx in range(count):
            vals[idx] = _truncated_value_dense(
                flatA[idx], flatell[idx], float(flatk[idx]), flatr[idx], R)
        H = H.copy()
        H[active] = vals
    return H, count, float(norms.max())


def _truncated_value_dense(A, ell, k, r, R):
    mu, Q = np.linalg.eigh(A)
    gt = Q.T @ (np.linalg.solve(A, ell) - r)
    inv_mu = 1.0 / mu

    def norm_rbar(lam):
        return float(np.sqrt(np.sum((gt / (inv_mu + lam)) ** 2)))

    lam_hi = 1.0
    while norm_rbar(lam_hi) >= R:
        lam_hi *= 2.0
    lam = brentq(lambda l: norm_rbar(l) - R, 0.0, lam_hi, xtol=1e-16)
    rbar = Q @ (gt / (inv_mu + lam))
    nb = np.linalg.norm(rbar)
    if nb > 0:
        rbar *= R / nb
    diff = rbar - ell
    L = 0.5 * float(diff @ np.linalg.solve(A, diff)) - k
    return -float(rbar @ r) - L


def _layer_fields(model, grid, mesh):
    """Per-layer coefficient fields; collapses to one evaluation when the
    model is time-independent on this grid."""
    f0 = coefficient_fields(model, 0.0, mesh)
    f1 = coefficient_fields(model, model.T, mesh)
    constant = all(np.array_equal(f0[key], f1[key]) for key in f0)
    if constant:
        return lambda t: f0
    cache = {}

    def get(t):
        if t not in cache:
            if len(cache) > 4:
                cache.clear()
            cache[t] = coefficient_fields(model, t, mesh)
        return cache[t]
    return get


def cfl_time_steps(model: ModelSpec, grid: Grid, safety: float = 0.9) -> int:
    """Smallest admissible number of time steps for the explicit march."""
    mesh = grid.mesh()
    hs = grid.spacings
    n = grid.n
    rate = 0.0
    for t in (0.0, 0.5 * model.T, model.T):
        f = coefficient_fields(model, t, mesh)
        s = 0.0
        for i in range(n):
            s += float(f["M"][..., i, i].max()) / hs[i] ** 2
        for j in range(len(hs) - n):
            s += 1.0 / hs[n + j] ** 2
        rate = max(rate, s)
    dt_max = safety / rate
    return int(np.ceil(model.T / dt_max))


def solve_semilinear(model: ModelSpec, grid: Grid, cfg: SolverConfig) -> ValueField:
    """March the exponent PDE backwards from u(T, .) = 0."""
    if model.a > 0.95:
        raise ConfigError("solver refuses a > 0.95 (1/(1-a) blow-up makes "
                          "CFL-feasible grids impractical)")
    k_min = cfl_time_steps(model, grid, cfg.safety)
    if grid.time_steps < k_min:
        raise ConfigError(
            f"CFL violation: {grid.time_steps} time steps given, "
            f"need >= {k_min} for this grid/model at safety {cfg.safety}")

    mesh = grid.mesh()
    fields_at = _layer_fields(model, grid, mesh)
    K = grid.time_steps
    dt = grid.dt
    t_nodes = grid.t_nodes

    u = np.zeros((K + 1,) + grid.shape)
    active_total = 0
    max_dual = 0.0
    for j in range(K - 1, -1, -1):
        t = t_nodes[j + 1]
        f = fields_at(t)
        diff, g = _diffusion_term(u[j + 1], f, grid)
        A, ell, k = quadratic_fields(f, model.a)
        if cfg.cutoff is None:
            H = hamiltonian_field(A, ell, k, g)
            rhat_max = float(np.linalg.norm(
                dual_maximizer_field(A, ell, g), axis=-1).max())
        else:
            H, count, rhat_max = _truncated_field(A, ell, k, g, cfg.cutoff)
            active_total += count
        max_dual = max(max_dual, rhat_max)
        u[j] = u[j + 1] + dt * (diff - H)
        if not np.all(np.isfinite(u[j])):
            raise DivergenceError(
                f"non-finite values at time layer {j} (t = {t_nodes[j]:.4f})",
                layer=j)
        if cfg.verbose and j % max(1, K // 10) == 0:
            print(f"  layer {j:5d}  t={t_nodes[j]:.4f}  "
                  f"|u|max={np.abs(u[j]).max():.4e}")

    grad = np.stack([gradient_field(u[j], grid) for j in range(K + 1)])
    return ValueField(
        grid=grid, u=u, grad=grad,
        metadata={"model": model.name, "cutoff": cfg.cutoff,
                  "config_hash": _config_hash(model, grid, cfg)},
        cutoff=cfg.cutoff, cutoff_active_nodes=active_total,
        max_dual_norm=max_dual)


# ---------------------------------------------------------------------------
# Diagnostics
# ---------------------------------------------------------------------------

@dataclass
class ResidualReport:
    per_layer: np.ndarray   # max |residual| over interior nodes, layers 1..K-1
    layer_times: np.ndarray
    global_max: float


def residual(field: ValueField, model: ModelSpec) -> ResidualReport:
    """Plug discrete derivatives back into the PDE at interior nodes."""
    grid = field.grid
    mesh = grid.mesh()
    fields_at = _layer_fields(model, grid, mesh)
    K = grid.time_steps
    dt = grid.dt
    interior = tuple(slice(1, -1) for _ in grid.shape)

    per_layer = np.empty(K - 1)
    for j in range(1, K):
        t = grid.t_nodes[j]
        f = fields_at(t)
        u_t = (field.u[j + 1] - field.u[j - 1]) / (2 * dt)
        diff, g = _diffusion_term(field.u[j], f, grid)
        A, ell, k = quadratic_fields(f, model.a)
        if field.cutoff is None:
            H = hamiltonian_field(A, ell, k, g)
        else:
            H, _, _ = _truncated_field(A, ell, k, g, field.cutoff)
        res = -u_t - diff + H
        per_layer[j - 1] = float(np.abs(res[interior]).max())
    return ResidualReport(per_layer=per_layer,
                          layer_times=grid.t_nodes[1:K],
                          global_max=float(per_layer.max()))


def extract_policy(field: ValueField, model: ModelSpec,
                   a: float | None = None) -> PolicyField:
    """Feedback portfolio at every node from the cached gradient."""
    if a is None:
        a = model.a
    grid = field.grid
    mesh = grid.mesh()
    fields_at = _layer_fields(model, grid, mesh)
    K = grid.time_steps
    pi = np.empty((K + 1,) + grid.shape + (grid.n,))
    risk = np.empty((K + 1,) + grid.shape)
    y = mesh[..., grid.n:]
    y2 = 1.0 + np.einsum("...i,...i->...", y, y)
    growth = 0.0
    for j in range(K + 1):
        f = fields_at(grid.t_nodes[j])
        pi[j], risk[j] = optimal_portfolio_field(f, a, field.grad[j])
        growth = max(growth, float((risk[j] / y2).max()))
    return PolicyField(grid=grid, pi=pi, risk=risk, growth_const=growth)


def growth_diagnostics(field: ValueField, model: ModelSpec) -> dict:
    """Max over the grid of (|M^1/2 u_x| + |u_y|) / (1 + |y|)."""
    grid = field.grid
    mesh = grid.mesh()
    fields_at = _layer_fields(model, grid, mesh)
    n = grid.n
    y = mesh[..., n:]
    denom = 1.0 + np.linalg.norm(y, axis=-1)
    worst = 0.0
    arg = None
    for j in range(grid.time_steps + 1):
        f = fields_at(grid.t_nodes[j])
        w, Q = np.linalg.eigh(f["M"])
        Ms = np.einsum("...ik,...k,...jk->...ij", Q, np.sqrt(w), Q)
        ux = field.grad[j][..., :n]
        uy = field.grad[j][..., n:]
        num = (np.linalg.norm(np.einsum("...ij,...j->...i", Ms, ux), axis=-1)
               + np.linalg.norm(uy, axis=-1))
        ratio = num / denom
        m = float(ratio.max())
        if m > worst:
            worst = m
            idx = np.unravel_index(int(np.argmax(ratio)), ratio.shape)
            arg = [float(grid.t_nodes[j])] + list(map(float, mesh[idx]))
    return {"max_ratio": worst, "argmax_point": arg}


def cutoff_convergence(model: ModelSpec, grid: Grid, cfg: SolverConfig,
                       R_list) -> dict:
    """Solve for each cutoff and against the uncut Hamiltonian.

    Returns a table of sup-norm differences |u^R - u|, the per-R activation
    counts, and the largest R at which the cutoff was ever active.
    """
    R_list = sorted(float(R) for R in R_list)
    base_cfg = SolverConfig(safety=cfg.safety, cutoff=None, verbose=cfg.verbose)
    base = solve_semilinear(model, grid, base_cfg)
    rows = []
    largest_active = None
    fields = {}
    for R in R_list:
        fr = solve_semilinear(
            model, grid, SolverConfig(safety=cfg.safety, cutoff=R,
                                      verbose=cfg.verbose))
        fields[R] = fr
        if fr.cutoff_active_nodes > 0:
            largest_active = R
        rows.append({
            "R": R,
            "sup_diff": float(np.abs(fr.u - base.u).max()),
            "active_nodes": fr.cutoff_active_nodes,
            "max_dual_norm": fr.max_dual_norm,
        })
    return {"rows": rows, "largest_active_R": largest_active,
            "uncut": base, "fields": fields}


# ---------------------------------------------------------------------------
# Export
# ---------------------------------------------------------------------------

def export_csv(field: ValueField, path, policy: PolicyField | None = None):
    """One row per (time layer, node): t, x.., y.., u, u_z.., pi.. ."""
    grid = field.grid
    mesh = grid.mesh().reshape(-1, grid.n + grid.d)
    K = grid.time_steps
    nd = grid.n + grid.d
    cols = (["t"] + [f"x{i+1}" for i in range(grid.n)]
            + [f"y{i+1}" for i in range(grid.d)] + ["u"]
            + [f"u_z{i+1}" for i in range(nd)])
    if policy is not None:
        cols += [f"pi{i+1}" for i in range(grid.n)]
    blocks = []
    for j in range(K + 1):
        t_col = np.full((mesh.shape[0], 1), grid.t_nodes[j])
        row = [t_col, mesh, field.u[j].reshape(-1, 1),
               field.grad[j].reshape(-1, nd)]
        if policy is not None:
            row.append(policy.pi[j].reshape(-1, grid.n))
        blocks.append(np.concatenate(row, axis=1))
    data = np.concatenate(blocks, axis=0)
    np.savetxt(path, data, delimiter=",", header=",".join(cols), comments="")


_BIN_MAGIC = b"HJBFLD1\n"


def write_field_binary(field: ValueField, path):
    """Self-describing binary: magic, JSON header (dims, axes), row-major payload."""
    header = {
        "schema_version": 1,
        "t_nodes": [float(t) for t in field.grid.t_nodes],
        "axes": [[float(v) for v in ax] for ax in field.grid.axes],
        "n": field.grid.n,
        "d": field.grid.d,
        "arrays": [{"name": "u", "shape": list(field.u.shape)},
                   {"name": "grad", "shape": list(field.grad.shape)}],
        "metadata": field.metadata,
        "cutoff": field.cutoff,
        "cutoff_active_nodes": field.cutoff_active_nodes,
        "max_dual_norm": field.max_dual_norm,
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_BIN_MAGIC)
        fh.write(len(blob).to_bytes(8, "little"))
        fh.write(blob)
        fh.write(np.ascontiguousarray(field.u, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(field.grad, dtype="<f8").tobytes())


def read_field_binary(path) -> ValueField:
    with open(path, "rb") as fh:
        if fh.read(len(_BIN_MAGIC)) != _BIN_MAGIC:
            raise ValueError("not a field binary file")
        hlen = int.from_bytes(fh.read(8), "little")
        header = json.loads(fh.read(hlen))
        arrays = {}
        for spec in header["arrays"]:
            shape = tuple(spec["shape"])
            count = int(np.prod(shape))
            arrays[spec["name"]] = np.frombuffer(
                fh.read(count * 8), dtype="<f8").reshape(shape).copy()
    axes = tuple(np.asarray(ax, float) for ax in header["axes"])
    t_nodes = np.asarray(header["t_nodes"], float)
    grid = Grid(T=float(t_nodes[-1]), time_steps=len(t_nodes) - 1,
                axes=axes, n=header["n"], d=header["d"])
    return ValueField(grid=grid, u=arrays["u"], grad=arrays["grad"],
                      metadata=header.get("metadata", {}),
                      cutoff=header.get("cutoff"),
                      cutoff_active_nodes=header.get("cutoff_active_nodes", 0),
                      max_dual_norm=header.get("max_dual_norm", 0.0))
