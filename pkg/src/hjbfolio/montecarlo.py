"""Monte Carlo simulation and the three value/gradient estimators.

Three routes to the same value function are implemented and cross-checked:

  direct    E[U(W_T)] with log-wealth simulated exactly alongside the state,
  girsanov  (w0^a/a) E^{Q_pi}[exp(int l ds)] under the tilted dynamics,
  dual      u(t0,z0) = inf over drift controls of E[int L ds], with the
            value recovered through v = (w0^a/a) e^{-u},

plus a pathwise estimator of u_z integrating L_z along the optimally
controlled dual paths.

Noise is drawn from per-block substreams keyed on (seed, block index) with
a fixed block size, so estimates are bit-reproducible regardless of how the
path loop is scheduled.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np
from numpy.random import SeedSequence, default_rng

from .hamiltonian import quadratic_fields, running_cost_field
from .model import ModelSpec, coefficient_fields
from .pde import FieldInterpolant, PolicyField, ValueField

#: Paths per RNG substream; fixed so partitioning never depends on scheduling.
BLOCK_SIZE = 8192


class PathExplosionError(RuntimeError):
    """More than 1% of paths produced non-finite states."""


class BoxExitError(RuntimeError):
    """More than 5% of path-steps required clamped policy lookups."""


@dataclass(frozen=True)
class SimConfig:
    seed: int
    n_paths: int = 10000
    n_steps: int = 64
    antithetic: bool = False

    def __post_init__(self):
        if self.n_paths < 2 or self.n_steps < 1:
            raise ValueError("need n_paths >= 2 and n_steps >= 1")


@dataclass
class Estimate:
    estimator: str
    mean: object            # float, or ndarray for vector estimates
    stderr: object
    n_paths: int
    n_steps: int
    seed: int
    extra: dict = dc_field(default_factory=dict)

    def to_json(self) -> dict:
        def conv(v):
            return [float(x) for x in np.atleast_1d(v)] if np.ndim(v) else float(v)
        return {"estimator": self.estimator, "mean": conv(self.mean),
                "stderr": conv(self.stderr), "n_paths": self.n_paths,
                "n_steps": self.n_steps, "seed": self.seed,
                "extra": {k: (float(v) if isinstance(v, (int, float, np.number))
                              else v)
                          for k, v in self.extra.items()}}


@dataclass
class MarkovControl:
    """Feedback drift control (t, z) -> nu for the dual problem."""

    fn: object                        # callable(t, z_batch) -> (B, n+d)
    bound: float | None = None       # clip |nu| <= bound when set
    label: str = "control"
    tracker: FieldInterpolant | None = None

    def __call__(self, t, z):
        nu = np.asarray(self.fn(t, z), float)
        if self.bound is not None:
            norms = np.linalg.norm(nu, axis=-1, keepdims=True)
            scale = np.minimum(1.0, self.bound / np.maximum(norms, 1e-300))
            nu = nu * scale
        return nu

    @staticmethod
    def constant(vec, bound=None, label="constant"):
        vec = np.asarray(vec, float)
        return MarkovControl(
            fn=lambda t, z: np.broadcast_to(vec, np.asarray(z).shape[:-1]
                                            + vec.shape),
            bound=bound, label=label)

    def shifted(self, delta, label=None):
        delta = np.asarray(delta, float)
        return MarkovControl(fn=lambda t, z: self.fn(t, z) + delta,
                             bound=self.bound,
                             label=label or f"{self.label}+shift")


def dual_control_from_field(field: ValueField, model: ModelSpec,
                            bound=None) -> MarkovControl:
    """Optimal dual drift nu_hat = ell - A u_z interpolated from the grid."""
    grid = field.grid
    mesh = grid.mesh()
    K = grid.time_steps
    nu = np.empty_like(field.grad)
    for j in range(K + 1):
        f = coefficient_fields(model, grid.t_nodes[j], mesh)
        A, ell, _ = quadratic_fields(f, model.a)
        nu[j] = ell - np.einsum("...ij,...j->...i", A, field.grad[j])
    interp = FieldInterpolant(grid.t_nodes, grid.axes, nu)
    return MarkovControl(fn=interp, bound=bound, label="nu_hat",
                         tracker=interp)


def _policy_fn(policy, n):
    """Adapter: PolicyField, constant vector, or callable -> (fn, tracker)."""
    if isinstance(policy, PolicyField):
        interp = policy.interpolant()
        return interp, interp
    if callable(policy):
        return policy, None
    vec = np.asarray(policy, float).reshape(n)
    return (lambda t, z: np.broadcast_to(vec, np.asarray(z).shape[:-1] + (n,)),
            None)


def _block_plan(n_paths):
    starts = range(0, n_paths, BLOCK_SIZE)
    return [(i, s, min(BLOCK_SIZE, n_paths - s)) for i, s in enumerate(starts)]


def _block_noise(seed, block_idx, rows, n_steps, width, antithetic):
    rng = default_rng(SeedSequence(entropy=seed, spawn_key=(block_idx,)))
    if antithetic:
        half = (rows + 1) // 2
        xi = rng.standard_normal((half, n_steps, width))
        return np.concatenate([xi, -xi], axis=0)[:rows]
    return rng.standard_normal((rows, n_steps, width))


def _finalize(alive, n_paths):
    excluded = int((~alive).sum())
    if excluded > 0.01 * n_paths:
        raise PathExplosionError(
            f"{excluded}/{n_paths} paths flagged non-finite (> 1%)")
    return excluded


def _simulate(model: ModelSpec, mode: str, t0: float, z0, cfg: SimConfig,
              policy=None, control: MarkovControl | None = None,
              want_gradient: bool = False, eps_moment: float | None = None,
              moment_times=()):
    """Euler-Maruyama driver shared by all estimators.

    mode: "physical" | "direct" | "tilted" | "dual".
    Returns a dict of per-path arrays (terminal state, accumulated
    integrals) plus bookkeeping counts.
    """
    if not t0 < model.T:
        raise ValueError("t0 must be < T")
    z0 = np.asarray(z0, float)
    n, m, d, nd = model.n, model.m, model.d, model.dim
    a = model.a
    n_steps = cfg.n_steps
    dt = (model.T - t0) / n_steps
    sq = np.sqrt(dt)

    policy_f, tracker = (None, None)
    if mode in ("direct", "tilted", "physical") and policy is not None:
        policy_f, tracker = _policy_fn(policy, n)

    terminal = np.empty((cfg.n_paths, nd))
    alive = np.ones(cfg.n_paths, bool)
    logw = np.zeros(cfg.n_paths) if mode == "direct" else None
    l_int = np.zeros(cfg.n_paths) if mode == "tilted" else None
    L_int = np.zeros(cfg.n_paths) if mode == "dual" else None
    Lz_int = np.zeros((cfg.n_paths, nd)) if want_gradient else None
    risk_ratio_max = 0.0
    moments = {float(tm): [] for tm in moment_times}

    for block_idx, start, rows in _block_plan(cfg.n_paths):
        dW = sq * _block_noise(cfg.seed, block_idx, rows, n_steps,
                               m + d, cfg.antithetic)
        z = np.broadcast_to(z0, (rows, nd)).copy()
        ok = np.ones(rows, bool)
        acc_w = np.zeros(rows)
        acc_l = np.zeros(rows)
        acc_L = np.zeros(rows)
        acc_Lz = np.zeros((rows, nd)) if want_gradient else None

        for s in range(n_steps):
            t = t0 + s * dt
            dw = dW[:, s, :]
            f = coefficient_fields(model, t, z)
            sigma = f["sigma"]

            if mode == "dual":
                nu = control(t, z)
                A, ell, k = quadratic_fields(f, a)
                acc_L += running_cost_field(A, ell, k, nu) * dt
                if want_gradient:
                    h = 1e-5 * (1.0 + np.linalg.norm(z, axis=-1))
                    for jdim in range(nd):
                        zp = z.copy(); zp[:, jdim] += h
                        zm = z.copy(); zm[:, jdim] -= h
                        fp = coefficient_fields(model, t, zp)
                        fm = coefficient_fields(model, t, zm)
                        Ap, ellp, kp = quadratic_fields(fp, a)
                        Am, ellm, km = quadratic_fields(fm, a)
                        Lp = running_cost_field(Ap, ellp, kp, nu)
                        Lm = running_cost_field(Am, ellm, km, nu)
                        acc_Lz[:, jdim] += (Lp - Lm) / (2.0 * h) * dt
                dz = nu * dt
                dz[:, :n] += np.einsum("...ij,...j->...i", sigma, dw)
                dz[:, n:] += dw[:, m:]
            else:
                if policy_f is not None:
                    pi = np.asarray(policy_f(t, z), float)
                    sig_pi = np.einsum("...ij,...i->...j", sigma, pi)
                    risk = np.einsum("...j,...j->...", sig_pi, sig_pi)
                else:
                    pi = None

                if mode == "direct" or (mode == "physical" and pi is not None):
                    if mode == "direct":
                        acc_w += ((np.einsum("...i,...i->...", pi, f["mu1"])
                                   - 0.5 * risk) * dt
                                  + np.einsum("...j,...j->...", sig_pi, dw))
                    if eps_moment is not None:
                        ynorm2 = np.einsum("...i,...i->...",
                                           z[:, n:], z[:, n:])
                        risk_ratio_max = max(
                            risk_ratio_max,
                            float((risk / (1.0 + ynorm2)).max()))

                drift_x = f["mu1_tilde"].copy()
                drift_y = f["mu2"].copy()
                if mode == "tilted":
                    drift_x += a * np.einsum("...ij,...j->...i", f["M"], pi)
                    drift_y += a * np.einsum("...ij,...i->...j",
                                             f["sigma2"], pi)
                    acc_l += (a * np.einsum("...i,...i->...", pi, f["mu1"])
                              - 0.5 * a * (1.0 - a) * risk) * dt
                dz = np.concatenate([
                    drift_x * dt + np.einsum("...ij,...j->...i", sigma, dw),
                    drift_y * dt + dw[:, m:]], axis=-1)

            z = z + dz
            bad = ~np.all(np.isfinite(z), axis=-1)
            if bad.any():
                ok &= ~bad
                z[bad] = z0
            if eps_moment is not None:
                t_next = t + dt
                for tm in moments:
                    if t < tm <= t_next + 1e-12:
                        ynorm2 = np.einsum("...i,...i->...",
                                           z[:, n:], z[:, n:])
                        moments[tm].append(np.exp(eps_moment * ynorm2))

        sl = slice(start, start + rows)
        terminal[sl] = z
        alive[sl] = ok
        if logw is not None:
            logw[sl] = acc_w
        if l_int is not None:
            l_int[sl] = acc_l
        if L_int is not None:
            L_int[sl] = acc_L
        if Lz_int is not None:
            Lz_int[sl] = acc_Lz

    excluded = _finalize(alive, cfg.n_paths)
    exit_fraction = tracker.exit_fraction if tracker is not None else 0.0
    if exit_fraction > 0.05:
        raise BoxExitError(
            f"{100 * exit_fraction:.1f}% of policy lookups left the grid box "
            "(> 5%); enlarge the box")
    return {
        "terminal": terminal, "alive": alive, "excluded": excluded,
        "logw": logw, "l_int": l_int, "L_int": L_int, "Lz_int": Lz_int,
        "exit_fraction": exit_fraction, "risk_ratio_max": risk_ratio_max,
        "moments": {tm: (float(np.mean(np.concatenate(v))) if v else None)
                    for tm, v in moments.items()},
    }


def simulate_state(model: ModelSpec, measure: str, t0: float, z0,
                   cfg: SimConfig, policy=None,
                   control: MarkovControl | None = None) -> dict:
    """Terminal states of Z under the physical, tilted or dual dynamics.

    measure: "physical", "tilted" (requires policy) or "dual" (requires
    control).  Returns {"terminal": (n_paths, n+d), "excluded": int}.
    """
    if measure not in ("physical", "tilted", "dual"):
        raise ValueError(f"unknown measure {measure!r}")
    if measure == "tilted" and policy is None:
        raise ValueError("tilted measure requires a policy")
    if measure == "dual" and control is None:
        raise ValueError("dual measure requires a control")
    out = _simulate(model, measure, t0, z0, cfg,
                    policy=policy, control=control)
    return {"terminal": out["terminal"], "excluded": out["excluded"],
            "alive": out["alive"]}


def _mean_stderr(vals, alive):
    v = vals[alive]
    mean = float(np.mean(v))
    stderr = float(np.std(v, ddof=1) / np.sqrt(v.size))
    return mean, stderr


def estimate_utility_direct(model: ModelSpec, policy, w0: float, t0: float,
                            z0, cfg: SimConfig) -> Estimate:
    """E[U(W_T)] with exact exponential wealth reconstruction.

    Log-wealth accumulates (pi' mu1 - |sigma' pi|^2 / 2) dt + pi' sigma dW
    along the physical paths; the estimate is w0^a * mean(exp(a inc) / a),
    keeping the w0^a factor outermost so estimates at different w0 under
    common random numbers differ by exactly that factor.
    """
    if not w0 > 0:
        raise ValueError("w0 must be positive")
    out = _simulate(model, "direct", t0, z0, cfg, policy=policy)
    a = model.a
    base = np.exp(a * out["logw"]) / a
    mean, stderr = _mean_stderr(base, out["alive"])
    return Estimate(
        estimator="direct", mean=(w0 ** a) * mean,
        stderr=(w0 ** a) * stderr, n_paths=cfg.n_paths,
        n_steps=cfg.n_steps, seed=cfg.seed,
        extra={"excluded": out["excluded"],
               "exit_fraction": out["exit_fraction"], "w0": w0})


def estimate_utility_girsanov(model: ModelSpec, policy, w0: float, t0: float,
                              z0, cfg: SimConfig) -> Estimate:
    """(w0^a/a) E^{Q_pi}[exp(int l ds)] under the tilted state dynamics."""
    if not w0 > 0:
        raise ValueError("w0 must be positive")
    out = _simulate(model, "tilted", t0, z0, cfg, policy=policy)
    a = model.a
    base = np.exp(out["l_int"]) / a
    mean, stderr = _mean_stderr(base, out["alive"])
    return Estimate(
        estimator="girsanov", mean=(w0 ** a) * mean,
        stderr=(w0 ** a) * stderr, n_paths=cfg.n_paths,
        n_steps=cfg.n_steps, seed=cfg.seed,
        extra={"excluded": out["excluded"],
               "exit_fraction": out["exit_fraction"], "w0": w0})


def estimate_dual_value(model: ModelSpec, control: MarkovControl, t0: float,
                        z0, cfg: SimConfig) -> Estimate:
    """E[int_t0^T L(s, Zbar_s, nu_s) ds] under the dual drift dynamics."""
    out = _simulate(model, "dual", t0, z0, cfg, control=control)
    mean, stderr = _mean_stderr(out["L_int"], out["alive"])
    extra = {"excluded": out["excluded"], "control": control.label}
    if control.tracker is not None:
        extra["exit_fraction"] = control.tracker.exit_fraction
    return Estimate(
        estimator="dual_value", mean=mean, stderr=stderr,
        n_paths=cfg.n_paths, n_steps=cfg.n_steps, seed=cfg.seed,
        extra=extra)


def estimate_dual_gradient(model: ModelSpec, control: MarkovControl,
                           t0: float, z0, cfg: SimConfig) -> Estimate:
    """Pathwise estimator of u_z: integrate L_z along the same dual paths.

    L_z uses the explicit structure of L with central finite differences of
    (A, ell, k) in z, step 1e-5 (1 + |z|).
    """
    out = _simulate(model, "dual", t0, z0, cfg, control=control,
                    want_gradient=True)
    alive = out["alive"]
    vals = out["Lz_int"][alive]
    mean = np.mean(vals, axis=0)
    stderr = np.std(vals, axis=0, ddof=1) / np.sqrt(vals.shape[0])
    return Estimate(
        estimator="dual_gradient", mean=mean, stderr=stderr,
        n_paths=cfg.n_paths, n_steps=cfg.n_steps, seed=cfg.seed,
        extra={"excluded": out["excluded"], "control": control.label})


def admissibility_diagnostic(model: ModelSpec, policy, t0: float, z0,
                             cfg: SimConfig, eps: float = 0.05) -> dict:
    """Sampled proxies for the admissibility conditions along physical paths.

    Reports the max of |sigma' pi|^2 / (1 + |Y|^2) over (path, step) and the
    empirical moment E[exp(eps |Y_t|^2)] at quarter horizon marks.  Purely
    diagnostic; a diverging moment is flagged, not raised.
    """
    marks = [t0 + frac * (model.T - t0) for frac in (0.25, 0.5, 0.75, 1.0)]
    out = _simulate(model, "physical", t0, z0, cfg, policy=policy,
                    eps_moment=eps, moment_times=marks)
    moments = {f"t={tm:.4f}": v for tm, v in out["moments"].items()}
    finite = all(v is None or np.isfinite(v) for v in out["moments"].values())
    return {
        "risk_ratio_max": out["risk_ratio_max"],
        "exp_moment_eps": eps,
        "exp_moments": moments,
        "moments_finite": finite,
        "excluded": out["excluded"],
    }
