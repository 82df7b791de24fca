"""Batch front door: check | solve | verify | sweep, driven by a JSON config.

All outputs are machine-readable (JSON / CSV / binary field files) and
deterministic for a fixed config: seeds live in the config and no
timestamps are written.  Exit codes: 0 success, 1 quantitative failure,
2 usage/config error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import montecarlo as mc
from . import pde
from .model import builtin_model, check_conditions

SCHEMA_VERSION = 1

_ALLOWED = {
    "": {"model", "grid", "solver", "mc", "eval_point", "cutoffs",
         "check", "output_dir"},
    "model": {"name", "params"},
    "grid": {"nodes", "time_steps", "box"},
    "grid.box": {"lo", "hi"},
    "solver": {"safety", "cutoff", "verbose"},
    "mc": {"seed", "n_paths", "n_steps", "antithetic"},
    "eval_point": {"t0", "x0", "y0", "w0"},
    "check": {"sample_count", "box", "bounds", "seed"},
    "check.box": {"lo", "hi"},
}


class UsageError(ValueError):
    pass


def _check_keys(obj, path=""):
    if not isinstance(obj, dict):
        return
    allowed = _ALLOWED.get(path)
    if allowed is not None:
        unknown = set(obj) - allowed
        if unknown:
            raise UsageError(
                f"unknown config key(s) {sorted(unknown)} under "
                f"'{path or 'top level'}'")
    for k, v in obj.items():
        sub = f"{path}.{k}" if path else k
        if sub in _ALLOWED:
            _check_keys(v, sub)


def load_config(path) -> dict:
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot parse config {path}: {exc}") from exc
    _check_keys(cfg)
    for key in ("model", "grid", "eval_point", "mc"):
        if key not in cfg:
            raise UsageError(f"config missing required section '{key}'")
    return cfg


def _build(cfg, seed_override=None):
    model = builtin_model(cfg["model"]["name"], cfg["model"].get("params"))
    ep = cfg["eval_point"]
    z0 = np.concatenate([np.atleast_1d(np.asarray(ep["x0"], float)),
                         np.atleast_1d(np.asarray(ep["y0"], float))])
    g = cfg["grid"]
    if "box" in g:
        grid = pde.make_grid(model, g["box"]["lo"], g["box"]["hi"],
                             g["nodes"], g["time_steps"])
    else:
        grid = pde.default_grid(model, z0, g.get("nodes", 41),
                                g.get("time_steps", 64))
    solver = pde.SolverConfig(**cfg.get("solver", {}))
    m = dict(cfg["mc"])
    if seed_override is not None:
        m["seed"] = seed_override
    sim = mc.SimConfig(**m)
    point = {"t0": float(ep.get("t0", 0.0)), "z0": z0,
             "w0": float(ep.get("w0", 1.0))}
    return model, grid, solver, sim, point


def _write_json(payload, path):
    payload = dict(payload)
    payload.setdefault("schema_version", SCHEMA_VERSION)
    Path(path).write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_check(cfg, out_dir: Path, seed=None) -> int:
    model, grid, _, _, _ = _build(cfg, seed)
    ck = cfg.get("check", {})
    if "box" in ck:
        box = (np.asarray(ck["box"]["lo"], float),
               np.asarray(ck["box"]["hi"], float))
    else:
        box = grid.box
    report = check_conditions(model, box,
                              sample_count=ck.get("sample_count", 256),
                              seed=ck.get("seed", 0),
                              bounds=ck.get("bounds"))
    _write_json(report.to_json(), out_dir / "check_report.json")
    return 0 if report.all_pass else 1


def _solve_bundle(model, grid, solver):
    field = pde.solve_semilinear(model, grid, solver)
    policy = pde.extract_policy(field, model)
    res = pde.residual(field, model)
    growth = pde.growth_diagnostics(field, model)
    return field, policy, res, growth


def cmd_solve(cfg, out_dir: Path, seed=None) -> int:
    model, grid, solver, _, point = _build(cfg, seed)
    field, policy, res, growth = _solve_bundle(model, grid, solver)

    pde.write_field_binary(field, out_dir / "field.bin")
    pde.export_csv(field, out_dir / "field.csv", policy)

    t0, z0, w0 = point["t0"], point["z0"], point["w0"]
    u0 = field.value_at(t0, z0)
    a = model.a
    pi_interp = policy.interpolant()
    summary = {
        "model": model.name,
        "u_at_point": u0,
        "value_at_point": (w0 ** a / a) * float(np.exp(-u0)),
        "policy_at_point": [float(v) for v in pi_interp(t0, z0[None, :])[0]],
        "terminal_condition_max": float(np.abs(field.u[-1]).max()),
        "terminal_condition_pass": bool(np.abs(field.u[-1]).max() == 0.0),
        "max_residual": res.global_max,
        "growth_ratio": growth["max_ratio"],
        "cutoff_active_nodes": field.cutoff_active_nodes,
        "point": {"t0": t0, "z0": [float(v) for v in z0], "w0": w0},
    }
    if cfg.get("cutoffs"):
        table = pde.cutoff_convergence(model, grid, solver, cfg["cutoffs"])
        summary["cutoff_table"] = table["rows"]
        summary["largest_active_R"] = table["largest_active_R"]
    _write_json(summary, out_dir / "solve_summary.json")
    return 0


def cmd_verify(cfg, out_dir: Path, seed=None, pi_zero=False) -> int:
    model, grid, solver, sim, point = _build(cfg, seed)
    field_path = out_dir / "field.bin"
    if not field_path.exists():
        raise UsageError(f"verify needs a prior solve output at {field_path}")
    field = pde.read_field_binary(field_path)
    policy = pde.extract_policy(field, model)
    res = pde.residual(field, model)

    t0, z0, w0 = point["t0"], point["z0"], point["w0"]
    a = model.a
    u0 = field.value_at(t0, z0)
    pde_value = (w0 ** a / a) * float(np.exp(-u0))
    horizon = model.T - t0
    grid_slack = 2.0 * res.global_max * horizon

    used_policy = np.zeros(model.n) if pi_zero else policy
    direct = mc.estimate_utility_direct(model, used_policy, w0, t0, z0, sim)
    girsanov = mc.estimate_utility_girsanov(model, used_policy, w0, t0, z0, sim)
    nu_hat = mc.dual_control_from_field(field, model)
    dual = mc.estimate_dual_value(model, nu_hat, t0, z0, sim)
    grad = mc.estimate_dual_gradient(model, nu_hat, t0, z0, sim)

    dual_value = (w0 ** a / a) * float(np.exp(-dual.mean))
    dual_value_se = abs(dual_value) * dual.stderr

    quantities = {
        "direct": (direct.mean, direct.stderr, 0.0),
        "girsanov": (girsanov.mean, girsanov.stderr, 0.0),
        "dual_implied": (dual_value, dual_value_se, grid_slack),
        "pde": (pde_value, 0.0, grid_slack),
    }
    names = list(quantities)
    comparisons = []
    all_pass = True
    for i in range(len(names)):
        for j in range(i + 1, len(names)):
            m1, s1, g1 = quantities[names[i]]
            m2, s2, g2 = quantities[names[j]]
            se = float(np.hypot(s1, s2))
            slack = max(g1, g2)
            diff = abs(m1 - m2)
            z = diff / se if se > 0 else (0.0 if diff <= slack else np.inf)
            ok = diff <= 3.0 * se + slack
            comparisons.append({"pair": [names[i], names[j]],
                                "diff": diff, "z": z, "pass": bool(ok)})
            all_pass &= ok

    grid_uz = field.grad_at(t0, z0)
    gdiff = np.abs(np.asarray(grad.mean) - grid_uz)
    gok = bool(np.all(gdiff <= 3.0 * np.asarray(grad.stderr) + grid_slack))
    all_pass &= gok

    suboptimal = pi_zero and (pde_value - direct.mean) > 3.0 * direct.stderr

    report = {
        "model": model.name,
        "point": {"t0": t0, "z0": [float(v) for v in z0], "w0": w0},
        "seed": sim.seed,
        "pde": {"u": u0, "value": pde_value,
                "residual_bound": res.global_max, "grid_slack": grid_slack},
        "estimates": {e.estimator: e.to_json()
                      for e in (direct, girsanov, dual, grad)},
        "dual_implied_value": {"mean": dual_value, "stderr": dual_value_se},
        "comparisons": comparisons,
        "gradient": {"grid_u_z": [float(v) for v in grid_uz],
                     "mc_u_z": [float(v) for v in np.atleast_1d(grad.mean)],
                     "pass": gok},
        "policy_forced_zero": bool(pi_zero),
        "flagged_suboptimal": bool(suboptimal),
        "all_pass": bool(all_pass and not suboptimal),
    }
    _write_json(report, out_dir / "verify_report.json")
    return 0 if report["all_pass"] else 1


def cmd_sweep(cfg, out_dir: Path, axis: str, values, seed=None) -> int:
    """Repeat solve (+ a direct-MC spot check) per parameter value."""
    rows = []
    for val in values:
        sub = json.loads(json.dumps(cfg))  # deep copy
        if axis == "cutoff":
            sub.setdefault("solver", {})["cutoff"] = val
        else:
            sub["model"].setdefault("params", {})[axis] = val
        model, grid, solver, sim, point = _build(sub, seed)
        field, policy, res, growth = _solve_bundle(model, grid, solver)
        t0, z0, w0 = point["t0"], point["z0"], point["w0"]
        u0 = field.value_at(t0, z0)
        direct = mc.estimate_utility_direct(model, policy, w0, t0, z0, sim)
        pde_value = (w0 ** model.a / model.a) * float(np.exp(-u0))
        se = direct.stderr
        rows.append([val, u0, pde_value, direct.mean, se,
                     abs(direct.mean - pde_value) / se if se > 0 else 0.0,
                     res.global_max, growth["max_ratio"],
                     field.cutoff_active_nodes])
    header = ",".join([axis, "u_at_point", "pde_value", "mc_direct_mean",
                       "mc_direct_stderr", "z_score", "max_residual",
                       "growth_ratio", "cutoff_active_nodes"])
    path = out_dir / "sweep.csv"
    with open(path, "w") as fh:
        fh.write(header + "\n")
        for row in rows:
            fh.write(",".join(f"{v:.12g}" if isinstance(v, float) else str(v)
                              for v in row) + "\n")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="hjbfolio",
        description="Solve and verify the power-utility portfolio problem "
                    "with stochastic volatility.")
    parser.add_argument("command",
                        choices=["check", "solve", "verify", "sweep"])
    parser.add_argument("--config", required=True)
    parser.add_argument("--out", default="out")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--pi-zero", action="store_true",
                        help="verify with the zero policy instead of the "
                             "grid-extracted one")
    parser.add_argument("--axis", default=None, help="sweep parameter name")
    parser.add_argument("--values", default=None,
                        help="sweep values as a JSON list")
    args = parser.parse_args(argv)

    try:
        cfg = load_config(args.config)
        out_dir = Path(args.out if args.out else cfg.get("output_dir", "out"))
        out_dir.mkdir(parents=True, exist_ok=True)
        if args.command == "check":
            return cmd_check(cfg, out_dir, args.seed)
        if args.command == "solve":
            return cmd_solve(cfg, out_dir, args.seed)
        if args.command == "verify":
            return cmd_verify(cfg, out_dir, args.seed, pi_zero=args.pi_zero)
        if args.command == "sweep":
            if not args.axis or args.values is None:
                raise UsageError("sweep requires --axis and --values")
            values = json.loads(args.values)
            if not isinstance(values, list):
                raise UsageError("--values must be a JSON list")
            return cmd_sweep(cfg, out_dir, args.axis, values, args.seed)
    except (UsageError, pde.ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 2


if __name__ == "__main__":
    sys.exit(main())
