"""Batch driver: forward solves, co-state and gradient checks, optimization and the tsunami twin.

Configuration is YAML or JSON with ``schema_version: 1``; unknown keys are
rejected.  Exit status: 0 pass, 1 check failed, 2 configuration error,
3 solver failure.
"""

from __future__ import annotations

import argparse
import json
import platform
import sys
import time
from pathlib import Path

import numpy as np
import scipy
import yaml

from . import __version__
from .adjoint import compare_sweep_quadrature, sweep_costate, verify_hamiltonian_pde, write_costate_csv
from .errors import ConfigInvalid, GoursatError
from .forward import solve_state
from .geometry import build_domain
from .io import fmt, write_csv, write_json
from .optimize import check_extremum, cost, gradient_check, projected_gradient, write_extremum_report
from .problem import BUILTIN_PROBLEMS, builtin_problem

SCHEMA_VERSION = 1
COMMANDS = ("forward", "adjoint-check", "gradient-check", "optimize", "tsunami-twin", "tsunami-invert")
EXIT_PASS, EXIT_CHECK_FAILED, EXIT_CONFIG, EXIT_SOLVER = 0, 1, 2, 3

# allowed keys per section; values are defaults (None = required or optional without default)
SCHEMA = {
    "": {"schema_version": None, "command": None, "problem": None, "domain": {}, "grid": {}, "tolerances": {},
         "seed": 0, "output": None, "tsunami": {}},
    "domain": {"arcs": None, "vertices": []},
    "grid": {"h_max": 1 / 32},
    "tolerances": {"threshold": None, "count": None, "eps": 1e-4, "floor_fraction": 0.1, "tol": 1e-6,
                   "max_iter": 200, "step": "armijo", "samples": 200, "lattice": 11},
    "tsunami": {"model": None, "cells": 64, "lambdas": [1e-2, 1e-4, 1e-6], "u_true": {}, "noise": 0.0,
                "solver": {}, "observations": None, "require_decreasing": True, "error_threshold": None},
    "tsunami.model": {"omega": None, "g": 1.0, "c": 1.0, "depth": None, "r_range": None, "t_range": None},
    "tsunami.model.depth": {"kind": None, "h0": 1.0, "slope": 0.0, "curvature": 0.0},
    "tsunami.u_true": {"kind": "gaussian", "amplitude": 1.0, "center": [0.0, 0.0], "width": 0.25},
    "tsunami.solver": {"method": "cg", "tol": 1e-8, "max_iter": 300},
}
THRESHOLDS = {"adjoint-check": 1e-2, "gradient-check": 1e-3}
COUNTS = {"adjoint-check": 20, "gradient-check": 10}


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


def _check_keys(block, section):
    if not isinstance(block, dict):
        raise ConfigInvalid(f"{section or 'config'}: expected a mapping")
    allowed = SCHEMA[section]
    for key in block:
        if key not in allowed:
            where = f"{section}.{key}" if section else key
            raise ConfigInvalid(f"unknown key '{where}'")
    out = {k: v for k, v in allowed.items() if not isinstance(v, dict)}
    out.update({k: dict(v) for k, v in allowed.items() if isinstance(v, dict)})
    out.update(block)
    return out


def read_config(path):
    """Raw mapping from a YAML or JSON file."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigInvalid(f"cannot read config {path}: {exc}") from exc
    try:
        raw = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigInvalid(f"cannot parse config {path}: {exc}") from exc
    return raw or {}


def load_config(path):
    return validate_config(read_config(path))


def validate_config(raw):
    """Fill defaults and reject unknown or missing fields."""
    cfg = _check_keys(raw, "")
    if cfg["schema_version"] != SCHEMA_VERSION:
        raise ConfigInvalid(f"schema_version must be {SCHEMA_VERSION}, got {cfg['schema_version']!r}")
    if cfg["command"] not in COMMANDS:
        raise ConfigInvalid(f"command must be one of {', '.join(COMMANDS)}, got {cfg['command']!r}")
    cfg["grid"] = _check_keys(cfg["grid"], "grid")
    cfg["tolerances"] = _check_keys(cfg["tolerances"], "tolerances")
    cfg["domain"] = _check_keys(cfg["domain"], "domain") if cfg["domain"] else {}
    seed = cfg["seed"]
    if not isinstance(seed, int) or isinstance(seed, bool) or not 0 <= seed < 2 ** 64:
        raise ConfigInvalid("seed must be an integer in [0, 2^64)")
    h = cfg["grid"]["h_max"]
    if not isinstance(h, (int, float)) or h <= 0:
        raise ConfigInvalid("grid.h_max must be a positive number")
    if cfg["command"].startswith("tsunami"):
        cfg["tsunami"] = _validate_tsunami(cfg["tsunami"], cfg["command"])
    else:
        if cfg["problem"] not in BUILTIN_PROBLEMS:
            raise ConfigInvalid(f"problem must be one of {', '.join(BUILTIN_PROBLEMS)}, got {cfg['problem']!r}")
        if cfg["domain"] and cfg["domain"]["arcs"] is None:
            raise ConfigInvalid("domain.arcs is required when a domain block is given")
    return cfg


def _validate_tsunami(block, command):
    ts = _check_keys(block, "tsunami")
    if ts["model"] is None:
        raise ConfigInvalid("tsunami.model is required")
    model = _check_keys(ts["model"], "tsunami.model")
    for key in ("omega", "r_range", "t_range"):
        if model[key] is None:
            raise ConfigInvalid(f"tsunami.model.{key} is required")
    if model["depth"] is None:
        raise ConfigInvalid("tsunami.model.depth is required (depth profile missing)")
    model["depth"] = _check_keys(model["depth"], "tsunami.model.depth")
    if model["depth"]["kind"] not in ("constant", "linear", "quadratic"):
        raise ConfigInvalid(f"tsunami.model.depth.kind must be constant, linear or quadratic, "
                            f"got {model['depth']['kind']!r}")
    ts["model"] = model
    ts["u_true"] = _check_keys(ts["u_true"], "tsunami.u_true")
    ts["solver"] = _check_keys(ts["solver"], "tsunami.solver")
    lams = ts["lambdas"]
    if not isinstance(lams, list) or not lams or any(not isinstance(x, (int, float)) or x <= 0 for x in lams):
        raise ConfigInvalid("tsunami.lambdas must be a non-empty list of positive numbers")
    if not isinstance(ts["cells"], int) or ts["cells"] < 2:
        raise ConfigInvalid("tsunami.cells must be an integer >= 2")
    if command == "tsunami-invert" and not ts["observations"]:
        raise ConfigInvalid("tsunami.observations is required for tsunami-invert")
    return ts


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _domain_and_problem(cfg):
    bp = builtin_problem(cfg["problem"])
    arcs = cfg["domain"]["arcs"] if cfg["domain"] else bp.arcs
    verts = cfg["domain"]["vertices"] if cfg["domain"] else bp.extra_vertices
    dom = build_domain(arcs, verts, float(cfg["grid"]["h_max"]))
    S, T = dom.grid.mesh()
    return dom, bp, bp.u0(S, T)


def write_field_csv(path, dom, fields):
    """Nodal fields on inside nodes; fields maps a column prefix to an (ns, nt, k) array."""
    S, T = dom.grid.mesh()
    ins = dom.grid.inside
    header = ["s", "t"]
    cols = []
    for name, arr in fields.items():
        arr = np.asarray(arr, float)
        k = arr.shape[-1]
        header += [f"{name}_{i}" for i in range(k)] if k > 1 else [name]
        cols.append(arr[ins].reshape(-1, k))
    data = np.concatenate([S[ins][:, None], T[ins][:, None]] + cols, axis=1)
    return write_csv(path, header, [[fmt(v) for v in row] for row in data])


def _threshold(cfg, command):
    th = cfg["tolerances"]["threshold"]
    return THRESHOLDS.get(command) if th is None else float(th)


def _count(cfg, command):
    c = cfg["tolerances"]["count"]
    return COUNTS.get(command, 10) if c is None else int(c)


# ---------------------------------------------------------------------------
# commands; each returns (passed, outputs)
# ---------------------------------------------------------------------------


def cmd_forward(cfg, out, workers):
    dom, bp, u = _domain_and_problem(cfg)
    st = solve_state(dom, bp.problem, u=u)
    br = cost(dom, bp.problem, st)
    files = [write_field_csv(out / "state.csv", dom, {"x": st.x, "x_s": st.x_s, "x_t": st.x_t, "u": u}),
             write_json(out / "cost.json", {**br.as_dict(), "iterations": st.iterations, "seed": cfg["seed"]})]
    return True, files


def cmd_adjoint_check(cfg, out, workers):
    dom, bp, u = _domain_and_problem(cfg)
    st = solve_state(dom, bp.problem, u=u)
    cs = sweep_costate(dom, bp.problem, st, u)
    rep = compare_sweep_quadrature(dom, bp.problem, st, u, _count(cfg, "adjoint-check"), cfg["seed"], cs)
    pde = verify_hamiltonian_pde(dom, bp.problem, st, cs)
    th = _threshold(cfg, "adjoint-check")
    passed = rep["max_relative_error"] < th
    report = {**rep, "threshold": th, "passed": passed, "pde_residual_sup": pde["sup"], "pde_residual_l2": pde["l2"],
              "problem": cfg["problem"], "h_max": cfg["grid"]["h_max"]}
    files = [write_json(out / "adjoint_check.json", report), write_costate_csv(out / "costate.csv", dom, cs)]
    return passed, files


def cmd_gradient_check(cfg, out, workers):
    dom, bp, u = _domain_and_problem(cfg)
    tol = cfg["tolerances"]
    rep = gradient_check(dom, bp.problem, u, _count(cfg, "gradient-check"), cfg["seed"], tol["eps"],
                         tol["floor_fraction"], workers)
    th = _threshold(cfg, "gradient-check")
    passed = rep["max_relative_error"] < th
    report = {**rep, "threshold": th, "passed": passed, "problem": cfg["problem"], "h_max": cfg["grid"]["h_max"]}
    return passed, [write_json(out / "gradient_check.json", report)]


def cmd_optimize(cfg, out, workers):
    dom, bp, u0 = _domain_and_problem(cfg)
    tol = cfg["tolerances"]
    trace = projected_gradient(dom, bp.problem, u0, tol=float(tol["tol"]), max_iter=int(tol["max_iter"]),
                               step=tol["step"])
    ext = check_extremum(dom, bp.problem, trace.state, trace.costate, trace.u, int(tol["samples"]),
                         int(tol["lattice"]), cfg["seed"])
    files = [trace.write_csv(out / "trace.csv"),
             write_field_csv(out / "control.csv", dom, {"u": trace.u, "x": trace.state.x}),
             write_extremum_report(out / "extremum.json", ext)]
    return bool(trace.converged and ext["violations"] == 0), files


def _tsunami_setup(ts):
    from .tsunami import BasinModel, depth_profile

    m = ts["model"]
    d = m["depth"]
    depth = depth_profile(d["kind"], **{k: v for k, v in d.items() if k != "kind"})
    return BasinModel(float(m["omega"]), float(m["g"]), float(m["c"]), depth, tuple(m["r_range"]),
                      tuple(m["t_range"]))


def _cells(cfg, A):
    return cfg["tsunami"]["cells"] if cfg.get("_hmax_override") is None else max(2, round(A / cfg["_hmax_override"]))


def cmd_tsunami_twin(cfg, out, workers):
    from . import tsunami as ts_mod

    ts = cfg["tsunami"]
    model = _tsunami_setup(ts)
    cmap = ts_mod.build_characteristic_map(model)
    ut = ts["u_true"]
    u_fun = ts_mod.control_profile(ut["kind"], **{k: v for k, v in ut.items() if k != "kind"})
    sv = ts["solver"]
    res = ts_mod.twin_experiment(model, u_fun, [float(x) for x in ts["lambdas"]], _cells(cfg, cmap.A),
                                 float(ts["noise"]), cfg["seed"], float(sv["tol"]), int(sv["max_iter"]),
                                 sv["method"], workers)
    quads = res["quads"]
    files = [ts_mod.write_observations_csv(out / "observations.csv", quads, res["obs"])]
    rows = []
    for k, r in enumerate(res["results"]):
        br = r["trace"].breakdown
        files.append(ts_mod.write_u_csv(out / f"u_lambda_{k}.csv", quads, res["map"], r["u"], res["u_true"]))
        files.append(r["trace"].write_csv(out / f"trace_lambda_{k}.csv"))
        files.append(ts_mod.write_misfit_json(out / f"misfit_lambda_{k}.json", br,
                                              {"lambda": r["lambda"], "relative_l2_error": r["relative_error"],
                                               "seed": cfg["seed"], "noise": ts["noise"],
                                               "noise_sigma": res["obs"].sigma}))
        rows.append((r["lambda"], r["relative_error"], br["misfit"], br["regularization"], br["iterations"]))
    files.append(ts_mod.write_lambda_sweep_csv(out / "lambda_sweep.csv", rows))
    errs = [r[1] for r in rows]
    order = np.argsort([-r[0] for r in rows])
    passed = all(r["trace"].converged for r in res["results"])
    if ts["require_decreasing"]:
        e = np.array(errs)[order]
        passed &= bool(np.all(np.diff(e) < 0))
    if ts["error_threshold"] is not None:
        passed &= bool(errs[order[-1]] < float(ts["error_threshold"]))
    return passed, files


def cmd_tsunami_invert(cfg, out, workers):
    from . import tsunami as ts_mod

    ts = cfg["tsunami"]
    model = _tsunami_setup(ts)
    cmap = ts_mod.build_characteristic_map(model)
    quads = ts_mod.quadrant_decompose(model, cmap, _cells(cfg, cmap.A))
    if not Path(ts["observations"]).is_file():
        raise ConfigInvalid(f"tsunami.observations: no such file {ts['observations']}")
    obs = ts_mod.read_observations_csv(ts["observations"], cmap, quads)
    sv = ts["solver"]
    files, rows, passed = [], [], True
    for k, lam in enumerate(float(x) for x in ts["lambdas"]):
        u, trace = ts_mod.inverse_solve(model, cmap, quads, obs, lam, float(sv["tol"]), int(sv["max_iter"]),
                                        sv["method"], workers=workers)
        br = trace.breakdown
        files.append(ts_mod.write_u_csv(out / f"u_lambda_{k}.csv", quads, cmap, u))
        files.append(trace.write_csv(out / f"trace_lambda_{k}.csv"))
        files.append(ts_mod.write_misfit_json(out / f"misfit_lambda_{k}.json", br, {"lambda": lam, "seed": cfg["seed"]}))
        rows.append((lam, None, br["misfit"], br["regularization"], br["iterations"]))
        passed &= trace.converged
    files.append(ts_mod.write_lambda_sweep_csv(out / "lambda_sweep.csv", rows))
    return passed, files


HANDLERS = {"forward": cmd_forward, "adjoint-check": cmd_adjoint_check, "gradient-check": cmd_gradient_check,
            "optimize": cmd_optimize, "tsunami-twin": cmd_tsunami_twin, "tsunami-invert": cmd_tsunami_invert}


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def run(cfg, out, workers=1):
    """Dispatch a validated config; returns (exit status, manifest dict)."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    status, error, files = EXIT_PASS, None, []
    try:
        passed, files = HANDLERS[cfg["command"]](cfg, out, workers)
        status = EXIT_PASS if passed else EXIT_CHECK_FAILED
    except ConfigInvalid as exc:
        status, error = EXIT_CONFIG, f"{type(exc).__name__}: {exc}"
    except (GoursatError, FloatingPointError, np.linalg.LinAlgError) as exc:
        status, error = EXIT_SOLVER, f"{type(exc).__name__}: {exc}"
    manifest = {
        "config": {k: v for k, v in cfg.items() if not k.startswith("_")},
        "versions": {"goursat": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                     "python": platform.python_version()},
        "seed": cfg["seed"], "workers": workers, "wall_time_seconds": time.perf_counter() - t0,
        "exit_status": status, "error": error, "outputs": sorted(Path(f).name for f in files),
    }
    write_json(out / "manifest.json", manifest)
    return status, manifest


def build_parser():
    p = argparse.ArgumentParser(prog="goursat", description=__doc__.splitlines()[0])
    p.add_argument("command", nargs="?", choices=COMMANDS, help="overrides the command in the config")
    p.add_argument("--config", required=True, help="YAML or JSON run configuration")
    p.add_argument("--out", default=None, help="output directory (default: config output or ./out)")
    p.add_argument("--workers", type=int, default=1, help="threads for independent sub-problems")
    p.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    p.add_argument("--hmax", type=float, default=None, help="overrides the grid spacing")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        raw = dict(read_config(args.config))
        if args.command:
            raw["command"] = args.command
        if args.seed is not None:
            raw["seed"] = args.seed
        if args.hmax is not None:
            raw["grid"] = {**(raw.get("grid") or {}), "h_max": args.hmax}
        cfg = validate_config(raw)
        cfg["_hmax_override"] = args.hmax
        obs = cfg.get("tsunami", {}).get("observations")
        if obs and not Path(obs).is_absolute():
            # relative observation paths are taken from the config file's directory
            cfg["tsunami"]["observations"] = str(Path(args.config).parent / obs)
        if args.workers < 1:
            raise ConfigInvalid("--workers must be at least 1")
    except ConfigInvalid as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = args.out or cfg["output"] or "out"
    status, manifest = run(cfg, out, args.workers)
    label = {EXIT_PASS: "pass", EXIT_CHECK_FAILED: "check failed", EXIT_SOLVER: "solver failure",
             EXIT_CONFIG: "config error"}[status]
    print(f"{cfg['command']}: {label} ({manifest['wall_time_seconds']:.2f} s) -> {out}")
    if manifest["error"]:
        print(manifest["error"], file=sys.stderr)
    return status


if __name__ == "__main__":
    sys.exit(main())
