"""Command-line driver: simulate, optimize, reconstruct, validate, compare.

Exit codes: 0 success, 2 configuration or input error, 3 simulation or
numerical failure, 4 optimizer did not converge (best-so-far is still written),
5 validation threshold failed.

The output directory is ``--out``, else ``run.output_dir`` from the config,
else ``$LACTOCRYST_OUTPUT_ROOT/<command>-<config hash>`` (``./runs`` when the
variable is unset).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import tomli

from lactocryst import __version__
from lactocryst import csvio
from lactocryst.config import ExperimentConfig, default_config, dump_config, load_config
from lactocryst.exceptions import (CFLViolation, ConfigurationError, InfeasibleStart,
                                   LactocrystError, MaxIterExceeded, ModelDomainError,
                                   NotRealizable, StateInvariantViolated, StepSizeUnderflow)
from lactocryst.integrator import IntegratorOptions, integrate, monitor_path_constraints
from lactocryst.maxent import MaxEntProblem, reconstruct
from lactocryst.model import conservation_residuals
from lactocryst.ocp import (ObjectiveSpec, OcpSolution, OcpSpec, SolverOptions, content_hash,
                            heuristic_objectives, lognormal_target, solve_ocp, solve_scenario4,
                            solve_scenario5)
from lactocryst.pbe import (PbeOptions, SizeGrid, moment_discrepancy, seed_from_moments,
                            simulate_pbe)
from lactocryst.policies import ControlProfile

log = logging.getLogger("lactocryst")

OUTPUT_ROOT_ENV = "LACTOCRYST_OUTPUT_ROOT"
EXIT_OK, EXIT_CONFIG, EXIT_SIM, EXIT_OPT, EXIT_VALIDATION = 0, 2, 3, 4, 5
NUMERICAL_ERRORS = (StepSizeUnderflow, StateInvariantViolated, ModelDomainError, CFLViolation,
                    NotRealizable, MaxIterExceeded, InfeasibleStart)
COMPARE_QUANTITIES = ("c_sat", "c_alpha", "T", "B", "G", "m_cry", "CV", "V", "d43")
TABLE_METRICS = ("d43", "CV", "B", "m_cry", "V")
EDGE_RATIO_MAX = 1e-12  # n(L_max) / max n, checked after each validation run


class InputError(LactocrystError):
    """Missing or inconsistent input files (exit code 2)."""


# ------------------------------------------------------------------ helpers

def config_hash(cfg):
    return hashlib.sha256(dump_config(cfg).encode()).hexdigest()


def _file_hash(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def output_dir(cfg, command, explicit=None):
    if explicit:
        out = Path(explicit)
    elif cfg is not None and cfg.run.output_dir:
        out = Path(cfg.run.output_dir)
    else:
        root = Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))
        tag = config_hash(cfg)[:12] if cfg is not None else "adhoc"
        out = root / f"{command}-{tag}"
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path, data):
    Path(path).write_text(json.dumps(_plain(data), indent=2, sort_keys=True) + "\n")
    return path


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        return repr(obj)
    return obj


def _finish(out, cfg, command, extra=None):
    """Resolved config plus a manifest of every file's hash."""
    if cfg is not None:
        (out / "resolved_config.toml").write_text(dump_config(cfg))
    files = {p.name: _file_hash(p) for p in sorted(out.iterdir())
             if p.is_file() and p.name != "manifest.json"}
    _write_json(out / "manifest.json", {
        "command": command, "version": __version__,
        "config_hash": config_hash(cfg) if cfg is not None else None,
        "files": files, **(extra or {})})


def _load_solution(path, cfg):
    if not path:
        raise ConfigurationError("an optimal policy needs a solution file (--warm-start)")
    if not Path(path).exists():
        raise InputError(f"solution file {path} not found")
    return OcpSolution.from_json(path, cfg.bounds())


def _policy(cfg: ExperimentConfig, tf=None):
    """(profile, initial state) for the configured policy."""
    s0 = cfg.state0()
    kind = cfg.policy.kind
    tf = cfg.run.tf if tf is None else tf
    if kind == "optimal":
        sol = _load_solution(cfg.policy.solution or cfg.ocp.warm_start, cfg)
        if sol.seed_moments is not None:
            s0 = s0.replace(mu=tuple(sol.seed_moments))
        return sol.profile, s0
    # a zero horizon still needs a valid profile; integration stops at t = 0
    return cfg.heuristic(kind, tf if tf > 0 else 1.0), s0


def _integrator_opts(cfg, dense_dt=None):
    o = cfg.integrator
    if o.dense_output_dt is None:
        o = replace(o, dense_output_dt=dense_dt or cfg.run.dense_output_dt)
    return o


def _summary(traj):
    d = traj.derived()
    lac, wat = conservation_residuals(traj, traj.model.constants)
    s = traj.final_state
    return {
        "tf": float(traj.times[-1]), "event": traj.event,
        "d43": float(d["d43"][-1]), "CV": float(d["CV"][-1]), "B": float(d["B"][-1]),
        "G": float(d["G"][-1]), "m_cry": s.m_cry, "V": float(d["V"][-1]), "T": s.T,
        "c_alpha": s.c_alpha, "c_sat": float(d["c_sat"][-1]),
        "lactose_residual_max": float(np.abs(lac).max()),
        "water_residual_max": float(np.abs(wat).max()),
        "path_constraints": monitor_path_constraints(traj),
        "integrator_stats": traj.stats,
    }


def _simulate_and_write(cfg, profile, s0, out, prefix="", tf=None):
    model = replace(cfg.model(), c_alpha0=s0.c_alpha, c_beta0=s0.c_beta)
    tf = cfg.run.tf if tf is None else tf
    traj = integrate(model, s0, profile, (0.0, min(tf, profile.tf)), _integrator_opts(cfg))
    csvio.write_trajectory(traj, out / f"{prefix}trajectory.csv")
    csvio.write_profile_samples(profile, traj.times, out / f"{prefix}profile.csv")
    return traj


# ------------------------------------------------------------------ commands

def cmd_simulate(cfg: ExperimentConfig, out: Path):
    profile, s0 = _policy(cfg)
    traj = _simulate_and_write(cfg, profile, s0, out)
    summary = {"policy": cfg.policy.kind, **_summary(traj)}
    _write_json(out / "summary.json", summary)
    print(f"simulate: d43(tf) = {summary['d43']:.6e} m, CV(tf) = {summary['CV']:.6f}, "
          f"m_cry(tf) = {summary['m_cry']:.6f} kg -> {out}")
    return EXIT_OK


def build_spec(cfg: ExperimentConfig) -> OcpSpec:
    o = cfg.ocp
    model = cfg.model()
    s0 = cfg.state0()
    kind = {"d43": "d43", "cv": "cv", "seed": o.seed_objective, "moment-match": "moment_match",
            "nucleation": ("nucleation" if o.nucleation_variant == "terminal"
                           else "nucleation_integral")}[o.scenario]
    if kind == "nucleation" and o.scenario == "seed" and o.nucleation_variant == "integral":
        kind = "nucleation_integral"
    target = None
    if kind == "moment_match":
        target = o.target if o.target is not None else lognormal_target(
            o.target_median, o.target_sigma, s0.n_moments)
    objective = ObjectiveSpec(kind, target, o.weights,
                              o.t_max if o.scenario == "moment-match" else None)
    return OcpSpec(objective, model, s0, tf=cfg.run.tf, free_tf=o.scenario == "moment-match",
                   tf_min=o.tf_min, n_knots=o.n_knots, interpolation=o.interpolation,
                   bounds=cfg.bounds(), seed_moments_free=o.scenario == "seed",
                   seed_log_span=o.seed_log_span, realizability_margin=o.realizability_margin,
                   rk4_step=o.rk4_step, feas_tol=o.feas_tol)


def cmd_optimize(cfg: ExperimentConfig, out: Path):
    o = cfg.ocp
    spec = build_spec(cfg)
    heur_profiles = {"constant": cfg.heuristic("constant"), "linear": cfg.heuristic("linear")}
    heur = heuristic_objectives(spec, heur_profiles)
    if o.warm_start:
        guess = _load_solution(o.warm_start, cfg)
        start_name = str(o.warm_start)
    else:
        start_name = min(heur, key=lambda k: heur[k]["objective"])
        guess = heur_profiles[start_name]
    opts = SolverOptions(engine=o.engine, max_iter=o.max_iter, max_outer=o.max_outer,
                         rho0=o.rho0, fd_step=o.fd_step)
    if o.scenario == "seed":
        sol = solve_scenario4(spec, guess, opts)
    elif o.scenario == "moment-match":
        sol = solve_scenario5(spec, guess, opts)
    else:
        sol = solve_ocp(spec, guess, opts)
    provenance = {"config_hash": config_hash(cfg),
                  "input_hash": content_hash(spec.objective, spec.n_knots, spec.tf,
                                             spec.s0.to_array(), start_name),
                  "warm_start": start_name, "version": __version__}
    sol.to_json(out / "solution.json", provenance)
    sol.profile.to_csv(out / "optimal_knots.csv")
    dense_t = np.unique(np.append(np.arange(0.0, sol.tf, cfg.run.dense_output_dt), sol.tf))
    csvio.write_profile_samples(sol.profile, dense_t, out / "optimal_profile.csv")
    s0 = spec.s0 if sol.seed_moments is None else spec.s0.replace(mu=tuple(sol.seed_moments))
    traj = _simulate_and_write(cfg, sol.profile, s0, out, prefix="optimal_", tf=sol.tf)
    dominates = {k: sol.objective <= v["objective"] for k, v in heur.items()}
    summary = {"scenario": o.scenario, "objective_kind": spec.objective.kind,
               "objective": sol.objective, "tf": sol.tf,
               "max_scaled_violation": sol.max_scaled_violation,
               "status": sol.diagnostics["status"], "heuristics": heur,
               "dominates_heuristics": dominates, "resimulated": _summary(traj),
               "diagnostics": sol.diagnostics}
    code = EXIT_OK
    if o.scenario == "seed":
        summary["seed"] = _seed_pipeline(cfg, sol, s0, out)
        if not summary["seed"].get("passed", False):
            code = EXIT_VALIDATION
    _write_json(out / "summary.json", summary)
    print(f"optimize[{o.scenario}]: objective {sol.objective:.6e} "
          f"(constant {heur['constant']['objective']:.6e}, "
          f"linear {heur['linear']['objective']:.6e}), status {sol.diagnostics['status']}")
    if sol.diagnostics["status"] != "converged":
        return EXIT_OPT
    return code


def _seed_pipeline(cfg, sol, s0, out):
    """Optimal seed -> max-entropy density -> full population-balance check."""
    mx = cfg.maxent
    me = reconstruct(MaxEntProblem(tuple(sol.seed_moments), n_nodes=mx.n_nodes,
                                   tail_tol=mx.tail_tol), tol=mx.tol, max_iter=mx.max_iter)
    _write_maxent(me, tuple(sol.seed_moments), out, mx.density_points, prefix="seed_")
    report = _validate(cfg, sol.profile, s0, out, tf=sol.tf)
    return {"maxent_converged": me.converged,
            "maxent_max_relative_residual": float(np.max(np.abs(
                me.relative_residuals(sol.seed_moments)))), **report}


def _write_maxent(sol, moments, out, n_points, prefix=""):
    L = np.linspace(sol.support[0], sol.support[1], n_points)
    csvio.write_table(out / f"{prefix}density.csv", ("L", "n"), np.column_stack([L, sol.density(L)]))
    _write_json(out / f"{prefix}maxent.json", {
        "moments": list(moments), "lambdas": list(sol.lambdas),
        "scaled_lambdas": list(sol.scaled_lambdas), "L_scale": sol.L_scale,
        "support": list(sol.support), "residuals": list(sol.residuals),
        "relative_residuals": list(sol.relative_residuals(moments)),
        "iterations": sol.iterations, "converged": sol.converged, "tail_mass": sol.tail_mass,
        "dual_value": sol.dual_value})


def cmd_reconstruct(cfg: ExperimentConfig, out: Path):
    mx = cfg.maxent
    moments = mx.moments
    if moments is None and cfg.ocp.warm_start:
        moments = _load_solution(cfg.ocp.warm_start, cfg).seed_moments
    if moments is None:
        moments = cfg.state0().mu
    sol = reconstruct(MaxEntProblem(tuple(moments), n_nodes=mx.n_nodes, tail_tol=mx.tail_tol),
                      tol=mx.tol, max_iter=mx.max_iter)
    _write_maxent(sol, tuple(moments), out, mx.density_points)
    print(f"reconstruct: {sol.iterations} Newton iterations, max relative residual "
          f"{np.max(np.abs(sol.relative_residuals(moments))):.3e}, support "
          f"[0, {sol.support[1]:.4e}] m -> {out}")
    return EXIT_OK


def _validate(cfg, profile, s0, out, tf=None):
    p = cfg.pbe
    tf = profile.tf if tf is None else tf
    model = replace(cfg.model(), c_alpha0=s0.c_alpha, c_beta0=s0.c_beta)
    grid = SizeGrid(p.L_max, p.nodes, p.spacing, p.L_cut)
    n0, _ = seed_from_moments(s0.mu, grid, tol=min(cfg.maxent.tol, 1e-11),
                              max_iter=max(cfg.maxent.max_iter, 300))
    opts = PbeOptions(p.scheme, p.stepper, p.cfl, p.dt, p.dt_max, p.output_dt)
    res = simulate_pbe(model, n0, profile, s0, tf, opts, p.snapshot_times)
    traj = integrate(model, s0, profile, (0.0, tf),
                     replace(_integrator_opts(cfg, p.output_dt), dense_output_dt=p.output_dt))
    idx = [int(np.argmin(np.abs(traj.times - t))) for t in res.times]
    if not np.allclose(traj.times[idx], res.times, rtol=0, atol=1e-6 * max(tf, 1.0)):
        raise InputError("PDE and moment-model output times do not line up")
    ode = traj.moments[idx]
    disc = moment_discrepancy(res.moments, ode)
    n_mu = disc.shape[1]
    header = ("t",) + tuple(f"rel_disc_mu{k}" for k in range(n_mu))
    csvio.write_table(out / "validation.csv", header, np.column_stack([res.times, disc]))
    csvio.write_table(out / "pbe_moments.csv", ("t",) + tuple(f"mu{k}" for k in range(n_mu)),
                      np.column_stack([res.times, res.moments]))
    for t, dist in res.distributions.items():
        dist.to_csv(out / f"distribution_t{t:g}.csv")
    worst = disc.max(axis=0)
    lo, hi = p.product_band
    vol = res.final.values * grid.moment_weights(3)[:, 3]
    in_band = (grid.centers >= lo) & (grid.centers <= hi)
    limits = np.where(np.arange(n_mu) <= 3, p.threshold_low, p.threshold_high)
    total = res.moments[0, 0]
    edge_ok = res.stats["edge_ratio"] < EDGE_RATIO_MAX
    if not edge_ok:
        log.warning("n(L_max) reaches %.3g of the peak density; extend pbe.L_max",
                    res.stats["edge_ratio"])
    return {"max_relative_discrepancy": worst.tolist(),
            "discrepancy_at_tf": disc[-1].tolist(), "thresholds": limits.tolist(),
            "passed_per_moment": (worst <= limits).tolist(),
            "passed": bool(np.all(worst <= limits)),
            "outflow_fraction": float(res.outflow / total) if total > 0 else 0.0,
            "edge_ratio": res.stats["edge_ratio"], "grid_long_enough": edge_ok,
            "product_band": list(p.product_band),
            "product_band_volume_fraction": float(vol[in_band].sum() / vol.sum()),
            "pbe_steps": res.stats["steps"], "grid_nodes": p.nodes, "scheme": p.scheme}


def cmd_validate(cfg: ExperimentConfig, out: Path):
    profile, s0 = _policy(cfg)
    report = _validate(cfg, profile, s0, out, tf=min(cfg.run.tf, profile.tf))
    _write_json(out / "validation.json", report)
    verdict = "PASS" if report["passed"] else "FAIL"
    print(f"validate: {verdict}; max relative discrepancy per moment "
          + ", ".join(f"{v:.3e}" for v in report["max_relative_discrepancy"]))
    return EXIT_OK if report["passed"] else EXIT_VALIDATION


def _read_run(path):
    path = Path(path)
    traj = path / "trajectory.csv"
    if not traj.exists():
        alt = path / "optimal_trajectory.csv"
        if not path.is_dir() or not alt.exists():
            raise InputError(f"run directory {path} has no trajectory.csv")
        traj = alt
    header, data = csvio.read_table(traj)
    return {name: data[:, i] for i, name in enumerate(header)}


def cmd_compare(run_dirs, out: Path):
    runs = {}
    for d in run_dirs:
        name = Path(d).name
        while name in runs:
            name += "'"
        runs[name] = _read_run(d)
    names = list(runs)
    ref = runs[names[0]]
    t = ref["t"]
    for name in names[1:]:
        r = runs[name]
        if not math.isclose(r["t"][-1], t[-1], rel_tol=1e-9, abs_tol=1e-9):
            raise InputError(f"run {name} ends at {r['t'][-1]} s, {names[0]} at {t[-1]} s")
        for key in ("mu3", "m_H2O", "T"):
            if not math.isclose(r[key][0], ref[key][0], rel_tol=1e-12, abs_tol=0.0):
                raise InputError(f"run {name} starts from a different initial state ({key})")
    diffs = []
    for q in COMPARE_QUANTITIES:
        cols = [np.interp(t, runs[n]["t"], runs[n][q]) for n in names]
        csvio.write_table(out / f"compare_{q}.csv", ("t",) + tuple(names),
                          np.column_stack([t] + cols))
        diffs.append([float(np.max(np.abs(c - cols[0]))) for c in cols])
    rows = [[n] + [float(runs[n][m][-1]) for m in TABLE_METRICS] for n in names]
    csvio.write_table(out / "compare_table.csv", ("run",) + TABLE_METRICS, rows)
    diff_rows = [[n] + [diffs[j][i] for j in range(len(COMPARE_QUANTITIES))]
                 for i, n in enumerate(names)]
    csvio.write_table(out / "compare_differences.csv", ("run",) + COMPARE_QUANTITIES, diff_rows)
    width = max(len(n) for n in names) + 2
    lines = ["run".ljust(width) + "".join(m.rjust(15) for m in TABLE_METRICS)]
    lines += [row[0].ljust(width) + "".join(f"{v:15.6e}" for v in row[1:]) for row in rows]
    text = "\n".join(lines)
    (out / "compare_table.txt").write_text(text + "\n")
    print(text)
    return EXIT_OK


# ------------------------------------------------------------------ entry point

def _parse_set(items):
    out = {}
    for item in items or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigurationError(f"--set expects section.key=value, got {item!r}")
        try:
            out[key.strip()] = tomli.loads(f"v = {value.strip()}")["v"]
        except tomli.TOMLDecodeError:
            out[key.strip()] = value.strip()
    return out


def make_parser():
    parser = argparse.ArgumentParser(prog="lactocryst", description=__doc__.splitlines()[0])
    parser.add_argument("--print-defaults", action="store_true",
                        help="print the default configuration (tabulated constants) and exit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command")
    for name in ("simulate", "optimize", "reconstruct", "validate"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="TOML configuration file")
        p.add_argument("--out", help="output directory")
        p.add_argument("--policy", choices=("constant", "linear", "optimal"))
        p.add_argument("--scenario", choices=("d43", "nucleation", "cv", "seed", "moment-match"))
        p.add_argument("--seed-opt", action="store_true", help="same as --scenario seed")
        p.add_argument("--warm-start", help="solution file used as initial guess / optimal policy")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                       help="override one configuration value (repeatable)")
    p = sub.add_parser("compare")
    p.add_argument("runs", nargs="+", help="run directories")
    p.add_argument("--out", help="output directory")
    return parser


def main(argv=None):
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.print_defaults:
        sys.stdout.write("# kinetics.E_act has no tabulated value; 150000 is a placeholder\n")
        sys.stdout.write(dump_config(default_config()))
        return EXIT_OK
    if not args.command:
        make_parser().print_usage(sys.stderr)
        return EXIT_CONFIG
    try:
        if args.command == "compare":
            out = output_dir(None, "compare", args.out)
            code = cmd_compare(args.runs, out)
            _finish(out, None, "compare", {"runs": [str(r) for r in args.runs]})
            return code
        overrides = _parse_set(args.set)
        if args.policy:
            overrides["policy.kind"] = args.policy
        if args.seed_opt:
            overrides["ocp.scenario"] = "seed"
        elif args.scenario:
            overrides["ocp.scenario"] = args.scenario
        if args.warm_start:
            overrides["ocp.warm_start"] = str(Path(args.warm_start).resolve())
            overrides.setdefault("policy.solution", str(Path(args.warm_start).resolve()))
        cfg = load_config(args.config, overrides)
        out = output_dir(cfg, args.command, args.out)
        command = {"simulate": cmd_simulate, "optimize": cmd_optimize,
                   "reconstruct": cmd_reconstruct, "validate": cmd_validate}[args.command]
        code = command(cfg, out)
        _finish(out, cfg, args.command)
        return code
    except (ConfigurationError, InputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NUMERICAL_ERRORS as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_SIM


if __name__ == "__main__":
    sys.exit(main())
