"""Command-line entry point: simulate, monitor, estimate, compare, polysolve.

Defaults resolve without any config file.  A JSON file named by the
``GRIDSENSE_CONFIG`` environment variable (or ``--config``) overrides the
built-in defaults, and explicit flags override the file.  Top-level keys
apply to every subcommand; a nested object keyed by the subcommand name
applies to that subcommand only.

Exit codes: 0 success, 1 input error, 2 numerical failure of a required solve.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .chaos import SCALING_REGIONS, AwarenessConfig, AwarenessState, EmbeddingConfig, awareness_step
from .errors import (
    GridSenseError,
    InfeasibleOperatingPointError,
    NumericalError,
    ObservabilityError,
)
from .estimator import SOLVERS, QuadraticSystem
from .measure import (
    FormCatalog,
    WeightPolicy,
    assemble_system,
    check_observable,
    latest_snapshot,
    read_measurements_csv,
)
from .netmodel import VoltageState, load_case
from .quadratize import PolySystem, load_poly, newton_poly, quadratize, solve_poly
from .sim import (
    load_scenario,
    read_ground_truth_csv,
    replica_scenario,
    run_scenario,
    solve_ground_truth,
    voltage_change_metric,
    write_trajectory,
)

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 1, 2


class InputError(GridSenseError):
    """Bad command-line input that is not tied to a specific file format."""


def _dump(obj, path: Path):
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _out_dir(args) -> Path:
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise InputError(f"cannot create output directory {out}: {exc}") from exc
    if not os.access(out, os.W_OK):
        raise InputError(f"output directory {out} is not writable")
    return out


def _finite(x):
    if x is None or (isinstance(x, float) and not math.isfinite(x)):
        return None
    return float(x)


# -- simulate ------------------------------------------------------------------


def cmd_simulate(args) -> int:
    model = load_case(args.case)
    scn = load_scenario(args.scenario, model) if args.scenario else replica_scenario(model)
    traj = run_scenario(scn, seed=args.seed)
    out = _out_dir(args)
    paths = write_trajectory(traj, out)
    manifest = {
        "command": "simulate",
        "case": args.case,
        "seed": args.seed,
        "scenario": scn.to_dict(),
        "files": {k: p.name for k, p in paths.items()},
        "n_samples": int(traj.timestamps.size),
        "n_measurements": len(traj.measurements),
        "version": __version__,
    }
    _dump(manifest, out / "manifest.json")
    print(json.dumps({"out": str(out), "events": manifest["scenario"]["events"]}))
    return EXIT_OK


# -- monitor -------------------------------------------------------------------


def monitor_series(times, values, cfg: AwarenessConfig, cadence_s: float):
    """Run the awareness procedure every ``cadence_s`` seconds; yield report dicts."""
    state = AwarenessState(tau_init=float(times[0]))
    n_steps = int(math.floor((times[-1] - times[0]) / cadence_s + 1e-9))
    for k in range(1, n_steps + 1):
        t = float(times[0] + k * cadence_s)
        state, report, actions = awareness_step(state, times, values, t, cfg)
        if report is None:
            continue
        doc = {"t": t, **report.to_dict(), "phase": state.phase, "period": state.period}
        yield doc


def cmd_monitor(args) -> int:
    model = load_case(args.case)
    if not args.measurements:
        raise InputError("--measurements is required")
    meas = read_measurements_csv(args.measurements, model)
    pts = sorted((m.timestamp, m.value) for m in meas if m.source == "pmu" and m.kind == args.kind and m.index[0] == args.bus)
    if len(pts) < 2:
        raise InputError(f"no PMU {args.kind} series for bus {args.bus}")
    times = np.array([p[0] for p in pts])
    values = np.array([p[1] for p in pts])
    rate = args.sample_rate or float(1.0 / np.median(np.diff(times)))
    cfg = AwarenessConfig(
        embedding=EmbeddingConfig(args.dim, args.delay, args.theiler),
        sample_rate=rate,
        dim_threshold=args.dim_threshold,
        min_window_s=args.min_window,
        max_window_s=args.max_window if args.max_window and args.max_window > 0 else None,
        c_max=args.c_max,
        region=args.region,
    )
    out = _out_dir(args)
    alarms = []
    with open(out / "reports.jsonl", "w") as fh:
        for doc in monitor_series(times, values, cfg, args.cadence):
            fh.write(json.dumps(doc, sort_keys=True) + "\n")
            if doc["alarm"]:
                alarms.append(
                    {"t": doc["t"], "lyapunov": _finite(doc["lyapunov"]), "relevancy_window_s": doc["relevancy_window_s"]}
                )
    summary = {
        "bus": args.bus,
        "kind": args.kind,
        "sample_rate_hz": rate,
        "cadence_s": args.cadence,
        "alarms": alarms,
        "n_alarms": len(alarms),
    }
    _dump(summary, out / "alarms.json")
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


# -- estimate ------------------------------------------------------------------


def cmd_estimate(args) -> int:
    model = load_case(args.case)
    if not args.measurements:
        raise InputError("--measurements is required")
    meas = read_measurements_csv(args.measurements, model)
    truth = read_ground_truth_csv(args.ground_truth) if args.ground_truth else None
    policy = WeightPolicy(lyap=args.lyap, period=args.period, decay=args.decay)
    solver = SOLVERS[args.solver]
    pmu_times = sorted({m.timestamp for m in meas if m.source == "pmu"})
    if not pmu_times:
        pmu_times = sorted({m.timestamp for m in meas})
    pmu_times = pmu_times[:: max(1, args.stride)]
    if args.t_max is not None:
        pmu_times = [t for t in pmu_times if t <= args.t_max]

    v0_truth = truth[1][0] if truth is not None else None
    guess = VoltageState.flat(model.n_buses).vector()
    rows, snaps, failures = [], [], 0
    for t in pmu_times:
        snap = latest_snapshot(meas, t)
        check_observable(snap)
        system = assemble_system(snap, policy)
        rep = solver(system, guess, eps_th=args.eps_th, max_iter=args.max_iter)
        if not np.all(np.isfinite(rep.solution)):
            failures += 1
        else:
            guess = rep.solution
        last_scada = max((m.timestamp for m in snap.measurements if m.source == "scada"), default=None)
        entry = {
            "t": t,
            "since_scada_s": None if last_scada is None else t - last_scada,
            "solver": rep.solver,
            "status": rep.status,
            "converged": bool(rep.converged),
            "iterations": int(rep.iterations),
            "final_residual": _finite(rep.final_residual),
        }
        if truth is not None:
            k = int(np.argmin(np.abs(truth[0] - t)))
            entry["max_abs_error"] = _finite(float(np.max(np.abs(rep.solution - truth[1][k]))))
            entry["metric"] = _finite(voltage_change_metric(rep.solution, v0_truth))
            entry["truth_metric"] = _finite(voltage_change_metric(truth[1][k], v0_truth))
        snaps.append(entry)
        n = model.n_buses
        for j in range(n):
            rows.append((t, j + 1, rep.solution[j], rep.solution[n + j]))

    out = _out_dir(args)
    with open(out / "states.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["timestamp_s", "bus", "vx", "vy"])
        for t, b, vx, vy in rows:
            writer.writerow([repr(float(t)), b, repr(float(vx)), repr(float(vy))])
    report = {
        "command": "estimate",
        "solver": args.solver,
        "eps_th": args.eps_th,
        "max_iter": args.max_iter,
        "policy": {"lyap": policy.lyap, "period": policy.period, "decay": policy.decay},
        "snapshots": snaps,
        "n_converged": sum(s["converged"] for s in snaps),
        "status_counts": {k: sum(s["status"] == k for s in snaps) for k in sorted({s["status"] for s in snaps})},
    }
    _dump(report, out / "report.json")
    print(json.dumps({"snapshots": len(snaps), "status_counts": report["status_counts"]}, sort_keys=True))
    if snaps and failures == len(snaps):
        raise NumericalError("every snapshot solve produced a non-finite state")
    return EXIT_OK


# -- compare -------------------------------------------------------------------


def benchmark_system(model) -> tuple[QuadraticSystem, np.ndarray]:
    """Noiseless full-measurement system at the base operating point."""
    truth = solve_ground_truth(model)
    catalog = FormCatalog(model)
    forms = []
    for j in range(1, model.n_buses + 1):
        forms += [catalog.form(k, j) for k in ("P", "Q", "VM2")]
    for br in model.branches:
        forms += [catalog.form(k, br.from_bus, br.to_bus) for k in ("PF", "QF")]
    for b in (1, 4, 10, 12, 15, 27):
        if b <= model.n_buses:
            forms += [catalog.form(k, b) for k in ("VR", "VI")]
    targets = np.array([f.evaluate(truth) for f in forms])
    return QuadraticSystem.from_forms([f.coeff for f in forms], targets), truth.vector()


def seeded_inits(n_vars: int, count: int, seed: int, scale: float = 0.5) -> list[np.ndarray]:
    """Flat profile plus Gaussian perturbations of standard deviation ``scale``."""
    rng = np.random.default_rng(seed)
    half = n_vars // 2
    flat = np.concatenate([np.ones(half), np.zeros(half)])
    return [flat + scale * rng.standard_normal(n_vars) for _ in range(count)]


def compare_on_system(system, inits, eps_th, max_iter, solvers=("algorithm1", "mals", "als", "newton")):
    runs = []
    for k, v0 in enumerate(inits):
        entry = {"init": k}
        for name in solvers:
            rep = SOLVERS[name](system, v0, eps_th=eps_th, max_iter=max_iter)
            entry[name] = {
                "status": rep.status,
                "converged": bool(rep.converged),
                "final_residual": _finite(rep.final_residual),
                "residual_history": [_finite(r) for r in rep.residual_history],
            }
        runs.append(entry)
    medians = {}
    for name in solvers:
        vals = [r[name]["final_residual"] for r in runs]
        vals = [v if v is not None else math.inf for v in vals]
        medians[name] = _finite(float(np.median(vals)))
    return runs, medians


def cmd_compare(args) -> int:
    out = _out_dir(args)
    if args.poly:
        poly = load_poly(args.poly)
        q = quadratize(poly)
        init = _parse_assignments(args.init, poly.variables)
        z0 = q.lift([init[v] for v in poly.variables])
        runs, medians = compare_on_system(q.system(), [z0], args.eps_th, args.max_iter, ("algorithm1", "mals", "als", "newton"))
        newton = newton_poly(poly, init, eps_th=args.eps_th, max_iter=args.max_iter)
        result = {
            "command": "compare",
            "system": str(args.poly),
            "runs": runs,
            "median_final_residual": medians,
            "newton_original": {
                "status": newton.status,
                "iterates": [[float(x) for x in it] for it in newton.iterates],
                "residual_history": [_finite(r) for r in newton.residual_history],
            },
        }
    else:
        model = load_case(args.case)
        system, truth = benchmark_system(model)
        inits = seeded_inits(system.n_vars, args.n_inits, args.seed, args.init_scale)
        runs, medians = compare_on_system(system, inits, args.eps_th, args.max_iter)
        result = {
            "command": "compare",
            "case": args.case,
            "seed": args.seed,
            "n_inits": args.n_inits,
            "init_scale": args.init_scale,
            "runs": runs,
            "median_final_residual": medians,
        }
    _dump(result, out / "compare.json")
    print(json.dumps({"median_final_residual": result["median_final_residual"]}, sort_keys=True))
    return EXIT_OK


# -- polysolve -----------------------------------------------------------------


def _parse_assignments(items, names=None) -> dict[str, float]:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise InputError(f"expected NAME=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        try:
            out[key.strip()] = float(value)
        except ValueError as exc:
            raise InputError(f"not a number in {item!r}") from exc
    if names is not None:
        missing = [n for n in names if n not in out]
        if missing:
            raise InputError(f"initial values missing for {missing}")
    return out


def cmd_polysolve(args) -> int:
    if args.poly:
        poly = load_poly(args.poly)
    elif args.coeffs:
        poly = PolySystem.univariate([float(c) for c in args.coeffs.split(",")])
    else:
        raise InputError("give --poly FILE or --coeffs c_n,...,c_0")
    init = _parse_assignments(args.init, poly.variables)
    aux = _parse_assignments(args.aux)
    res = solve_poly(poly, init, aux, eps_th=args.eps_th, max_iter=args.max_iter)
    doc = res.to_dict()
    if args.out:
        out = _out_dir(args)
        _dump(doc, out / "polysolve.json")
    print(json.dumps({"root": doc["root"], "status": doc["status"], "iterations": doc["iterations"]}, sort_keys=True))
    return EXIT_OK


# -- argument handling ---------------------------------------------------------


def _load_config(path) -> dict:
    if not path:
        return {}
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as exc:
        raise InputError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise InputError(f"config {path} is not valid JSON: {exc.msg}") from exc
    if not isinstance(doc, dict):
        raise InputError("config file must hold a JSON object")
    return doc


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gridsense", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"gridsense {__version__}")
    parser.add_argument("--config", help="JSON config file (default: $GRIDSENSE_CONFIG)")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--case", default="ieee30", help="case JSON path or bundled name")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", default="out")

    def solve_opts(p):
        p.add_argument("--eps-th", type=float, default=1e-8)
        p.add_argument("--max-iter", type=int, default=50)

    p = sub.add_parser("simulate", help="run a scenario and write measurement/ground-truth CSVs")
    common(p)
    p.add_argument("--scenario", help="scenario JSON (default: the bundled wind-event replica)")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("monitor", help="event detection over one PMU series")
    common(p)
    p.add_argument("--measurements", help="measurement CSV")
    p.add_argument("--bus", type=int, default=12)
    p.add_argument("--kind", choices=("VR", "VI"), default="VI")
    p.add_argument("--cadence", type=float, default=1.0, help="seconds between analysis steps")
    det = AwarenessConfig()
    p.add_argument("--dim", type=int, default=det.embedding.dim)
    p.add_argument("--delay", type=int, default=det.embedding.delay)
    p.add_argument("--theiler", type=int, default=det.embedding.theiler)
    p.add_argument("--dim-threshold", type=float, default=det.dim_threshold)
    p.add_argument("--min-window", type=float, default=det.min_window_s)
    p.add_argument("--max-window", type=float, default=det.max_window_s, help="cap on the analysis window; 0 disables")
    p.add_argument("--c-max", type=float, default=det.c_max, help="upper cut on C(eps) for the scaling fit")
    p.add_argument("--region", choices=SCALING_REGIONS, default=det.region, help="radii used for the slope fit")
    p.add_argument("--sample-rate", type=float, default=None, help="Hz; inferred from timestamps when omitted")
    p.set_defaults(func=cmd_monitor)

    p = sub.add_parser("estimate", help="state estimation over measurement snapshots")
    common(p)
    solve_opts(p)
    p.add_argument("--measurements", help="measurement CSV")
    p.add_argument("--ground-truth", help="ground-truth CSV for error and change metrics")
    p.add_argument("--solver", choices=sorted(SOLVERS), default="algorithm1")
    p.add_argument("--lyap", type=float, default=0.0, help="Lyapunov exponent driving SCADA weight decay")
    p.add_argument("--period", type=int, choices=(1, 2, 3), default=None)
    p.add_argument("--decay", choices=("linear", "inverse_variance"), default="linear")
    p.add_argument("--stride", type=int, default=1, help="estimate every k-th PMU timestamp")
    p.add_argument("--t-max", type=float, default=None)
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("compare", help="residual histories of all solvers from shared initial points")
    common(p)
    solve_opts(p)
    p.add_argument("--n-inits", type=int, default=20)
    p.add_argument("--init-scale", type=float, default=0.5, help="spread of the random starts around the flat profile")
    p.add_argument("--poly", help="compare on a quadratized polynomial system instead")
    p.add_argument("--init", nargs="*", default=[], help="NAME=VALUE initial values for --poly")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("polysolve", help="solve a polynomial system through quadratization")
    p.add_argument("--poly", help="polynomial JSON")
    p.add_argument("--coeffs", help="univariate coefficients, highest power first")
    p.add_argument("--init", nargs="*", default=[], help="NAME=VALUE initial values")
    p.add_argument("--aux", nargs="*", default=[], help="NAME=VALUE auxiliary overrides, e.g. x^2=3.5")
    p.add_argument("--eps-th", type=float, default=1e-12)
    p.add_argument("--max-iter", type=int, default=100)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_polysolve)
    return parser


def _config_path(argv) -> str | None:
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    return known.config or os.environ.get("GRIDSENSE_CONFIG")


def parse_args(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    config = _load_config(_config_path(argv))
    parser = build_parser()
    subparsers = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    for name, sp in subparsers.choices.items():
        shared = {k.replace("-", "_"): v for k, v in config.items() if not isinstance(v, dict)}
        shared.update({k.replace("-", "_"): v for k, v in config.get(name, {}).items()})
        known = {a.dest for a in sp._actions}
        sp.set_defaults(**{k: v for k, v in shared.items() if k in known})
    return parser.parse_args(argv)


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
        return args.func(args)
    except (NumericalError, InfeasibleOperatingPointError) as exc:
        print(f"gridsense: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ObservabilityError as exc:
        print(f"gridsense: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (GridSenseError, OSError, ValueError, KeyError) as exc:
        print(f"gridsense: input error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
