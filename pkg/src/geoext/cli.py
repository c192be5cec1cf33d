"""Command-line front door: classify, check, integrate, sweep.

Exit codes: 0 success/pass, 2 invalid input (parse/validation/unknown
parameter), 3 residual or classification failure, 4 integration failure.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import json
import logging
import os
import sys

import numpy as np

from . import report
from .chaplygin import build_structure, classify
from .dynamics import (IntegrateOptions, State, integrate_geodesic,
                       integrate_nonholonomic, trajectory_csv)
from .errors import (CompletionError, ConfigError, GeoextError,
                     IntegrationError, ParseError)
from .extensions import (Candidate, carriage_scan_ansatz, complete_metric,
                         grid_residual_report, pregeodesic_residual,
                         scan_preserving_extension)
from .systems import BUILTIN_NAMES, builtin, load_system

log = logging.getLogger("geoext")

_LOG_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING,
               "info": logging.INFO, "debug": logging.DEBUG}


def _setup_logging():
    level = os.environ.get("GEOEXT_LOG", "warn").lower()
    logging.basicConfig(level=_LOG_LEVELS.get(level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def _parse_param(text):
    if "=" not in text:
        raise ConfigError("bad_value", f"--param needs K=V, got {text!r}")
    key, val = text.split("=", 1)
    try:
        return key, float(val)
    except ValueError:
        return key, val


def _load_from_args(args):
    params = dict(_parse_param(p) for p in (args.param or []))
    if args.builtin:
        return builtin(args.builtin, **params)
    if args.config:
        system = load_system(args.config)
        if params:
            raise ConfigError("bad_value",
                              "--param overrides are builtin-only; edit the "
                              "config [params] table instead")
        return system
    raise ConfigError("bad_value", "need --builtin NAME or --config PATH")


def _emit(args, filename, text):
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        path = os.path.join(args.out, filename)
        with open(path, "w") as fh:
            fh.write(text if text.endswith("\n") else text + "\n")
        log.info("wrote %s", path)
    else:
        sys.stdout.write(text if text.endswith("\n") else text + "\n")


def _add_common(p):
    p.add_argument("--builtin", choices=BUILTIN_NAMES)
    p.add_argument("--config")
    p.add_argument("--param", action="append", metavar="K=V")
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--grid", type=int, default=None,
                   help="points per axis for sample grids")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=os.cpu_count() or 1)
    p.add_argument("--out", help="output directory (default: stdout)")
    fmt = p.add_mutually_exclusive_group()
    fmt.add_argument("--json", action="store_true", default=True)
    fmt.add_argument("--markdown", action="store_true")


def build_parser():
    ap = argparse.ArgumentParser(prog="geoext")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("classify", help="hierarchy classification")
    _add_common(p)
    p.add_argument("--recover-f", action="store_true")

    p = sub.add_parser("check", help="verify a candidate extension")
    _add_common(p)
    p.add_argument("--gbar", action="append", metavar="a,i=EXPR",
                   help="mixed-block entry, e.g. --gbar 'x,z=-y'")
    p.add_argument("--F", default="0", help="conformal exponent expression")
    p.add_argument("--scan", choices=["beta"],
                   help="scan the built-in one-parameter family instead")
    p.add_argument("--t-end", type=float, default=2.0)

    p = sub.add_parser("integrate", help="integrate dynamics to CSV")
    _add_common(p)
    p.add_argument("--what", choices=["nh", "geodesic", "reduced"],
                   default="nh")
    p.add_argument("--q0", required=True, help="comma-separated coordinates")
    p.add_argument("--v0", required=True, help="comma-separated velocities")
    p.add_argument("--t-end", type=float, default=1.0)
    p.add_argument("--dt", type=float, default=1e-3)
    p.add_argument("--method", choices=["rk4", "rk45"], default="rk4")
    p.add_argument("--metric", help="completed-metric JSON from `check`")

    p = sub.add_parser("sweep", help="residual vs parameter curve")
    _add_common(p)
    p.add_argument("--param-name", required=True)
    p.add_argument("--range", help="start:stop:step")
    p.add_argument("--values", help="comma-separated values")
    p.add_argument("--check", choices=["f0scan", "classify"],
                   default="f0scan")

    return ap


# ------------------------------------------------------------------ commands

def _system_block(args, system):
    block = {"name": system.name,
             "params": {k: v for k, v in sorted(system.params.items())}}
    if args.config:
        block["config"] = args.config
    return block


def cmd_classify(args):
    system = _load_from_args(args)
    structure = build_structure(system)
    rep = classify(structure, tol=args.tol,
                   points_per_axis=args.grid, recover=args.recover_f)
    if args.markdown:
        _emit(args, "classify.md", rep.to_markdown())
    else:
        payload = rep.to_json_dict()
        payload["system"] = _system_block(args, system)
        _emit(args, "classify.json", report.dumps(payload))
    return 0 if rep.level != "NONE" else 3


def cmd_check(args):
    system = _load_from_args(args)
    rng = np.random.default_rng(args.seed)
    if args.scan == "beta":
        if system.name != "carriage":
            raise ConfigError("bad_value",
                              "--scan beta is defined for the carriage")
        res = scan_preserving_extension(
            system, carriage_scan_ansatz(system), np.linspace(-3.0, 3.0, 13))
        payload = {
            "schema": 1,
            "mode": "scan",
            "system": _system_block(args, system),
            "best_beta": res.best_beta,
            "max_abs": res.best_residual,
            "tolerance": args.tol,
            "pass": res.best_residual <= args.tol,
            "curve": [[b, r] for b, r in res.curve],
        }
        _emit(args, "scan.json", report.dumps(payload))
        return 0 if res.best_residual <= args.tol else 3

    entries = {}
    for item in args.gbar or []:
        if "=" not in item or "," not in item.split("=", 1)[0]:
            raise ConfigError("bad_value",
                              f"--gbar needs 'a,i=EXPR', got {item!r}")
        slot, text = item.split("=", 1)
        a_name, i_name = (s.strip() for s in slot.split(",", 1))
        entries[(a_name, i_name)] = text
    cand = Candidate.from_expressions(system, entries, F_text=args.F,
                                      label="cli")
    grid = system.grid(args.grid) if args.grid else None
    repA = grid_residual_report(system, cand, "A", grid=grid, tol=args.tol)
    repB = grid_residual_report(system, cand, "B", grid=grid, tol=args.tol)
    payload = {"schema": 1, "mode": "check", "tolerance": args.tol,
               "system": _system_block(args, system),
               "A_prime": repA.to_json_dict(), "B_prime": repB.to_json_dict()}
    ok = repA.passed and repB.passed
    violated = [nm for nm, rp in (("A'", repA), ("B'", repB))
                if not rp.passed]
    if ok:
        try:
            ghat, info = complete_metric(system, cand, grid=grid)
            payload["completion"] = {"s": info.s, "pass": True}
            worst = _pregeodesic_check(system, ghat, cand, rng,
                                       args.t_end, args.tol)
            payload["pregeodesic"] = {"max_abs": worst, "tolerance": args.tol,
                                      "pass": worst <= args.tol}
            ok = worst <= args.tol
            if not ok:
                violated.append("pregeodesic")
        except CompletionError as e:
            payload["completion"] = {
                "pass": False,
                "worst_eigenvalue": e.worst_eigenvalue,
            }
            ok = False
            violated.append("completion")
    payload["pass"] = ok
    payload["violated"] = violated
    _emit(args, "check.json", report.dumps(payload))
    if ok and args.out and getattr(cand, "gbar_exprs", None) is not None:
        _emit(args, "completed.json", report.dumps(_completed_payload(
            args, system, cand, payload["completion"]["s"])))
    return 0 if ok else 3


def _completed_payload(args, system, cand, s):
    from . import expr as ex
    from .extensions import _frame_slot_names
    d_names, p_names = _frame_slot_names(system)
    gbar = {}
    for a, row in enumerate(cand.gbar_exprs):
        for i, e in enumerate(row):
            text = ex.pretty(e)
            if text != "0":
                gbar[f"{d_names[a]},{p_names[i]}"] = text
    return {
        "schema": 1,
        "system": {"builtin": args.builtin, "config": args.config,
                   "params": dict(_parse_param(p) for p in (args.param or []))},
        "candidate": {"gbar": gbar,
                      "F": ex.pretty(cand.F_expr) if cand.F_expr else "0"},
        "s": s,
    }


def _pregeodesic_check(system, ghat, cand, rng, t_end, tol):
    lows, highs = system.domain.lows, system.domain.highs
    q0 = 0.5 * (lows + highs) + 0.1 * (highs - lows) * rng.uniform(
        -1, 1, system.n)
    v0 = rng.uniform(-1, 1, system.m)
    traj = integrate_nonholonomic(system, State(q0, v0), t_end,
                                  IntegrateOptions(method="rk45"))
    worst = 0.0
    for s in traj.states[:: max(1, len(traj.states) // 40)]:
        ra, ri = pregeodesic_residual(system, ghat, cand.F, s)
        worst = max(worst, float(np.max(np.abs(ra))),
                    float(np.max(np.abs(ri))))
    return worst


def cmd_integrate(args):
    system = _load_from_args(args)
    q0 = np.array([float(x) for x in args.q0.split(",")])
    v0 = np.array([float(x) for x in args.v0.split(",")])
    opts = IntegrateOptions(method=args.method, dt=args.dt)
    try:
        if args.what == "nh":
            if v0.size != system.m:
                raise ConfigError("bad_value",
                                  f"nh needs {system.m} velocity components")
            traj = integrate_nonholonomic(system, State(q0, v0),
                                          args.t_end, opts)
            csv = trajectory_csv(traj, system)
        elif args.what == "geodesic":
            metric, frame = system.metric, system.frame
            if args.metric:
                with open(args.metric) as fh:
                    saved = json.load(fh)
                cand = Candidate.from_expressions(
                    system,
                    {tuple(k.split(",")): v
                     for k, v in saved["candidate"]["gbar"].items()},
                    F_text=saved["candidate"]["F"])
                metric, _ = complete_metric(system, cand)
            v = np.zeros(system.n)
            v[: v0.size] = v0
            m = system.m
            traj = integrate_geodesic(
                metric, frame, State(q0, v), args.t_end, opts,
                extra_monitors={
                    "constraint_viol":
                        lambda s: float(np.max(np.abs(s.v[m:])))})
            csv = trajectory_csv(traj, system)
        else:  # reduced
            structure = build_structure(system)
            from .chaplygin import reduced_field
            m = structure.m

            def fieldfn(s):
                return s.v, reduced_field(structure, s.q, s.v)

            from .dynamics import integrate
            traj = integrate(fieldfn, State(q0, v0), args.t_end, opts,
                             monitors={
                                 "energy": lambda s: 0.5 * float(
                                     s.v @ structure.reduced_metric(s.q)
                                     @ s.v),
                                 "constraint_viol": lambda s: 0.0,
                             })
            csv = _reduced_csv(traj, structure)
    except IntegrationError as e:
        log.error("integration failed: %s", e)
        return 4
    _emit(args, "trajectory.csv", csv)
    return 0


def _reduced_csv(traj, structure):
    names = list(structure.reduced_coords)
    m = structure.m
    header = (["t"] + names + [f"v{i + 1}" for i in range(m)]
              + ["E", "constraint_viol"])
    lines = [",".join(header)]
    for idx, (t, s) in enumerate(zip(traj.times, traj.states)):
        row = ([f"{t:.17g}"] + [f"{x:.17g}" for x in s.q]
               + [f"{x:.17g}" for x in s.v]
               + [f"{traj.monitors['energy'][idx]:.17g}", "0"])
        lines.append(",".join(row))
    return "\n".join(lines) + "\n"


def _sweep_values(args):
    if args.values:
        vals = [float(x) for x in args.values.split(",") if x.strip()]
    elif args.range:
        parts = args.range.split(":")
        if len(parts) != 3:
            raise ConfigError("bad_value", "--range needs start:stop:step")
        start, stop, step = map(float, parts)
        if step <= 0 or stop < start:
            vals = []
        else:
            count = int(np.floor((stop - start) / step + 1e-9)) + 1
            vals = [start + i * step for i in range(count)]
    else:
        raise ConfigError("bad_value", "sweep needs --range or --values")
    if not vals:
        raise ConfigError("bad_value", "empty sweep range")
    return vals


def cmd_sweep(args):
    if not args.builtin:
        raise ConfigError("bad_value", "sweep currently drives built-ins")
    base_params = dict(_parse_param(p) for p in (args.param or []))
    probe = builtin(args.builtin, **base_params)
    if args.param_name not in probe.params:
        raise ConfigError("bad_value",
                          f"unknown parameter {args.param_name!r}; "
                          f"declared: {sorted(probe.params)}")
    vals = _sweep_values(args)

    def work(v):
        params = dict(base_params)
        params[args.param_name] = v
        system = builtin(args.builtin, **params)
        if args.check == "f0scan":
            res = scan_preserving_extension(
                system, carriage_scan_ansatz(system),
                np.linspace(-3.0, 3.0, 13))
            return v, res.best_residual
        rep = classify(build_structure(system), tol=args.tol,
                       points_per_axis=args.grid)
        return v, rep.level

    rows = [None] * len(vals)
    with concurrent.futures.ThreadPoolExecutor(max_workers=args.jobs) as pool:
        futures = {pool.submit(work, v): i for i, v in enumerate(vals)}
        for fut in concurrent.futures.as_completed(futures):
            rows[futures[fut]] = fut.result()
    lines = [f"{args.param_name},result"]
    for v, r in rows:
        r_text = f"{r:.17g}" if isinstance(r, float) else str(r)
        lines.append(f"{v:.17g},{r_text}")
    _emit(args, "sweep.csv", "\n".join(lines) + "\n")
    return 0


def main(argv=None):
    _setup_logging()
    args = build_parser().parse_args(argv)
    handlers = {"classify": cmd_classify, "check": cmd_check,
                "integrate": cmd_integrate, "sweep": cmd_sweep}
    try:
        return handlers[args.command](args)
    except (ConfigError, ParseError) as e:
        log.error("%s", e)
        print(f"error: {e}", file=sys.stderr)
        return 2
    except IntegrationError as e:
        print(f"integration error: {e}", file=sys.stderr)
        return 4
    except GeoextError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
