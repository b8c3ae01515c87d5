"""Command-line front end: ``mfglq <command> [options]``.

Exit codes: 0 success, 2 a meaningful negative result (a condition fails
or the solution does not exist), 1 usage or input errors.  Every run
writes ``manifest.json`` next to its outputs.
"""

from __future__ import annotations

import argparse
import csv
import json
import platform
import sys
from importlib import metadata, resources
from pathlib import Path

import numpy as np

from . import __version__
from .model import EMFTCModel, ModelError, TimeGrid, load_model, validate_convexity

EXIT_OK, EXIT_ERROR, EXIT_NEGATIVE = 0, 1, 2
BUILTIN_MODELS = ("scalar", "scalar_emftc", "nash_scalar", "counterexample")
TOL_KEYS = {"rcond": 1e-10, "se": 3.0, "delta": None}


class UsageError(Exception):
    pass


def _resolve_model(spec: str) -> Path:
    if spec in BUILTIN_MODELS:
        return Path(str(resources.files("mfglq") / "models" / f"{spec}.json"))
    return Path(spec)


def _parse_N(text: str) -> list[int]:
    try:
        Ns = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"--N expects a comma list of integers, got {text!r}") from None
    if not Ns or min(Ns) < 2:
        raise argparse.ArgumentTypeError("--N values must be integers >= 2")
    return Ns


def _parse_tol(items) -> dict:
    tol = dict(TOL_KEYS)
    for item in items or []:
        key, sep, val = item.partition("=")
        if not sep or key not in TOL_KEYS:
            raise UsageError(f"--tol expects KEY=VALUE with KEY in {sorted(TOL_KEYS)}, got {item!r}")
        try:
            tol[key] = float(val)
        except ValueError:
            raise UsageError(f"--tol {key} needs a number, got {val!r}") from None
    return tol


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--steps", type=int, default=2000, help="time steps on [0, T] (default 2000)")
    common.add_argument("--seed", type=int, default=0, help="master seed (default 0)")
    common.add_argument("--paths", type=int, default=10000, help="Monte Carlo paths (default 10000)")
    common.add_argument("--out", default="mfglq_out", help="output directory (default mfglq_out)")
    common.add_argument("--tol", action="append", metavar="KEY=VALUE",
                        help="override a tolerance: rcond (shooting, 1e-10), se (MC multiple, 3), "
                             "delta (convexity margin)")

    with_model = argparse.ArgumentParser(add_help=False)
    with_model.add_argument("--model", required=True,
                            help=f"model JSON path or built-in name ({', '.join(BUILTIN_MODELS)})")
    with_model.add_argument("--T", type=float, default=None, help="override the model horizon")

    p = argparse.ArgumentParser(prog="mfglq", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"mfglq {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("check", parents=[common, with_model],
                   help="evaluate the solvability conditions")
    s = sub.add_parser("solve-emfg", parents=[common, with_model],
                       help="mean-field fixed point and equilibrium feedback")
    s.add_argument("--method", choices=("gamma", "shooting"), default="gamma")
    s = sub.add_parser("solve-emftc", parents=[common, with_model],
                       help="optimal control of the mean-field-type problem")
    s.add_argument("--gateaux", type=int, default=0, metavar="K",
                   help="also run the directional optimality test on K directions")
    sub.add_parser("simulate", parents=[common, with_model],
                   help="Monte Carlo of the representative agent against the mean path")
    s = sub.add_parser("nash", parents=[common, with_model], help="N-player convergence experiment")
    s.add_argument("--N", type=_parse_N, default=[4, 16, 64, 256], help="comma list (default 4,16,64,256)")
    s.add_argument("--reps", type=int, default=500, help="game replications per N (default 500)")
    s = sub.add_parser("counterexample", parents=[common], help="scan Phi1, Phi2 over horizons")
    s.add_argument("--tmin", type=float, default=0.29)
    s.add_argument("--tmax", type=float, default=0.32)
    s.add_argument("--points", type=int, default=31)
    s = sub.add_parser("grid", parents=[common], help="power-grid storage example")
    s.add_argument("--params", default=None, help="grid_params.json (defaults: unit scalars, p0 = 0.1, T = 1)")
    s.add_argument("--cohort", type=int, default=100, help="paths sharing one common-noise path")
    return p


# ------------------------------------------------------------- helpers

def _load(args, kind=None):
    path = _resolve_model(args.model)
    model = load_model(path, kind)
    changes = {}
    if args.T is not None:
        changes["T"] = args.T
    if args.tol_values["delta"] is not None:
        changes["delta"] = args.tol_values["delta"]
    if changes:
        model = model.replace(**changes)
    return model


def _grid(args, T):
    if args.steps < 2:
        raise UsageError("--steps must be at least 2")
    return TimeGrid(T, args.steps)


def _write_json(path, data):
    Path(path).write_text(json.dumps(data, indent=2, default=_jsonable) + "\n")


def _jsonable(x):
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    if isinstance(x, np.bool_):
        return bool(x)
    if isinstance(x, np.ndarray):
        return x.tolist()
    raise TypeError(f"not JSON serializable: {type(x).__name__}")


def _write_series(path, times, blocks: dict):
    """CSV of t plus flattened vector series."""
    cols, data = ["t"], [np.asarray(times)]
    for name, arr in blocks.items():
        arr = np.asarray(arr).reshape(len(times), -1)
        for j in range(arr.shape[1]):
            cols.append(f"{name}_{j}")
            data.append(arr[:, j])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for row in zip(*data):
            w.writerow([repr(float(v)) for v in row])


def _versions():
    out = {"mfglq": __version__, "python": platform.python_version(), "numpy": np.__version__}
    try:
        out["scipy"] = metadata.version("scipy")
    except metadata.PackageNotFoundError:
        pass
    return out


# ------------------------------------------------------------ commands

def cmd_check(args, out: Path, info: dict) -> int:
    from .emftc import check_mftc_conditions
    from .spectral import check_global, check_refined, check_small_time, check_weyl, compute_K

    model = _load(args)
    grid = _grid(args, model.T)
    reports = [validate_convexity(model, grid)]
    if isinstance(model, EMFTCModel):
        reports.append(check_mftc_conditions(model, grid))
        decisive = reports[-1].holds
    else:
        reports += [check_small_time(model, grid), check_refined(model, grid),
                    check_global(compute_K(model, grid))]
        decisive = any(r.holds for r in reports[1:])
        reports.append(check_weyl(model, grid))  # gives K1, K2 > 0 only; not decisive
    ok = reports[0].holds and decisive
    for r in reports:
        print(r.table())
    print("solvable (sufficient condition met)" if ok else "no sufficient condition holds")
    _write_json(out / "check.json", {"solvable": ok, "reports": [json.loads(r.to_json()) for r in reports]})
    info["outputs"] = ["check.json"]
    return EXIT_OK if ok else EXIT_NEGATIVE


def cmd_solve_emfg(args, out, info) -> int:
    from .emfg import SolvabilityError, solve_emfg, write_fbode_csv, write_feedback_csv

    model = _load(args, "emfg")
    grid = _grid(args, model.T)
    try:
        sol = solve_emfg(model, grid, args.method, rcond_min=args.tol_values["rcond"])
    except SolvabilityError as exc:
        print(f"no solution: {exc}")
        _write_json(out / "solve.json", {"solved": False, "reason": str(exc)})
        info["outputs"] = ["solve.json"]
        return EXIT_NEGATIVE
    fb = sol.fbode
    write_fbode_csv(out / "fbode.csv", fb)
    write_feedback_csv(out / "feedback.csv", sol.feedback)
    summary = {"solved": True, "method": fb.method, "terminal_residual": fb.terminal_residual,
               "rcond": fb.rcond, "xi_T": fb.xi[-1], "eta_0": fb.eta[0]}
    _write_json(out / "solve.json", summary)
    print(f"method {fb.method}: terminal residual {fb.terminal_residual:.3e}")
    info["outputs"] = ["fbode.csv", "feedback.csv", "solve.json"]
    return EXIT_OK


def cmd_solve_emftc(args, out, info) -> int:
    from .emftc import RiccatiBlowUp, check_mftc_conditions, gateaux_test, solve_mftc, write_mftc_csv

    model = _load(args, "emftc")
    grid = _grid(args, model.T)
    report = check_mftc_conditions(model, grid)
    print(report.table())
    try:
        sol = solve_mftc(model, grid)
    except RiccatiBlowUp as exc:
        print(f"no solution: {exc}")
        _write_json(out / "solve.json", {"solved": False, "reason": str(exc),
                                         "conditions": json.loads(report.to_json())})
        info["outputs"] = ["solve.json"]
        return EXIT_NEGATIVE
    write_mftc_csv(out / "mftc.csv", sol)
    info["outputs"] = ["mftc.csv", "solve.json"]
    summary = {"solved": True, "conditions": json.loads(report.to_json()), "xbar_T": sol.xbar[-1]}
    code = EXIT_OK
    if args.gateaux:
        g = gateaux_test(model, sol, n_directions=args.gateaux, n_paths=args.paths, seed=args.seed)
        g.write_json(out / "gateaux.json")
        info["outputs"].append("gateaux.json")
        summary["gateaux_holds"] = g.holds
        print(f"directional optimality test: {'passes' if g.holds else 'FAILS'}")
        code = EXIT_OK if g.holds else EXIT_NEGATIVE
    _write_json(out / "solve.json", summary)
    return code


def cmd_simulate(args, out, info) -> int:
    model = _load(args)
    grid = _grid(args, model.T)
    if isinstance(model, EMFTCModel):
        from .emftc import RiccatiBlowUp, simulate_mftc, solve_mftc
        try:
            sol = solve_mftc(model, grid)
        except RiccatiBlowUp as exc:
            print(f"no solution: {exc}")
            return EXIT_NEGATIVE
        res, ref = simulate_mftc(model, sol, args.paths, args.seed), sol.xbar
    else:
        from .emfg import SolvabilityError, simulate_representative, solve_emfg
        try:
            sol = solve_emfg(model, grid, rcond_min=args.tol_values["rcond"])
        except SolvabilityError as exc:
            print(f"no solution: {exc}")
            return EXIT_NEGATIVE
        res = simulate_representative(model, sol.feedback, sol.fbode, args.paths, args.seed)
        ref = sol.fbode.xi
    _write_series(out / "simulate.csv", res.times, {"mean": res.mean, "std_err": res.std_err, "ref": ref})
    limit = args.tol_values["se"]
    ok = res.max_error_ratio <= limit
    _write_json(out / "simulate.json", {"n_paths": res.n_paths, "seed": res.seed,
                                        "fixed_point_residual": res.fixed_point_residual,
                                        "max_error_ratio": res.max_error_ratio,
                                        "limit": limit, "within_limit": ok})
    print(f"sup |MC mean - mean path| = {res.fixed_point_residual:.3e} "
          f"({res.max_error_ratio:.2f} std errors, limit {limit:g})")
    info["outputs"] = ["simulate.csv", "simulate.json"]
    return EXIT_OK if ok else EXIT_NEGATIVE


def cmd_nash(args, out, info) -> int:
    from .emfg import SolvabilityError, solve_emfg
    from .nash import NashExperiment, epsilon_nash_estimate

    model = _load(args, "emfg")
    grid = _grid(args, model.T)
    try:
        sol = solve_emfg(model, grid, rcond_min=args.tol_values["rcond"])
    except SolvabilityError as exc:
        print(f"no solution: {exc}")
        return EXIT_NEGATIVE
    rep = epsilon_nash_estimate(model, sol.feedback, sol.fbode,
                                NashExperiment(args.N, n_mc=args.reps, seed=args.seed), grid)
    rep.write(out / "nash.csv", out / "nash.json")
    print(f"{'N':>6} {'state err':>12} {'gap':>12} {'exact gap':>12} {'bound':>12}")
    for r in rep.rows:
        print(f"{r.N:>6} {r.state_err:12.4e} {r.gap:12.4e} {r.gap_exact:12.4e} {r.gap_bound:12.4e}")
    print(f"slopes: state {rep.state_slope:.3f}, gap {rep.gap_slope:.3f}, exact gap {rep.exact_gap_slope:.3f}")
    info["outputs"] = ["nash.csv", "nash.json"]
    return EXIT_OK if rep.gaps_within_bound else EXIT_NEGATIVE


def cmd_counterexample(args, out, info) -> int:
    from .emfg import counterexample_root, counterexample_scan

    if args.points < 2 or not 0 < args.tmin < args.tmax:
        raise UsageError("need 0 < --tmin < --tmax and --points >= 2")
    scan = counterexample_scan(args.tmin, args.tmax, args.points, args.steps)
    scan.write_csv(out / "scan.csv")
    changes = scan.sign_changes("phi1")
    summary = {"phi1_sign_changes": changes, "phi2_sign_changes": scan.sign_changes("phi2")}
    if changes:
        summary["T0"] = counterexample_root(*changes[0], grid_steps=args.steps)
        print(f"Phi1 changes sign at T0 = {summary['T0']:.6f}")
    else:
        print("Phi1 has no sign change in the scanned range")
    _write_json(out / "counterexample.json", summary)
    info["outputs"] = ["scan.csv", "counterexample.json"]
    return EXIT_OK


def cmd_grid(args, out, info) -> int:
    from .grid import GridBlowUp, GridParams, simulate_grid, solve_grid_coefficients

    params = GridParams.load(args.params) if args.params else GridParams()
    params.save(out / "grid_params.json")
    grid = _grid(args, params.T)
    try:
        co = solve_grid_coefficients(params, grid)
    except GridBlowUp as exc:
        print(f"no solution: {exc}")
        return EXIT_NEGATIVE
    co.write_csv(out / "grid_coeffs.csv")
    if args.cohort < 1 or args.paths % args.cohort:
        raise UsageError("--paths must be a positive multiple of --cohort")
    paths = simulate_grid(params, co, args.paths, args.seed, args.cohort)
    paths.write_csv(out / "grid_paths.csv")
    check = paths.cohort_check()
    _write_json(out / "grid.json", {"residuals": co.residuals, "cohort_check": check})
    print(f"coefficient residual {max(co.residuals.values()):.2e}; "
          f"cohort means within 3 std errors: {check['within_3se']}")
    info["outputs"] = ["grid_params.json", "grid_coeffs.csv", "grid_paths.csv", "grid.json"]
    return EXIT_OK


COMMANDS = {
    "check": cmd_check, "solve-emfg": cmd_solve_emfg, "solve-emftc": cmd_solve_emftc,
    "simulate": cmd_simulate, "nash": cmd_nash, "counterexample": cmd_counterexample,
    "grid": cmd_grid,
}


def run(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_ERROR
    try:
        args.tol_values = _parse_tol(args.tol)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        info = {"command": args.command, "argv": argv,
                "config": {k: v for k, v in vars(args).items() if k not in ("tol_values",)},
                "tolerances": args.tol_values, "seed": args.seed, "versions": _versions()}
        if getattr(args, "model", None):
            path = _resolve_model(args.model)
            if path.exists():
                info["model"] = json.loads(path.read_text())
        code = COMMANDS[args.command](args, out, info)
        info["exit_code"] = code
        _write_json(out / "manifest.json", info)
        return code
    except (UsageError, ModelError, FileNotFoundError, ValueError, np.linalg.LinAlgError) as exc:
        print(f"mfglq {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_ERROR


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
