"""Command-line interface: ``sbsvie {solve,study,audit,paths,list}``.

Exit codes: 0 converged / ok, 2 diverged or not converged, 3 assumption
failure, 64 usage or configuration error.
"""

from __future__ import annotations

import argparse
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from ._io import write_csv, write_json
from .config import ConfigError, RunConfig, load_config_file
from .picard import (
    AssumptionError,
    DivergedError,
    PicardSolver,
    audit_iterate_bounds,
    check_assumptions,
    compute_constants,
    phi_sequences,
)
from .scenarios import Scenario, get_scenario, list_scenarios
from .stochastic import y_row_energy

EXIT_OK, EXIT_DIVERGED, EXIT_ASSUMPTION, EXIT_USAGE = 0, 2, 3, 64
WORKERS = 1


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _add_run_flags(p: argparse.ArgumentParser):
    p.add_argument("--scenario", default="mittag_leffler_lambda0.1")
    p.add_argument("--config", help="key = value file; flags override it")
    p.add_argument("--alpha", type=float)
    p.add_argument("--T", type=float)
    p.add_argument("--n", type=int)
    p.add_argument("--d", type=int)
    p.add_argument("--lambda", dest="lam", help="one value or a comma list of length d")
    p.add_argument("--paths", dest="M", type=int)
    p.add_argument("--grid", dest="N", type=int)
    p.add_argument("--grading", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--degree", type=int)
    p.add_argument("--max-iter", dest="max_iter", type=int)
    p.add_argument("--tol", type=float)
    p.add_argument("--inner-max", dest="inner_max", type=int)
    p.add_argument("--inner-tol", dest="inner_tol", type=float)
    p.add_argument("--stepping", choices=("auto", "off"))
    p.add_argument("--out", dest="output_dir")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sbsvie", description="Singular BSVIE solver")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("solve", help="run the Picard solver on a scenario")
    _add_run_flags(p)
    p.add_argument("--export-paths", action="store_true", help="also write paths.csv")

    p = sub.add_parser("study", help="convergence table over a parameter sweep")
    _add_run_flags(p)
    p.add_argument("--sweep", required=True, help="N=16,32,64 or M=... or alpha=...")
    p.add_argument("--timing", action="store_true", help="add a wall-clock column (not reproducible)")

    p = sub.add_parser("audit", help="assumption checks, constants and comparison sequences")
    _add_run_flags(p)
    p.add_argument("--phi-terms", type=int, default=10)

    p = sub.add_parser("paths", help="simulate and export Wiener increments")
    _add_run_flags(p)

    p = sub.add_parser("list", help="list shipped scenarios")
    p.add_argument("--tag")
    return parser


def resolve_config(args, env=None) -> RunConfig:
    env = os.environ if env is None else env
    values = {}
    if getattr(args, "config", None):
        values.update(load_config_file(args.config))
    flags = {k: getattr(args, k, None) for k in (
        "alpha", "T", "n", "d", "M", "N", "grading", "seed", "degree", "max_iter", "tol",
        "inner_max", "inner_tol", "stepping", "output_dir")}
    if getattr(args, "lam", None) is not None:
        try:
            flags["lam"] = tuple(float(v) for v in args.lam.split(","))
        except ValueError:
            raise ConfigError(f"bad --lambda value {args.lam!r}") from None
    if flags["seed"] is None and "seed" not in values and env.get("SBSVIE_SEED"):
        try:
            flags["seed"] = int(env["SBSVIE_SEED"])
        except ValueError:
            raise ConfigError(f"SBSVIE_SEED must be an integer, got {env['SBSVIE_SEED']!r}") from None
    values.update({k: v for k, v in flags.items() if v is not None})
    if "d" in values and "lam" not in values:
        values["lam"] = (1.0,)
    try:
        return RunConfig(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def _scenario(args) -> Scenario:
    try:
        return get_scenario(args.scenario)
    except KeyError as exc:
        raise UsageError(exc.args[0]) from None


def _solution_rows(x, y, grid):
    xv = x.values
    energy = y_row_energy(y, grid).mean(axis=0)
    mean, sd = xv.mean(axis=0), xv.std(axis=0)
    for i, t in enumerate(grid.nodes):
        yield (i, t, *mean[i], *sd[i], energy[i])


def _oracle_error(scenario: Scenario, cfg: RunConfig, x, ensemble):
    if scenario.closed_form is None:
        return None
    ref = scenario.closed_form(cfg, ensemble)
    if "x0" in ref:
        return float(abs(x.values[:, 0].mean() - ref["x0"]))
    return float(np.sqrt(np.mean((x.values - ref["x"]) ** 2)))


def _fit(scenario: Scenario, cfg: RunConfig, check: bool = True):
    problem = scenario.problem(cfg)
    ensemble = scenario.ensemble(cfg)
    solver = PicardSolver(cfg.degree, cfg.max_iter, cfg.tol, cfg.inner_max, cfg.inner_tol,
                          stepping=cfg.stepping, check=check)
    solver.fit(problem, ensemble)
    return problem, ensemble, solver


def cmd_solve(args) -> int:
    cfg = resolve_config(args)
    scenario = _scenario(args)
    out = Path(cfg.output_dir)
    problem = scenario.problem(cfg)
    ensemble = scenario.ensemble(cfg)
    report = check_assumptions(problem, ensemble)
    header = {"scenario": scenario.name, "config": cfg.to_dict(), "workers": WORKERS}
    if args.export_paths:
        ensemble.export_csv(out / "paths.csv")
    if not report.ok:
        write_json(out / "audit.json", {**header, "status": "assumption_failure",
                                        "assumptions": report.to_dict()})
        print(f"assumption check failed: {', '.join(report.failures())}", file=sys.stderr)
        return EXIT_ASSUMPTION
    solver = PicardSolver(cfg.degree, cfg.max_iter, cfg.tol, cfg.inner_max, cfg.inner_tol,
                          stepping=cfg.stepping, check=False)
    try:
        solver.fit(problem, ensemble)
    except AssumptionError as exc:
        write_json(out / "audit.json", {**header, "status": "assumption_failure", "error": str(exc),
                                        "assumptions": report.to_dict()})
        print(str(exc), file=sys.stderr)
        return EXIT_ASSUMPTION
    except DivergedError as exc:
        write_json(out / "audit.json", {**header, "status": "diverged", "error": str(exc),
                                        "assumptions": report.to_dict()})
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED

    grid = ensemble.grid
    n = solver.x_.values.shape[2]
    cols = ["i", "t", *[f"x_mean_{k}" for k in range(n)], *[f"x_sd_{k}" for k in range(n)], "y_energy"]
    write_csv(out / "solution.csv", cols, _solution_rows(solver.x_, solver.y_, grid))
    trace_rows = [(w, *row) for w, tr in enumerate(solver.traces_) for row in tr.to_rows()]
    write_csv(out / "trace.csv", ("window", "j", "m_norm_diff", "sup_x_sq", "y_mass",
                                  "inner_iterations", "residual"), trace_rows)
    write_json(out / "trace.json", {**header, "windows": [tr.to_dict() for tr in solver.traces_]})
    residual = solver.residual(problem, ensemble)
    block = solver.constants_
    last = solver.traces_[-1]
    bounds = audit_iterate_bounds(last, block, float(grid.nodes[last.t_index]), grid)
    phi = phi_sequences(block, problem.modulus, grid, max(1, len(last)))
    status = "converged" if solver.converged_ else "not_converged"
    write_json(out / "audit.json", {
        **header,
        "status": status,
        "assumptions": report.to_dict(),
        "constants": block.to_dict(),
        "windows": len(solver.windows_),
        "residual": residual,
        "oracle_error": _oracle_error(scenario, cfg, solver.x_, ensemble),
        "x0_mean": solver.x_.values[:, 0].mean(axis=0).tolist(),
        "iterate_bounds": {"violations": bounds["violations"], "pairs_checked": bounds["pairs_checked"],
                           "bounds": bounds["bounds"]},
        "phi": phi.to_dict(),
    })
    print(f"{scenario.name}: {status}, windows={len(solver.windows_)}, residual={residual:.3e}")
    return EXIT_OK if solver.converged_ else EXIT_DIVERGED


SWEEPABLE = {"N": int, "M": int, "alpha": float}


def parse_sweep(text: str):
    if "=" not in text:
        raise UsageError("sweep must look like N=16,32,64")
    key, values = (part.strip() for part in text.split("=", 1))
    if key not in SWEEPABLE:
        raise UsageError(f"cannot sweep {key!r}; choose one of {sorted(SWEEPABLE)}")
    items = [v for v in values.replace(" ", "").split(",") if v]
    if not items:
        raise UsageError("empty sweep")
    try:
        return key, [SWEEPABLE[key](float(v)) if key != "alpha" else float(v) for v in items]
    except ValueError:
        raise UsageError(f"bad sweep values {values!r}") from None


def cmd_study(args) -> int:
    cfg = resolve_config(args)
    scenario = _scenario(args)
    key, values = parse_sweep(args.sweep)
    rows = []
    status = EXIT_OK
    for value in values:
        point = cfg.with_overrides(**{key: value})
        start = time.perf_counter()
        try:
            problem, ensemble, solver = _fit(scenario, point)
        except AssumptionError as exc:
            print(f"{key}={value}: {exc}", file=sys.stderr)
            return EXIT_ASSUMPTION
        except DivergedError as exc:
            print(f"{key}={value}: diverged: {exc}", file=sys.stderr)
            return EXIT_DIVERGED
        elapsed = time.perf_counter() - start
        residual = solver.residual(problem, ensemble)
        error = _oracle_error(scenario, point, solver.x_, ensemble)
        row = [value, residual if error is None else error, residual, solver.n_iter_]
        if args.timing:
            row.append(elapsed)
        rows.append(row)
        if not solver.converged_:
            status = EXIT_DIVERGED
        del solver
    header = [key, "error", "residual", "iterations"] + (["runtime_s"] if args.timing else [])
    write_csv(Path(cfg.output_dir) / "study.csv", header, rows)
    for row in rows:
        print(",".join(str(v) for v in row))
    return status


def cmd_audit(args) -> int:
    cfg = resolve_config(args)
    scenario = _scenario(args)
    problem = scenario.problem(cfg)
    ensemble = scenario.ensemble(cfg)
    report = check_assumptions(problem, ensemble)
    payload = {"scenario": scenario.name, "config": cfg.to_dict(), "workers": WORKERS,
               "assumptions": report.to_dict()}
    code = EXIT_OK
    try:
        block = compute_constants(problem, 0.0, ensemble)
        payload["constants"] = block.to_dict()
        payload["phi"] = phi_sequences(block, problem.modulus, ensemble.grid, args.phi_terms).to_dict()
    except AssumptionError as exc:
        payload["error"] = str(exc)
        code = EXIT_ASSUMPTION
    if not report.ok:
        code = EXIT_ASSUMPTION
    write_json(Path(cfg.output_dir) / "audit.json", payload)
    print(f"{scenario.name}: assumptions {'ok' if report.ok else 'FAILED: ' + ', '.join(report.failures())}")
    return code


def cmd_paths(args) -> int:
    cfg = resolve_config(args)
    scenario = _scenario(args)
    ensemble = scenario.ensemble(cfg)
    path = ensemble.export_csv(Path(cfg.output_dir) / "paths.csv")
    print(path)
    return EXIT_OK


def cmd_list(args) -> int:
    for s in list_scenarios(args.tag):
        print(f"{s.name}\t{','.join(s.tags)}")
    return EXIT_OK


COMMANDS = {"solve": cmd_solve, "study": cmd_study, "audit": cmd_audit, "paths": cmd_paths,
            "list": cmd_list}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, UsageError) as exc:
        print(f"sbsvie: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
