"""Command-line entry point: ``secure-dmpc run | compare | verify``."""

from __future__ import annotations

import argparse
import logging
import sys
import time

import numpy as np

from .closed_loop import SimulationAborted
from .scenario import MODES, ConfigError, load_config, run_scenario

EXIT_OK, EXIT_VERIFY, EXIT_CONFIG, EXIT_SOLVER, EXIT_IO = 0, 1, 2, 3, 4


def _load(args):
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "steps", None) is not None:
        overrides["n_steps"] = args.steps
    return load_config(args.config, **overrides)


def cmd_run(args) -> int:
    from .report import emit_report

    cfg = _load(args)
    baseline = None
    if args.mode != "nominal":
        _, baseline = run_scenario(cfg, "nominal")
    trace, report = run_scenario(cfg, args.mode, baseline=baseline, defense=not args.no_defense)
    paths = emit_report(trace, report, args.out, baseline=baseline)
    print(paths[2].read_text(), end="")
    for k, who, msg in trace.warnings:
        print(f"warning: step {k} {who}: {msg}", file=sys.stderr)
    print(f"wrote {', '.join(str(p) for p in paths)}")
    return EXIT_OK


def cmd_compare(args) -> int:
    from .report import emit_report, format_summary
    from pathlib import Path

    cfg = _load(args)
    reports = {}
    for mode in MODES:
        trace, rep = run_scenario(cfg, mode, baseline=reports.get("nominal"))
        reports[mode] = rep
        emit_report(trace, rep, Path(args.out) / mode, baseline=reports["nominal"] if mode != "nominal" else None)
    text = format_summary(reports)
    (Path(args.out) / "summary.txt").write_text(text)
    print(text, end="")
    return EXIT_OK


def _check(name, ok, detail=""):
    print(f"[{'PASS' if ok else 'FAIL'}] {name}{': ' + detail if detail else ''}")
    return bool(ok)


def cmd_verify(args) -> int:
    """Invariant checks on a short horizon of the configured scenario."""
    from .coordinator import solve_centralized
    from .scenario import build_setup

    cfg = _load(args)
    if args.steps is None:
        cfg = cfg.model_copy(update={"n_steps": min(cfg.n_steps, 5)})
    ok = True
    t0 = time.perf_counter()
    trace, rep = run_scenario(cfg, "nominal")
    elapsed = time.perf_counter() - t0
    ok &= _check("negotiation converged", trace.converged.all(), f"max {trace.iterations.max()} iterations")
    budget = trace.u[:, :, 0].sum(axis=1).max()
    ok &= _check("budget respected", budget <= cfg.budget + 1e-9, f"max total input {budget:.12g}")
    ok &= _check("duals nonnegative", trace.duals.min() >= -1e-12, f"min {trace.duals.min():.3e}")
    theta_sum = trace.theta.sum(axis=1).max()
    ok &= _check("allocations feasible", trace.theta.min() >= -1e-12 and theta_sum <= cfg.budget + 1e-12)
    flagged = int(trace.flag.sum())
    ok &= _check("no detections without attack", flagged == 0, f"max E {np.nanmax(trace.e_val):.3e}")
    setup = build_setup(cfg, "nominal")
    worst = 0.0
    for k in range(trace.n_steps):
        probs = [a.problem(x) for a, x in zip(setup.agents, trace.x[k])]
        us = solve_centralized(probs)
        j_c = sum(0.5 * u @ p.h @ u + p.f @ u for u, p in zip(us, probs))
        j_d = sum(0.5 * u @ p.h @ u + p.f @ u for u, p in zip(trace.u_plan[k], probs))
        worst = max(worst, abs(j_d - j_c) / max(abs(j_c), 1e-300))
    ok &= _check("distributed matches centralized", worst <= 1e-4, f"worst relative gap {worst:.3e}")
    ok &= _check("report consistency", abs(rep.total - rep.per_agent.sum()) <= 1e-9 * abs(rep.total))
    again, _ = run_scenario(cfg, "nominal")
    ok &= _check("deterministic", np.array_equal(again.u, trace.u) and np.array_equal(again.theta, trace.theta))
    print(f"{trace.n_steps} steps in {elapsed:.2f} s")
    return EXIT_OK if ok else EXIT_VERIFY


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="secure-dmpc", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="simulate one scenario and write trace/objectives/summary")
    run.add_argument("--config", default=None, help="scenario YAML (default: bundled benchmark)")
    run.add_argument("--mode", choices=MODES, default="nominal")
    run.add_argument("--out", required=True)
    run.add_argument("--seed", type=int, default=None)
    run.add_argument("--steps", type=int, default=None, help="override n_steps")
    run.add_argument("--no-defense", action="store_true", help="monitor only, never repair duals")
    run.set_defaults(func=cmd_run)

    cmp_ = sub.add_parser("compare", help="run all three modes and tabulate objectives")
    cmp_.add_argument("--config", default=None)
    cmp_.add_argument("--out", required=True)
    cmp_.add_argument("--seed", type=int, default=None)
    cmp_.add_argument("--steps", type=int, default=None)
    cmp_.set_defaults(func=cmd_compare)

    ver = sub.add_parser("verify", help="check invariants on a short horizon")
    ver.add_argument("--config", default=None)
    ver.add_argument("--steps", type=int, default=None)
    ver.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SimulationAborted as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
