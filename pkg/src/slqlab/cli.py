"""Command-line front end.

Subcommands: validate, solve-ode, solve-pde, solve-tree, simulate, evaluate,
verify, compare. Every run writes its artifacts atomically into ``--out``
together with a ``manifest.json`` listing the command, the resolution
parameters and every produced file; re-running with the same manifest
parameters reproduces the outputs byte for byte (thread count included,
since all reductions run in a fixed chunk order).

Exit codes: 0 success / all assertions pass, 1 assertion failure,
2 configuration error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .bsre_pde import default_w_max, solve_field, stability_steps
from .csvio import write_text_atomic
from .errors import SlqError
from .evaluator import (VerificationReport, estimate_cost_mc, verify_completion_of_squares,
                        verify_dpp, verify_quadratic_laws, verify_value_match)
from .model import ProblemInstance, load_instance, validate
from .oracle_dp import TreeMode, solve_tree
from .riccati_ode import solve_backward
from .sde_sim import FeedbackPolicy, OpenLoopPolicy, SimConfig, ZeroPolicy, simulate

EXIT_OK = 0
EXIT_ASSERTION = 1
EXIT_CONFIG = 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="slqlab",
        description="solvers and verifiers for stochastic linear-quadratic control",
    )
    parser.add_argument("--version", action="version", version=f"slqlab {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_mc=False):
        p.add_argument("--config", required=True, help="instance JSON file")
        p.add_argument("--out", default="./out", help="output directory")
        p.add_argument("--steps", type=int, default=None, help="time steps")
        p.add_argument("--threads", type=int, default=os.cpu_count() or 1)
        if needs_mc:
            p.add_argument("--seed", type=int, default=0)
            p.add_argument("--paths", type=int, default=10000)

    common(sub.add_parser("validate", help="check the standing assumptions"))
    common(sub.add_parser("solve-ode", help="backward Riccati ODE (deterministic coefficients)"))

    p = sub.add_parser("solve-pde", help="lifted Riccati field (d = 1)")
    common(p)
    p.add_argument("--space-nodes", type=int, default=201)
    p.add_argument("--wmax", type=float, default=None)

    p = sub.add_parser("solve-tree", help="binomial tree oracle")
    common(p)
    p.add_argument("--tree-mode", choices=[m.value for m in TreeMode],
                   default=TreeMode.RECOMBINING.value)

    p = sub.add_parser("simulate", help="simulate the controlled state")
    common(p, needs_mc=True)
    p.add_argument("--policy", default="zero")

    p = sub.add_parser("evaluate", help="Monte Carlo cost estimate")
    common(p, needs_mc=True)
    p.add_argument("--policy", default="feedback")

    p = sub.add_parser("verify", help="run the full identity-verification suite")
    common(p, needs_mc=True)
    p.add_argument("--space-nodes", type=int, default=201)
    p.add_argument("--wmax", type=float, default=None)

    p = sub.add_parser("compare", help="solver-vs-oracle convergence table")
    common(p)
    p.add_argument("--space-nodes", type=int, default=201)
    p.add_argument("--wmax", type=float, default=None)
    return parser


class _Run:
    """Collects output files and writes the manifest at the end."""

    def __init__(self, args):
        self.args = args
        self.out = Path(args.out)
        self.outputs: list[str] = []
        self.started = time.perf_counter()

    def emit(self, path: Path):
        self.outputs.append(path.name)
        return path

    def write_json(self, name: str, payload: dict) -> Path:
        path = self.out / name
        write_text_atomic(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")
        return self.emit(path)

    def finish(self):
        ns = vars(self.args)
        manifest = {
            "command": self.args.command,
            "config": str(self.args.config),
            "seed": ns.get("seed"),
            "parameters": {
                k: ns.get(k)
                for k in ("steps", "paths", "space_nodes", "wmax", "policy", "threads")
                if k in ns
            },
            "out": str(self.out),
            "outputs": sorted(self.outputs),
            "version": __version__,
            "wall_clock_seconds": round(time.perf_counter() - self.started, 3),
        }
        write_text_atomic(self.out / "manifest.json",
                          json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _parse_policy(text: str, steps: int, instance: ProblemInstance, riccati_factory):
    if text == "zero":
        return ZeroPolicy()
    if text == "feedback":
        return FeedbackPolicy(riccati_factory())
    if text.startswith("const:"):
        vals = np.array([float(v) for v in text[len("const:"):].split(",")])
        if vals.shape != (instance.spec.dims.m,):
            raise SlqError(f"const policy needs {instance.spec.dims.m} components")
        return OpenLoopPolicy.constant(vals, steps)
    if text.startswith("file:"):
        grid = np.loadtxt(text[len("file:"):], delimiter=",", ndmin=2)
        return OpenLoopPolicy(grid)
    raise SlqError(f"unknown policy {text!r} (use zero|feedback|const:<v>|file:<path>)")


def _solve_riccati(instance: ProblemInstance, args):
    """ODE for deterministic specs, lifted field otherwise."""
    spec = instance.spec
    if spec.is_deterministic:
        return solve_backward(spec, args.steps or 1000)
    nodes = getattr(args, "space_nodes", 201)
    wmax = getattr(args, "wmax", None) or default_w_max(spec.T)
    steps = args.steps or stability_steps(spec.T, nodes, wmax)
    return solve_field(spec, steps, nodes, wmax)


# ---------------------------------------------------------------------------
# subcommand bodies
# ---------------------------------------------------------------------------

def _cmd_validate(instance, args, run):
    report = validate(instance.spec)
    print(report)
    run.write_json("validation.json", {
        "ok": report.ok,
        "violations": [
            {"code": v.code, "message": v.message, "t": v.t, "w": v.w}
            for v in report.violations
        ],
    })
    run.finish()
    return EXIT_OK if report.ok else EXIT_CONFIG


def _cmd_solve_ode(instance, args, run):
    path = solve_backward(instance.spec, args.steps or 1000)
    run.emit(path.to_csv(run.out / "riccati_path.csv"))
    x0 = instance.x0
    print(f"K(0) quadratic form at x0: {float(x0 @ path.K0() @ x0)!r}")
    run.finish()
    return EXIT_OK


def _cmd_solve_pde(instance, args, run):
    spec = instance.spec
    wmax = args.wmax or default_w_max(spec.T)
    steps = args.steps or stability_steps(spec.T, args.space_nodes, wmax)
    field = solve_field(spec, steps, args.space_nodes, wmax)
    run.emit(field.to_csv(run.out / "riccati_field.csv"))
    print(f"kappa(0, 0) trace: {float(np.trace(field.K00()))!r}  (steps={steps})")
    run.finish()
    return EXIT_OK


def _cmd_solve_tree(instance, args, run):
    tree = solve_tree(instance.spec, args.steps or 200, TreeMode(args.tree_mode))
    run.emit(tree.to_csv(run.out / "tree_summary.csv"))
    print(f"tree root value at x0: {tree.root_value(instance.x0)!r}")
    run.finish()
    return EXIT_OK


def _cmd_simulate(instance, args, run):
    steps = args.steps or 1000
    policy = _parse_policy(args.policy, steps, instance,
                           lambda: _solve_riccati(instance, args))
    config = SimConfig(steps=steps, paths=args.paths, seed=args.seed, x0=instance.x0)
    batch = simulate(instance.spec, config, policy)
    run.emit(batch.to_csv(run.out / "trajectories.csv"))
    run.emit(batch.summary_csv(run.out / "trajectory_summary.csv"))
    run.finish()
    return EXIT_OK


def _cmd_evaluate(instance, args, run):
    steps = args.steps or 1000
    policy = _parse_policy(args.policy, steps, instance,
                           lambda: _solve_riccati(instance, args))
    config = SimConfig(steps=steps, paths=args.paths, seed=args.seed, x0=instance.x0)
    est = estimate_cost_mc(instance.spec, config, policy, threads=args.threads)
    payload = {"mean": est.mean, "stderr": est.stderr, "paths": est.paths,
               "terminal_part": est.terminal_part, "running_part": est.running_part}
    run.write_json("cost_estimate.json", payload)
    print(json.dumps(payload, sort_keys=True))
    run.finish()
    return EXIT_OK


def _cmd_verify(instance, args, run):
    spec = instance.spec
    steps = args.steps or 1000
    riccati = _solve_riccati(instance, args)
    config = SimConfig(steps=steps, paths=args.paths, seed=args.seed, x0=instance.x0)
    threads = args.threads
    cb = instance.c_bias

    report = verify_value_match(spec, riccati, config, cb, threads=threads)
    fb_cost = estimate_cost_mc(spec, config, FeedbackPolicy(riccati), threads=threads)

    controls = {
        "u_zero": ZeroPolicy(),
        "u_const_1": OpenLoopPolicy.constant(np.ones(spec.dims.m), steps),
        "u_double_gain": FeedbackPolicy(riccati, scale=2.0),
    }
    for label, policy in controls.items():
        report = report.extend(verify_completion_of_squares(
            spec, riccati, policy, config, cb, threads=threads,
            label=f"completion_{label}",
        ))

    report = report.extend(verify_dpp(
        spec, riccati, config, FeedbackPolicy(riccati), is_optimal=True,
        c_bias=cb, threads=threads, label="dpp_feedback",
    ))
    report = report.extend(verify_dpp(
        spec, riccati, config, ZeroPolicy(), is_optimal=False,
        c_bias=cb, optimal_cost=fb_cost, threads=threads, label="dpp_zero",
    ))

    x = instance.x0
    y = np.roll(x, 1) * 0.5 + 0.25 if spec.dims.n > 1 else x * 0.5
    report = report.extend(verify_quadratic_laws(
        spec, riccati, config, x, y, c=2.0, threads=threads,
    ))

    print(report.table())
    run.write_json("verify_report.json", report.to_dict())
    run.finish()
    return EXIT_OK if report.passed else EXIT_ASSERTION


def _cmd_compare(instance, args, run):
    from .csvio import write_csv_atomic

    spec = instance.spec
    x0 = instance.x0
    if spec.is_deterministic:
        solver = solve_backward(spec, 4000)
        solver_val = float(x0 @ solver.K0() @ x0)
        solver_name = "ode"
    else:
        wmax = args.wmax or default_w_max(spec.T)
        field = solve_field(spec, stability_steps(spec.T, args.space_nodes, wmax),
                            args.space_nodes, wmax)
        solver_val = float(x0 @ field.K00() @ x0)
        solver_name = "pde"
    ladder = [25, 50, 100, 200] if args.steps is None else \
        [max(2, args.steps // 8), max(2, args.steps // 4), max(2, args.steps // 2), args.steps]
    rows = []
    for S in ladder:
        tree = solve_tree(spec, S)
        tv = tree.root_value(x0)
        rows.append([S, solver_name, solver_val, tv, abs(solver_val - tv)])
    run.emit(write_csv_atomic(run.out / "convergence.csv",
                              ["tree_steps", "solver", "solver_value", "tree_value", "abs_gap"],
                              rows))
    for row in rows:
        print(f"tree_steps={row[0]:>5d}  solver={row[2]!r}  tree={row[3]!r}  gap={row[4]!r}")
    run.finish()
    gaps = [r[4] for r in rows]
    return EXIT_OK if all(g2 <= g1 for g1, g2 in zip(gaps, gaps[1:])) else EXIT_ASSERTION


_COMMANDS = {
    "validate": _cmd_validate,
    "solve-ode": _cmd_solve_ode,
    "solve-pde": _cmd_solve_pde,
    "solve-tree": _cmd_solve_tree,
    "simulate": _cmd_simulate,
    "evaluate": _cmd_evaluate,
    "verify": _cmd_verify,
    "compare": _cmd_compare,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        instance = load_instance(args.config)
    except SlqError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    run = _Run(args)
    try:
        return _COMMANDS[args.command](instance, args, run)
    except SlqError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
