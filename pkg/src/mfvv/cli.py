"""Command-line front end.

Exit codes: 0 success, 1 configuration or usage error, 2 assumption failure
(``validate``), 3 solver failure, 4 trend or floor verdict failure.
"""
from __future__ import annotations

import argparse
import contextlib
import json
import os
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from .config import RunConfig, load_config
from .exceptions import ConfigError, MfvvError, NoConvergence, RejectedSpec
from .fbsde import RegressionConfig, bound_checks, solve_fbsde
from .forward import TimeGrid, dump_paths
from .lab import _json_default, evaluate_cost, run_counterexample, run_sweep
from .problem import admissibility_gap, constants, validate_spec

EXIT_OK, EXIT_CONFIG, EXIT_ASSUMPTION, EXIT_SOLVER, EXIT_VERDICT = 0, 1, 2, 3, 4


def _global_flags(suppress):
    p = argparse.ArgumentParser(add_help=False)
    d = argparse.SUPPRESS if suppress else None
    p.add_argument("--config", default=d, help="run configuration (JSON)")
    p.add_argument("--output", default=d, help="output directory, overrides the config")
    p.add_argument("--threads", type=int, default=d, help="worker threads")
    p.add_argument("--quiet", action="store_true", default=argparse.SUPPRESS if suppress else False)
    return p


def _solver_flags():
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--n-particles", type=int)
    p.add_argument("--n-steps", type=int)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--continuation", choices=["on", "off"])
    p.add_argument("--tol", type=float)
    p.add_argument("--max-picard", type=int)
    p.add_argument("--basis-degree", type=int)
    p.add_argument("--dump-every", type=int)
    return p


def build_parser():
    parser = argparse.ArgumentParser(prog="mfvv", parents=[_global_flags(False)],
                                     description="Viscous mean-field control solver.")
    sub = parser.add_subparsers(dest="command", required=True)
    g, s = _global_flags(True), _solver_flags()
    sub.add_parser("validate", parents=[g], help="check a problem's assumptions")
    sub.add_parser("sweep", parents=[g, s], help="vanishing-viscosity sweep")
    sub.add_parser("counterexample", parents=[g, s], help="flat control-cost counterexample")
    sub.add_parser("solve", parents=[g, s], help="single-viscosity solve")
    return parser


def _apply_overrides(cfg: RunConfig, args):
    env = os.environ.get("MFVV_SEED")
    if env is not None:
        try:
            cfg.seed = int(env)
        except ValueError as exc:
            raise ConfigError(f"MFVV_SEED must be an integer, got {env!r}") from exc
    for flag, attr in (("n_particles", "n_particles"), ("n_steps", "n_steps"),
                       ("seed", "seed"), ("dump_every", "dump_every")):
        v = getattr(args, flag, None)
        if v is not None:
            setattr(cfg, attr, v)
    for flag in ("tol", "max_picard", "basis_degree", "continuation"):
        v = getattr(args, flag, None)
        if v is not None:
            setattr(cfg.solver, flag, v)
    if args.output:
        cfg.output_dir = args.output
    if cfg.n_particles <= 0 or cfg.n_steps <= 0 or cfg.seed < 0 or cfg.dump_every < 0:
        raise ConfigError("particle count and step count must be positive, seed and dump_every nonnegative")
    s = cfg.solver
    if not s.tol > 0 or s.max_picard <= 0 or s.basis_degree <= 0:
        raise ConfigError("tol, max_picard and basis_degree must be positive")
    return cfg


def _output_dir(cfg):
    out = Path(cfg.output_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {out}: {exc}") from exc
    return out


def _say(args, msg):
    if not args.quiet:
        print(msg, file=sys.stderr)


def _constants_block(spec):
    c = constants(spec)
    lines = [f"{k} = {c[k]!r}" for k in ("C1", "C2", "C3", "C4", "Lambda")]
    lines.append(f"admissibility gap (lambda - Lambda) = {admissibility_gap(spec)!r}")
    return c, lines


def cmd_validate(cfg, args):
    spec = cfg.build_spec()
    report = validate_spec(spec, seed=cfg.seed)
    _, lines = _constants_block(spec)
    print(f"scenario: {spec.name}")
    print("\n".join(lines))
    for name, chk in report.checks.items():
        status = "pass" if chk.passed else "FAIL"
        print(f"[{status}] {name}: worst={chk.worst!r} {chk.detail}")
    if admissibility_gap(spec) <= 0:
        print("note: lambda <= Lambda, uniqueness of the optimal control is not guaranteed")
    if not report.passed:
        for name in report.failed():
            print(f"{name} violated")
        return EXIT_ASSUMPTION
    return EXIT_OK


def cmd_sweep(cfg, args):
    spec = cfg.build_spec()
    out = _output_dir(cfg)
    grid = TimeGrid(spec.horizon, cfg.n_steps)
    workers = max(int(args.threads or 1), 1)
    report = run_sweep(spec, grid, cfg.n_particles, cfg.eps_ladder, cfg.seed, workers=workers,
                       progress=lambda m: _say(args, m), **cfg.solver_kwargs())
    report.write(out)
    if cfg.dump_every:
        for e, paths in report.paths.items():
            dump_paths(paths, out / "dumps" / f"eps_{e!r}", cfg.dump_every)
    for r in report.records:
        print(f"epsilon={r.epsilon!r} cost={r.cost:.6g} sup_w2={r.sup_w2:.4g} "
              f"gap={r.control_l2_gap:.3g} lip={r.control_lip:.4g} iters={r.picard_iters} "
              f"converged={r.converged}")
    for k, v in report.verdicts.items():
        print(f"verdict {k}: {'pass' if v else 'FAIL'}")
    return report.exit_code()


def cmd_counterexample(cfg, args):
    spec = cfg.build_spec()
    if spec.dim != 1:
        raise ConfigError("the counterexample requires a one-dimensional problem")
    out = _output_dir(cfg)
    grid = TimeGrid(spec.horizon, cfg.n_steps)
    ladder = cfg.eps_ladder if args.epsilon is None else [args.epsilon]
    report = run_counterexample(grid, cfg.n_particles, ladder, cfg.seed, spec=spec)
    report.write(out)
    for r in report.records:
        print(f"epsilon={r.epsilon!r} cost={r.cost!r} D={r.distance_to_branches:.4f} "
              f"symmetry={r.symmetry_w1:.3g} (bound {r.symmetry_bound:.3g})")
    if report.statistically_insufficient:
        print("warning: particle count too small for a reliable verdict")
    print(f"floor {report.floor!r}: {'holds' if report.floor_holds else 'FAILS'}")
    return report.exit_code()


def cmd_solve(cfg, args):
    spec = cfg.build_spec()
    out = _output_dir(cfg)
    grid = TimeGrid(spec.horizon, cfg.n_steps)
    eps = cfg.eps_ladder[0] if args.epsilon is None else args.epsilon
    if not 0 <= eps <= 1:
        raise ConfigError("epsilon must lie in [0, 1]")
    s = cfg.solver
    try:
        state = solve_fbsde(spec, grid, cfg.n_particles, eps, cfg.seed, continuation=s.continuation,
                            tol=s.tol, max_picard=s.max_picard, damping=s.damping,
                            regression=RegressionConfig(degree=s.basis_degree))
        converged = True
    except NoConvergence as exc:
        state, converged = exc.state, False
    cost, std = evaluate_cost(spec, state.forward, state.controls, return_std=True)
    c, lines = _constants_block(spec)
    report = {
        "scenario": spec.name, "epsilon": eps, "seed": cfg.seed, "n_steps": cfg.n_steps,
        "n_particles": cfg.n_particles, "converged": converged, "iterations": len(state.history),
        "residual_history": [float(h) for h in state.history], "cost": cost, "cost_std": std,
        "constants": c, "admissibility_gap": admissibility_gap(spec),
        "bound_checks": bound_checks(spec, state), "continuation": state.rungs,
        "ridge_fallbacks": state.ridge_fallbacks,
    }
    (out / "solve.json").write_text(json.dumps(report, indent=2, sort_keys=True,
                                               default=_json_default) + "\n")
    if cfg.dump_every:
        dump_paths(state.forward, out / "dumps", cfg.dump_every)
    print("\n".join(lines))
    print(f"epsilon={eps!r} converged={converged} iterations={len(state.history)} cost={cost:.6g}")
    return EXIT_OK if converged else EXIT_SOLVER


_COMMANDS = {"validate": cmd_validate, "sweep": cmd_sweep,
             "counterexample": cmd_counterexample, "solve": cmd_solve}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    for name, default in (("config", None), ("output", None), ("threads", None), ("quiet", False),
                          ("epsilon", None)):
        if not hasattr(args, name):
            setattr(args, name, default)
    if args.config is None:
        print("error: --config is required", file=sys.stderr)
        return EXIT_CONFIG
    if args.threads is not None and args.threads <= 0:
        print("error: --threads must be positive", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = _apply_overrides(load_config(args.config), args)
        if args.command == "validate":
            # a spec the builder itself rejects is a parse problem, not an assumption failure
            cfg.build_spec()
        limits = threadpool_limits(1) if (args.threads or 1) > 1 else contextlib.nullcontext()
        with limits:
            return _COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except RejectedSpec as exc:
        print(f"{exc.assumption} violated: {exc}", file=sys.stderr)
        return EXIT_ASSUMPTION
    except MfvvError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
