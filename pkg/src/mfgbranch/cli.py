"""Command-line interface.

Subcommands: predict, solve, continue, experiment. Exit codes: 0 success,
2 configuration error, 3 solver failure, 4 partial experiment failure.
"""

from __future__ import annotations

import argparse
import os
import sys

from .config import build_config, parse_config_file
from .continuation import (
    COLLAPSED,
    DECREASING,
    INCREASING,
    continue_branch,
    seed_branch,
)
from .discretization import Grid, StateVector
from .errors import ConfigError, MFGBranchError
from .experiments import (
    format_predict_table,
    predict_table,
    run_experiment,
    write_branch_csv,
    write_field_csv,
)
from .model import trivial_jacobian
from .solver import newton_solve
from .spectral import bifurcation_times, local_guess

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SOLVER = 3
EXIT_PARTIAL = 4


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="PATH", help="key=value config file")
    p.add_argument("--out", metavar="DIR", help="output directory")
    p.add_argument("--nx", type=int, help="space intervals")
    p.add_argument("--nt", type=int, help="time intervals")
    p.add_argument("--paper-grid", action="store_true",
                   help="use the paper's 400x400 grid")
    p.add_argument("--eps", type=float, help="seed amplitude")
    p.add_argument("--branch", metavar="n[,k]",
                   help="branch label(s), ';'-separated")
    p.add_argument("--t", type=float, help="horizon for a single solve")
    p.add_argument("--t-min", type=float, help="lower horizon bound")
    p.add_argument("--t-max", type=float, help="upper horizon bound")
    p.add_argument("--workers", type=int, help="branch worker pool size")
    p.add_argument("--sigma", type=float, help="diffusion coefficient")
    p.add_argument("--gamma", type=float, help="power-law exponent")
    p.add_argument("--coupling", help="coupling kind")
    p.add_argument("--a", type=float, help="aggregation strength")


def _gather(args: argparse.Namespace, preset: int | None):
    file_values = parse_config_file(args.config) if args.config else {}
    cli_values = dict(
        out=args.out, nx=args.nx, nt=args.nt, eps=args.eps,
        branch=args.branch, t=args.t, t_min=args.t_min, t_max=args.t_max,
        workers=args.workers, sigma=args.sigma, gamma=args.gamma,
        coupling=args.coupling, a=args.a)
    if args.paper_grid:
        cli_values["paper_grid"] = True
    return build_config(preset, file_values, cli_values)


def _predictions(config):
    tj = trivial_jacobian(config.model.coupling)
    kappa = config.model.hamiltonian.curvature(1) or 1.0
    return {(p.n, p.k): p for p in bifurcation_times(
        tj, config.model.sigma, config.n_max, config.k_max, kappa=kappa)}


def cmd_predict(args) -> int:
    config = _gather(args, getattr(args, "experiment_id", None))
    rows = predict_table(config)
    print(format_predict_table(rows))
    return EXIT_OK


def cmd_solve(args) -> int:
    config = _gather(args, getattr(args, "experiment_id", None))
    if config.t is None:
        raise ConfigError("solve needs --t")
    grid = Grid(config.nx, config.nt)
    if config.eps and config.branches:
        bp = _predictions(config).get(config.branches[0])
        if bp is None:
            raise ConfigError(f"no bifurcation point for {config.branches[0]}")
        initial = local_guess(bp, config.eps, grid, config.model, T=config.t)
    else:
        initial = StateVector.trivial(grid, config.t, config.model)
    state, report = newton_solve(initial, config.t, config.model, grid,
                                 config.newton)
    print(f"status={report.status} iterations={report.iterations} "
          f"residual={report.final_residual:.3e} "
          f"deviation={state.max_deviation():.3e}")
    if not report.converged:
        return EXIT_SOLVER
    os.makedirs(config.out_dir, exist_ok=True)
    for name, arr in (("u1", state.u1), ("u2", state.u2),
                      ("m1", state.m1), ("m2", state.m2)):
        write_field_csv(os.path.join(config.out_dir, f"solve_{name}.csv"),
                        arr, name, config.t, grid)
    return EXIT_OK


def cmd_continue(args) -> int:
    config = _gather(args, getattr(args, "experiment_id", None))
    grid = Grid(config.nx, config.nt)
    label = config.branches[0]
    bp = _predictions(config).get(label)
    if bp is None:
        raise ConfigError(f"no bifurcation point for branch {label}")
    try:
        seed = seed_branch(bp, config.eps, config.model, grid,
                           opts=config.newton, policy=config.policy)
    except MFGBranchError as exc:
        print(f"seed failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    t_max = config.t_max if config.t_max is not None \
        else bp.T_star + config.t_limit_offset
    t_min = config.t_min if config.t_min is not None \
        else config.policy.t_floor
    down = continue_branch(seed, DECREASING, t_min, config.model, grid,
                           policy=config.policy, opts=config.newton,
                           label=label)
    up = continue_branch(seed, INCREASING, t_max, config.model, grid,
                         policy=config.policy, opts=config.newton,
                         label=label)
    points = list(reversed(down.points)) + up.points[1:]
    os.makedirs(config.out_dir, exist_ok=True)
    out = os.path.join(config.out_dir,
                       f"branch_n{label[0]}_k{label[1]}.csv")
    write_branch_csv(out, points, sorted(down.folds + up.folds))
    endpoint = down.points[-1].T if down.terminated_by == COLLAPSED else None
    print(f"branch {label}: {len(points)} points, down={down.terminated_by} "
          f"(T={endpoint}), up={up.terminated_by}, "
          f"folds={sorted(down.folds + up.folds)}")
    print(f"wrote {out}")
    return EXIT_OK


def cmd_experiment(args) -> int:
    config = _gather(args, args.experiment_id)
    manifest, code = run_experiment(config)
    for rep in manifest["branches"]:
        line = f"branch n={rep['n']} k={rep['k']}: {rep['status']}"
        if rep["status"] == "OK":
            line += (f" down={rep['terminated_down']} "
                     f"up={rep['terminated_up']} folds={rep['folds']}")
        else:
            line += f" ({rep.get('error')})"
        print(line)
    print(f"manifest: {os.path.join(config.out_dir, 'manifest.json')}")
    return code


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mfgbranch",
        description="Bifurcation prediction and branch continuation for "
                    "two-population mean-field games")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("predict", help="print the bifurcation-time table")
    p.add_argument("experiment_id", nargs="?", type=int,
                   help="optional experiment preset 1..5")
    _add_common(p)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("solve", help="single Newton solve at --t")
    p.add_argument("experiment_id", nargs="?", type=int)
    _add_common(p)
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("continue", help="seed and trace one branch")
    p.add_argument("experiment_id", nargs="?", type=int)
    _add_common(p)
    p.set_defaults(func=cmd_continue)

    p = sub.add_parser("experiment", help="run a full experiment preset")
    p.add_argument("experiment_id", type=int, choices=range(1, 6),
                   metavar="id", help="experiment preset 1..5")
    _add_common(p)
    p.set_defaults(func=cmd_experiment)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MFGBranchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
