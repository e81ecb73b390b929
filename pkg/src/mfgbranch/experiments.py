"""Experiment drivers: predictions table, branch runs, and data emission.

Outputs per experiment run (all plain data; plotting is external):

* ``branch_n{n}_k{k}.csv`` -- one row per branch point in trace order
  (decreasing trace reversed, then the increasing trace), columns
  T, sup_norm_m1, sup_norm_m2, newton_iters, fold_flag.
* ``field_n{n}_k{k}_{tag}_{name}.csv`` -- space-time dumps of one field at
  the collapse-adjacent point (tag ``nearbif``) and at the trace end
  (tag ``tmax``); first line is the header ``Nx,Nt,T,field``, then one row
  per time level.
* ``manifest.json`` -- model parameters, predicted bifurcation points,
  per-branch termination/folds/oscillation counts, file inventory; written
  once at the end with stable key ordering.
"""

from __future__ import annotations

import json
import os
import traceback
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .config import RunConfig
from .continuation import (
    COLLAPSED,
    DECREASING,
    INCREASING,
    Branch,
    continue_branch,
    make_branch_point,
    oscillation_count,
    seed_branch,
)
from .discretization import Grid, mass_vector
from .errors import MFGBranchError, NoNegativeEigenvalue
from .model import HamiltonianSpec, ModelSpec, trivial_jacobian
from .solver import newton_solve
from .spectral import bifurcation_times

FMT = "%.17g"


def _fmt(x) -> str:
    return FMT % float(x)


def predict_table(config: RunConfig) -> list[dict]:
    """Rows (n, k, T* continuous, T* discrete(h), omega, tau, resonant)."""
    tj = trivial_jacobian(config.model.coupling)
    kappa = config.model.hamiltonian.curvature(1)
    if kappa is None:
        raise NoNegativeEigenvalue(
            "non-quadratic Hamiltonian: the linearized system is degenerate "
            "and carries no bifurcation predictions")
    sigma = config.model.sigma
    cont = bifurcation_times(tj, sigma, config.n_max, config.k_max,
                             kappa=kappa)
    disc = bifurcation_times(tj, sigma, config.n_max, config.k_max,
                             h=1.0 / config.nx, kappa=kappa)
    disc_map = {(p.n, p.k): p.T_star for p in disc}
    rows = []
    for p in cont:
        rows.append(dict(n=p.n, k=p.k, T_star=p.T_star,
                         T_star_discrete=disc_map[(p.n, p.k)],
                         omega=p.omega, tau=p.tau, resonant=p.resonant))
    return rows


def format_predict_table(rows: list[dict]) -> str:
    header = f"{'n':>3} {'k':>3} {'T*':>20} {'T*_disc':>20} {'omega':>18} {'tau':>18}  res"
    lines = [header]
    for r in rows:
        lines.append(
            f"{r['n']:>3} {r['k']:>3} {r['T_star']:>20.15f} "
            f"{r['T_star_discrete']:>20.15f} {r['omega']:>18.12f} "
            f"{r['tau']:>18.12f}  {'R' if r['resonant'] else '-'}")
    return "\n".join(lines)


def write_branch_csv(path: str, points, fold_ts) -> None:
    fold_ts = list(fold_ts)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("T,sup_norm_m1,sup_norm_m2,newton_iters,fold_flag\n")
        for p in points:
            flag = int(any(abs(p.T - ft) < 1e-14 for ft in fold_ts))
            fh.write(",".join([_fmt(p.T), _fmt(p.sup_norm_m1),
                               _fmt(p.sup_norm_m2), str(p.newton_iters),
                               str(flag)]) + "\n")


def write_field_csv(path: str, field: np.ndarray, name: str, T: float,
                    grid: Grid) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"{grid.nx},{grid.nt},{_fmt(T)},{name}\n")
        for row in field:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def _merge_traces(down: Branch | None, up: Branch | None) -> list:
    """Single trace-ordered point list: collapse end first, then upward."""
    points = []
    if down is not None:
        points.extend(reversed(down.points))
    if up is not None:
        start = 1 if points and up.points and up.points[0] is points[-1] else 0
        points.extend(up.points[start:])
    return points


def _field_dumps(out_dir, label, tag, point, grid):
    n, k = label
    files = []
    for name, arr in (("u1", point.state.u1), ("u2", point.state.u2),
                      ("m1", point.state.m1), ("m2", point.state.m2)):
        fname = f"field_n{n}_k{k}_{tag}_{name}.csv"
        write_field_csv(os.path.join(out_dir, fname), arr, name, point.T, grid)
        files.append(fname)
    return files


def _near_collapse_point(down: Branch | None, fallback):
    """Last point of the decreasing trace still above the collapse threshold."""
    if down is None or not down.points:
        return fallback
    for p in reversed(down.points):
        if p.deviation > 1e-4:
            return p
    return down.points[-1]


def run_branch(config: RunConfig, bp, grid: Grid) -> dict:
    """Trace one labelled branch both ways and emit its files."""
    model = config.model
    label = (bp.n, bp.k)
    t_limit = bp.T_star + config.t_limit_offset

    if config.experiment == 3 or model.hamiltonian.kind == "PowerLaw":
        seed = _powerlaw_seed(config, bp, grid)
    else:
        seed = seed_branch(bp, config.eps, model, grid,
                           opts=config.newton, policy=config.policy)
    down = continue_branch(seed, DECREASING, config.policy.t_floor, model,
                           grid, policy=config.policy, opts=config.newton,
                           label=label)
    up = continue_branch(seed, INCREASING, t_limit, model, grid,
                         policy=config.policy, opts=config.newton,
                         label=label)

    points = _merge_traces(down, up)
    folds = sorted(down.folds + up.folds)
    n, k = label
    branch_file = f"branch_n{n}_k{k}.csv"
    write_branch_csv(os.path.join(config.out_dir, branch_file), points, folds)

    near = _near_collapse_point(down, seed)
    top = max(points, key=lambda p: p.T)
    files = [branch_file]
    files += _field_dumps(config.out_dir, label, "nearbif", near, grid)
    files += _field_dumps(config.out_dir, label, "tmax", top, grid)

    drift = float(np.max(np.abs(mass_vector(top.state, grid) - 1.0)))
    return dict(
        n=n, k=k, status="OK", files=files,
        T_star=bp.T_star,
        seed_T=seed.T,
        terminated_down=down.terminated_by, terminated_up=up.terminated_by,
        collapse_T=down.collapse_T if down.terminated_by == COLLAPSED else None,
        folds=folds,
        oscillations_near_bifurcation=oscillation_count(near),
        oscillations_at_tmax=oscillation_count(top),
        max_sup_norm_m1=max(p.sup_norm_m1 for p in points),
        max_sup_norm_m2=max(p.sup_norm_m2 for p in points),
        mass_drift_at_tmax=drift,
    )


def _powerlaw_seed(config: RunConfig, bp, grid: Grid):
    """Warm-start the non-quadratic model from a quadratic branch solution.

    The gamma != 2 system has no usable linearization at the trivial state,
    so a quadratic solution at a horizon away from its bifurcation times is
    continued first and then re-solved under the power-law Hamiltonian.
    """
    model = config.model
    quad = ModelSpec(coupling=model.coupling,
                     hamiltonian=HamiltonianSpec.quadratic(),
                     sigma=model.sigma)
    seed_q = seed_branch(bp, config.eps, quad, grid, opts=config.newton,
                         policy=config.policy)
    t_target = max(config.warmstart_t, seed_q.T)
    up_q = continue_branch(seed_q, INCREASING, t_target, quad, grid,
                           policy=config.policy, opts=config.newton)
    start = up_q.points[-1]
    state, report = newton_solve(start.state, start.T, model, grid,
                                 config.newton)
    if not report.converged or state.max_deviation() <= config.policy.collapse_tol:
        raise MFGBranchError(
            f"power-law warmstart failed at T={start.T:.4f} "
            f"(status {report.status})")
    return make_branch_point(state, start.T, grid, report.iterations)


def _model_summary(model: ModelSpec) -> dict:
    c, h = model.coupling, model.hamiltonian
    out = dict(coupling=c.kind, hamiltonian=h.kind, sigma=model.sigma)
    if c.kind == "LinearAggregation":
        out.update(a=c.a, M=c.M)
    elif c.kind == "Schelling":
        out.update(K1=c.K1, K2=c.K2, alpha1=c.alpha1, alpha2=c.alpha2,
                   eta=c.eta)
    else:
        out.update(A=[list(map(float, row)) for row in c.A])
    if h.kind == "Quadratic":
        out.update(kappa1=h.kappa1, kappa2=h.kappa2)
    else:
        out.update(gamma=h.gamma)
    return out


def run_experiment(config: RunConfig) -> tuple[dict, int]:
    """Run all configured branches; returns (manifest, exit_code)."""
    os.makedirs(config.out_dir, exist_ok=True)
    grid = Grid(config.nx, config.nt)
    model = config.model

    kappa = model.hamiltonian.curvature(1)
    pred_kappa = 1.0 if kappa is None else kappa
    tj = trivial_jacobian(model.coupling)
    n_max = max(config.n_max, max(n for n, _ in config.branches))
    k_max = max(config.k_max, max(k for _, k in config.branches))
    preds = bifurcation_times(tj, model.sigma, n_max, k_max, kappa=pred_kappa)
    preds_disc = {(p.n, p.k): p for p in bifurcation_times(
        tj, model.sigma, n_max, k_max, h=grid.h, kappa=pred_kappa)}
    by_label = {(p.n, p.k): p for p in preds}

    def work(label):
        if label not in by_label:
            return dict(n=label[0], k=label[1], status="FAILED",
                        error=f"no predicted bifurcation point for {label}")
        try:
            return run_branch(config, by_label[label], grid)
        except Exception as exc:  # noqa: BLE001 - record and keep going
            return dict(n=label[0], k=label[1], status="FAILED",
                        error=f"{type(exc).__name__}: {exc}",
                        trace=traceback.format_exc(limit=4))

    workers = max(1, config.workers)
    if workers == 1:
        branch_reports = [work(lb) for lb in config.branches]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            branch_reports = list(pool.map(work, config.branches))

    manifest = dict(
        experiment=config.experiment,
        grid=dict(nx=config.nx, nt=config.nt),
        model=_model_summary(model),
        eps=config.eps,
        predicted_bifurcations=[
            dict(n=p.n, k=p.k, T_star=p.T_star,
                 T_star_discrete=preds_disc[(p.n, p.k)].T_star,
                 omega=p.omega, tau=p.tau, resonant=p.resonant)
            for p in preds],
        branches=branch_reports,
    )
    failed = any(r.get("status") == "FAILED" for r in branch_reports)
    manifest["status"] = "FAILED" if failed else "OK"
    path = os.path.join(config.out_dir, "manifest.json")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest, (4 if failed else 0)
