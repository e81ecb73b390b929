"""Branch tracing in the horizon parameter T.

Natural continuation is the default: secant predictor in the state, Newton
corrector at the stepped horizon, adaptive step with halving on corrector
failure. When a corrector fails while the amplitude-vs-T slope is steep
(a turning point, not a collapse), the tracer switches to pseudo-arclength
steps: the horizon joins the unknowns and steps follow the normalized
secant hyperplane, so folds are rounded and every T-direction reversal is
recorded. Decreasing-T runs terminate once the densities return to the
constant state (the branch has collapsed onto the trivial one).
"""

from __future__ import annotations

import math

from dataclasses import dataclass, field

import numpy as np

from .discretization import (
    Grid,
    StateVector,
    assemble_jacobian,
    assemble_residual,
    cosine_projection,
    pack,
    residual_T_derivative,
    unpack,
)
from .errors import SeedFailure
from .model import ModelSpec
from .solver import CONVERGED, LinearCache, NewtonOptions, factorize, newton_solve
from .spectral import BifurcationPoint, local_guess

INCREASING = "IncreasingT"
DECREASING = "DecreasingT"

REACHED_TMAX = "ReachedTmax"
COLLAPSED = "CollapsedToTrivial"
STEP_UNDERFLOW = "StepUnderflow"

PROJECTION_MODES = 4


@dataclass
class ContinuationPolicy:
    step_initial: float = 0.05
    step_min: float = 1e-5
    step_max: float = 0.1
    growth: float = 1.5            # step growth after easy streaks
    growth_after: int = 3
    collapse_tol: float = 1e-4     # ||m_i - 1||_inf marking the trivial branch
    fold_slope: float = 8.0        # d(sup norm)/dT triggering arclength
    fold_min_dev: float = 0.05     # no fold handling this close to trivial
    seed_step: float = 0.05
    seed_max_tries: int = 40
    t_floor: float = 0.02          # lower horizon bound for decreasing traces
    collapse_refine: float = 1e-5  # bracket width for collapse endpoints
    turn_min: float = 0.2          # secant-cosine floor per arclength step
    arclength_enabled: bool = True
    # (deviation level, step cap): horizon steps shrink near bifurcation,
    # where a small change of T moves the solution a lot
    near_collapse_caps: tuple = ((0.2, 0.02), (0.05, 0.005), (0.02, 0.002))


@dataclass
class BranchPoint:
    """One converged solution on a branch with its plotted diagnostics."""

    T: float
    state: StateVector
    sup_norm_m1: float       # ||m1 - 1||_inf + 1, the paper's plotted norm
    sup_norm_m2: float
    projection_coeffs: np.ndarray  # (4, Nt+1) cosine-mode time series of m1
    newton_iters: int
    companion: "BranchPoint | None" = None  # second launch point from seeding

    @property
    def deviation(self) -> float:
        return max(self.sup_norm_m1, self.sup_norm_m2) - 1.0


@dataclass
class Branch:
    label: tuple
    points: list = field(default_factory=list)
    folds: list = field(default_factory=list)
    terminated_by: str = ""
    collapse_T: float | None = None  # refined kernel-time estimate


def make_branch_point(state: StateVector, T: float, grid: Grid,
                      newton_iters: int) -> BranchPoint:
    coeffs = np.stack([cosine_projection(state.m1, grid, k)
                       for k in range(1, PROJECTION_MODES + 1)])
    return BranchPoint(
        T=T, state=state,
        sup_norm_m1=float(np.max(np.abs(state.m1 - 1.0))) + 1.0,
        sup_norm_m2=float(np.max(np.abs(state.m2 - 1.0))) + 1.0,
        projection_coeffs=coeffs, newton_iters=newton_iters)


def oscillation_count(point: BranchPoint) -> int:
    """Interior switches of the leading cosine-mode time series.

    Counts direction reversals of the k=1 projection with a hysteresis
    noise floor of 1e-3 * max|coeff| (so plateau jitter never registers),
    then subtracts one: a profile that rises to a single extremum and
    monotonically approaches the final condition has switched zero times,
    and the n-th branch switches n-1 times between the two mirror profiles.
    """
    c = point.projection_coeffs[0]
    floor = 1e-3 * float(np.max(np.abs(c)))
    if floor == 0.0:
        return 0
    reversals = 0
    ref = c[0]
    direction = 0
    for v in c[1:]:
        if direction == 0:
            if v - ref >= floor:
                direction, ref = 1, v
            elif ref - v >= floor:
                direction, ref = -1, v
        elif direction == 1:
            if v > ref:
                ref = v
            elif ref - v >= floor:
                reversals += 1
                direction, ref = -1, v
        else:
            if v < ref:
                ref = v
            elif v - ref >= floor:
                reversals += 1
                direction, ref = 1, v
    return max(reversals - 1, 0)


def _amplitude_seed(bp: BifurcationPoint, eps: float, model: ModelSpec,
                    grid: Grid, opts: NewtonOptions):
    """Branch switching at the discrete kernel time via a bordered solve.

    The trivial-state Jacobian is singular exactly where branches emanate,
    so a plain Newton run from a small kernel-mode guess falls back onto
    the trivial solution. Pinning the kernel-mode amplitude of the guess
    and freeing T (one bordered row, as in pseudo-arclength) removes the
    singularity; Newton then converges to the small non-trivial solution
    and returns it together with its horizon T = T_bar + O(eps^2).
    """
    from .discretization import scheme_kernel_time
    from .model import trivial_jacobian
    from .spectral import neumann_eigenvalue

    kappa = model.hamiltonian.curvature(1)
    if kappa is None:
        return None
    tj = trivial_jacobian(model.coupling)
    lam_d = neumann_eigenvalue(bp.k, h=grid.h)
    try:
        T0 = scheme_kernel_time(bp.n, lam_d, tj.a1, model.sigma, grid.nt,
                                kappa=kappa)
    except ValueError:
        T0 = bp.T_star

    pop = int(np.argmax(np.abs(bp.direction)))
    guess = local_guess(bp, eps, grid, model, T=T0)
    y_pred = pack(guess)

    # constraint row: kernel-mode amplitude of the m_pop block equals the
    # guess's amplitude (alpha is linear in y, so n.(y - y_pred) = alpha - eps*dir)
    wave = (np.sin(bp.omega * T0 * grid.t)[:, None]
            * np.cos(bp.k * np.pi * grid.x)[None, :])[1:]
    n_y = np.zeros_like(y_pred)
    nb = grid.nt * (grid.nx + 1)
    block = slice((2 + pop) * nb, (3 + pop) * nb)
    n_y[block] = wave.ravel() / float(np.sum(wave * wave))
    result = _arclength_corrector(y_pred, T0, n_y, 0.0, model, grid, opts)
    if result is None:
        return None
    state, T_new, iters = result
    if T_new <= 0 or not state.is_finite():
        return None
    return make_branch_point(state, T_new, grid, iters)


def seed_branch(bp: BifurcationPoint, eps: float, model: ModelSpec,
                grid: Grid, opts: NewtonOptions | None = None,
                policy: ContinuationPolicy | None = None) -> BranchPoint:
    """First non-trivial point past the predicted bifurcation time.

    The fast path pins the kernel-mode amplitude to eps in a bordered solve
    at the grid's own kernel time (see _amplitude_seed). If that fails, the
    fallback walks T upward from T_star by the seed step, building guesses
    whose value functions are HJB-consistent with the density perturbation,
    until the solver lands on a state above the collapse threshold. The
    nominal amplitude range is [1e-3, 0.5]; values outside it are attempted
    anyway and fail through the normal SeedFailure/collapse path.
    """
    from .discretization import hjb_backward_sweep

    if policy is None:
        policy = ContinuationPolicy()
    if opts is None:
        opts = NewtonOptions()

    point = _amplitude_seed(bp, eps, model, grid, opts)
    if point is not None and point.deviation > policy.collapse_tol:
        # second bordered solve a little further up the branch, so the
        # tracer starts with a secant direction through the steep launch
        companion = _amplitude_seed(bp, 1.4 * eps, model, grid, opts)
        if (companion is not None
                and companion.deviation > point.deviation
                and companion.T != point.T):
            point.companion = companion
        return point

    T = bp.T_star
    for _ in range(policy.seed_max_tries):
        for fac in (1.0, 2.0, 4.0):
            guess = local_guess(bp, eps * fac, grid, model, T=T)
            guess = hjb_backward_sweep(guess, T, model, grid)
            state, report = newton_solve(guess, T, model, grid, opts)
            if report.converged and state.max_deviation() > policy.collapse_tol:
                return make_branch_point(state, T, grid, report.iterations)
        T += policy.seed_step
    raise SeedFailure(
        f"no non-trivial solution within {policy.seed_max_tries} increments "
        f"of T*={bp.T_star:.4f} (eps={eps:g})")


def _step_cap(dev: float, policy: ContinuationPolicy) -> float:
    cap = policy.step_max
    for level, c in policy.near_collapse_caps:
        if dev < level:
            cap = min(cap, c)
    return cap


def _predict(pts, T_new):
    """Secant extrapolation of the packed state to horizon T_new."""
    y1 = pack(pts[-1].state)
    if len(pts) < 2 or pts[-1].T == pts[-2].T:
        return y1
    y0 = pack(pts[-2].state)
    slope = (y1 - y0) / (pts[-1].T - pts[-2].T)
    return y1 + slope * (T_new - pts[-1].T)


def _arclength_corrector(y_pred, T_pred, n_y, n_T, model, grid, opts,
                         cache=None, trust=None):
    """Newton on the bordered system [F(y,T); n.(z - z_pred)] = 0.

    A cached factorization is tried first on each iteration (the bordered
    step stays exact for the stale linearization, so this is a modified
    Newton step); the Jacobian is refreshed whenever the residual fails to
    contract by at least half. With a trust radius, iterates sliding
    farther than trust (RMS state metric) from the prediction are rejected:
    near folds the constraint hyperplane intersects other solution sheets,
    and an unconstrained Newton run can wander onto one of them.
    """
    y, T = y_pred.copy(), T_pred
    inv_n = 1.0 / y.size
    rnorm_prev = None
    for it in range(opts.max_iters):
        state = unpack(grid, y)
        try:
            r = assemble_residual(state, T, model, grid)
        except Exception:
            return None
        if trust is not None:
            dz = y - y_pred
            dist = math.sqrt(inv_n * float(dz @ dz) + (T - T_pred) ** 2)
            if dist > trust:
                return None
        rnorm = float(np.max(np.abs(r)))
        c = float(n_y @ (y - y_pred) + n_T * (T - T_pred))
        if rnorm <= opts.tol_residual and abs(c) <= 1e-10:
            return unpack(grid, y), T, it
        stale_ok = (cache is not None and cache.lu is not None
                    and rnorm > opts.hint_floor
                    and (rnorm_prev is None or rnorm <= 0.5 * rnorm_prev))
        if not stale_ok:
            jac = assemble_jacobian(state, T, model, grid)
            try:
                lu = factorize(jac, grid)
            except RuntimeError:
                return None
            if cache is not None:
                cache.lu = lu
        else:
            lu = cache.lu
        ft = residual_T_derivative(state, T, model, grid)
        a = lu.solve(r)
        b = lu.solve(ft)
        denom = n_T - float(n_y @ b)
        if denom == 0.0 or not np.isfinite(denom):
            return None
        dT = (float(n_y @ a) - c) / denom
        dy = -a - b * dT
        if not (np.all(np.isfinite(dy)) and np.isfinite(dT)):
            return None
        y = y + dy
        T = T + dT
        rnorm_prev = rnorm
        if T <= 0:
            return None
    return None


def _refine_collapse(branch: Branch, t_trivial: float, model: ModelSpec,
                     grid: Grid, policy: ContinuationPolicy,
                     opts: NewtonOptions, cache: LinearCache | None = None
                     ) -> None:
    """Bisect the collapse horizon between the last non-trivial point and
    the first horizon where the corrector returned the trivial state.

    The branch amplitude falls off steeply at the discrete kernel time, so
    a plain step can overshoot it by up to the step size; bisection pins
    the recorded endpoint to within collapse_refine of the scheme's own
    bifurcation point. Refined non-trivial points are appended to the
    branch, followed by the terminal trivial point.
    """
    lo = t_trivial                      # trivial here
    hi = branch.points[-1].T            # non-trivial here
    trivial_state = None
    while abs(hi - lo) > policy.collapse_refine:
        width = abs(hi - lo)
        mid = 0.5 * (lo + hi)
        pts = branch.points
        if len(pts) >= 2 and pts[-1].deviation > 0 and pts[-2].deviation > 0:
            # near the kernel time the amplitude follows dev^2 ~ c(T - Tbar);
            # extrapolate Tbar from the last two points and bias toward it
            d2a, d2b = pts[-2].deviation ** 2, pts[-1].deviation ** 2
            if d2a != d2b:
                t_hat = pts[-1].T - d2b * (pts[-1].T - pts[-2].T) / (d2b - d2a)
                inside = (min(lo, hi) + 0.05 * width,
                          max(lo, hi) - 0.05 * width)
                if inside[0] < t_hat < inside[1]:
                    mid = t_hat
        y_pred = _predict(branch.points, mid)
        state, report = newton_solve(unpack(grid, y_pred), mid, model, grid,
                                     opts, cache=cache)
        if report.converged and state.max_deviation() > policy.collapse_tol:
            branch.points.append(make_branch_point(state, mid, grid,
                                                   report.iterations))
            hi = mid
        else:
            lo = mid
            if report.converged:
                trivial_state = (state, mid, report.iterations)
    if trivial_state is not None:
        branch.points.append(make_branch_point(trivial_state[0],
                                               trivial_state[1], grid,
                                               trivial_state[2]))
    # the recorded endpoint extrapolates dev^2 ~ c (T - Tbar) through the
    # smallest-amplitude points found; the square-root amplitude law
    # localizes the kernel time far below the bracket width
    nontriv = sorted((p for p in branch.points
                      if p.deviation > policy.collapse_tol),
                     key=lambda p: p.deviation)[:3]
    branch.collapse_T = lo
    if len(nontriv) >= 2:
        ts = np.array([p.T for p in nontriv])
        d2 = np.array([p.deviation ** 2 for p in nontriv])
        slope, intercept = np.polyfit(d2, ts, 1)
        t_hat = float(intercept)
        if min(lo, hi) - policy.collapse_refine <= t_hat <= max(lo, hi):
            branch.collapse_T = t_hat
    branch.terminated_by = COLLAPSED


def continue_branch(seed: BranchPoint, direction: str, T_limit: float,
                    model: ModelSpec, grid: Grid,
                    policy: ContinuationPolicy | None = None,
                    opts: NewtonOptions | None = None,
                    label: tuple = ()) -> Branch:
    """Trace a branch from a converged seed point.

    direction is "IncreasingT" or "DecreasingT"; T_limit bounds the trace
    (an upper bound when increasing, the lower bound when decreasing; after
    a rounded fold the bound on the other side applies too). A decreasing
    trace terminates CollapsedToTrivial once the corrector lands back on
    the constant state, with the endpoint refined by bisection; elsewhere a
    trivial corrector result counts as a failed step (the branch was lost,
    not ended).
    """
    if policy is None:
        policy = ContinuationPolicy()
    if opts is None:
        opts = NewtonOptions()
    if direction == INCREASING:
        sign, t_hi, t_lo = 1.0, T_limit, policy.t_floor
    else:
        # bounded below by T_limit (or the floor) and above by the seed
        # horizon plus slack, so a rounded fold ends the trace once it
        # climbs back past the start
        sign = -1.0
        t_lo = max(policy.t_floor, min(T_limit, seed.T))
        t_hi = seed.T

    points = [seed]
    if seed.companion is not None:
        # two launch points from seeding; order them along the trace
        pair = sorted([seed, seed.companion], key=lambda p: p.T)
        points = pair if direction == INCREASING else pair[::-1]
    branch = Branch(label=tuple(label), points=points)
    cache = LinearCache()
    step = policy.step_initial
    streak = 0
    mode = "natural"
    ds = None
    last_dT_sign = 0.0
    calm_steps = 0  # arclength steps with mild slope, for mode hand-back

    while True:
        pts = branch.points
        dev = pts[-1].deviation

        if mode == "natural":
            # amplitude-dependent caps localize the collapse endpoint; they
            # only apply while stepping down toward the bifurcation point
            step_eff = min(step, _step_cap(dev, policy)) if sign < 0 \
                else min(step, policy.step_max)
            T_new = pts[-1].T + sign * step_eff
            hit_limit = False
            if sign > 0 and T_new >= t_hi:
                T_new, hit_limit = t_hi, True
            if sign < 0 and T_new <= t_lo:
                T_new, hit_limit = t_lo, True
            y_pred = _predict(pts, T_new)
            state, report = newton_solve(unpack(grid, y_pred), T_new, model,
                                         grid, opts, cache=cache)
            collapsed = (report.converged
                         and state.max_deviation() <= policy.collapse_tol)
            if collapsed and direction == DECREASING:
                _refine_collapse(branch, T_new, model, grid, policy, opts,
                                 cache)
                return branch
            if report.converged and not collapsed:
                point = make_branch_point(state, T_new, grid,
                                          report.iterations)
                branch.points.append(point)
                if hit_limit:
                    branch.terminated_by = REACHED_TMAX
                    return branch
                streak += 1
                if streak >= policy.growth_after:
                    step = min(step * policy.growth, policy.step_max)
                continue
            # corrector failed (or left the branch)
            streak = 0
            slope = np.inf
            if len(pts) >= 2 and pts[-1].T != pts[-2].T:
                slope = abs((pts[-1].deviation - pts[-2].deviation)
                            / (pts[-1].T - pts[-2].T))
            if (policy.arclength_enabled and dev > policy.fold_min_dev
                    and slope > policy.fold_slope and len(pts) >= 2):
                mode = "arclength"
                dy = pack(pts[-1].state) - pack(pts[-2].state)
                dT = pts[-1].T - pts[-2].T
                ds = min(float(np.sqrt((dy @ dy) / dy.size + dT * dT)),
                         policy.step_initial)
                last_dT_sign = np.sign(dT) if dT != 0 else sign
                continue
            step = step_eff * 0.5
            if step < policy.step_min:
                branch.terminated_by = STEP_UNDERFLOW
                return branch
            continue

        # pseudo-arclength stepping along the normalized secant; the state
        # part uses the RMS metric so the horizon direction is not drowned
        # out by the node count
        dy = pack(pts[-1].state) - pack(pts[-2].state)
        dT = pts[-1].T - pts[-2].T
        inv_n = 1.0 / dy.size
        norm = float(np.sqrt(inv_n * (dy @ dy) + dT * dT))
        if norm == 0.0:
            branch.terminated_by = STEP_UNDERFLOW
            return branch
        n_y, n_T = dy * (inv_n / norm), dT / norm
        if abs(dT) > 1e-12 * norm:
            ds = min(ds, policy.step_max * norm / abs(dT))  # bound T motion
        y_pred = pack(pts[-1].state) + (ds / norm) * dy
        T_pred = pts[-1].T + (ds / norm) * dT
        result = _arclength_corrector(y_pred, T_pred, n_y, n_T, model, grid,
                                      opts, cache=cache, trust=2.0 * ds)
        if result is not None and result[0].max_deviation() <= policy.collapse_tol:
            result = None  # fell off the branch; shrink the step
        if result is not None:
            # reject sharp turns of the secant: a near-reversal of the
            # state direction means the corrector jumped to another sheet
            dy_new = pack(result[0]) - pack(pts[-1].state)
            dt_new = result[1] - pts[-1].T
            nn = float(np.sqrt(inv_n * (dy_new @ dy_new) + dt_new**2))
            if nn > 0:
                cosang = (inv_n * (dy_new @ dy) + dt_new * dT) / (nn * norm)
                if cosang < policy.turn_min:
                    result = None
        if result is None:
            ds *= 0.5
            if ds < policy.step_min:
                branch.terminated_by = STEP_UNDERFLOW
                return branch
            continue
        state, T_new, iters = result
        point = make_branch_point(state, T_new, grid, iters)
        dT_step = T_new - pts[-1].T
        if last_dT_sign != 0 and np.sign(dT_step) not in (0.0, last_dT_sign):
            branch.folds.append(pts[-1].T)  # the extremal horizon
            ds = min(ds, policy.step_initial)  # settle into the new sheet
        if dT_step != 0:
            last_dT_sign = np.sign(dT_step)
        branch.points.append(point)
        if T_new >= t_hi or T_new <= t_lo:
            branch.terminated_by = REACHED_TMAX
            return branch
        ds = min(ds * policy.growth, 8.0 * policy.step_max)
        # hand back to natural continuation once the branch runs flat in T
        slope_now = np.inf
        if dT_step != 0:
            slope_now = abs((point.deviation - pts[-2].deviation) / dT_step)
        calm_steps = calm_steps + 1 if slope_now < 0.5 * policy.fold_slope else 0
        if calm_steps >= 2:
            mode = "natural"
            sign = last_dT_sign or sign
            step = min(max(abs(dT_step), policy.step_initial),
                       policy.step_max)
            streak = 0
            calm_steps = 0
