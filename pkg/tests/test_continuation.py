import math

import numpy as np
import pytest

from mfgbranch import (
    Grid,
    assemble_residual,
    bifurcation_times,
    trivial_jacobian,
)
from mfgbranch.continuation import (
    COLLAPSED,
    DECREASING,
    INCREASING,
    BranchPoint,
    continue_branch,
    make_branch_point,
    oscillation_count,
    seed_branch,
)
from mfgbranch.discretization import StateVector, scheme_kernel_time
from mfgbranch.errors import SeedFailure
from mfgbranch.spectral import neumann_eigenvalue

from conftest import SIGMA, model_exp1

GRID = Grid(32, 32)


@pytest.fixture(scope="module")
def exp1_model():
    return model_exp1()


@pytest.fixture(scope="module")
def bp1(exp1_model):
    return bifurcation_times(trivial_jacobian(exp1_model.coupling),
                             SIGMA, 1, 1)[0]


@pytest.fixture(scope="module")
def seed1(exp1_model, bp1):
    return seed_branch(bp1, 0.1, exp1_model, GRID)


@pytest.fixture(scope="module")
def branch_down(exp1_model, seed1):
    return continue_branch(seed1, DECREASING, 0.02, exp1_model, GRID,
                           label=(1, 1))


@pytest.fixture(scope="module")
def branch_up(exp1_model, seed1, bp1):
    return continue_branch(seed1, INCREASING, bp1.T_star + 1.0, exp1_model,
                           GRID, label=(1, 1))


def test_seed_lands_past_bifurcation(seed1, bp1):
    assert bp1.T_star < seed1.T <= 1.2
    assert seed1.deviation > 1e-4
    assert seed1.deviation == pytest.approx(0.1, rel=0.3)


def test_seed_tiny_amplitude_fails(exp1_model, bp1):
    from mfgbranch.continuation import ContinuationPolicy

    policy = ContinuationPolicy(seed_max_tries=3)
    with pytest.raises(SeedFailure):
        seed_branch(bp1, 1e-9, exp1_model, GRID, policy=policy)


def test_decreasing_collapses_at_scheme_kernel_time(branch_down, exp1_model):
    assert branch_down.terminated_by == COLLAPSED
    lam = neumann_eigenvalue(1, h=GRID.h)
    tbar = scheme_kernel_time(1, lam, -2.0, SIGMA, GRID.nt)
    assert abs(branch_down.points[-1].T - tbar) <= 5e-4
    # final point is back on the trivial branch
    assert branch_down.points[-1].deviation <= 1e-4


def test_increasing_reaches_limit_with_growing_norm(branch_up, bp1):
    assert branch_up.terminated_by == "ReachedTmax"
    assert branch_up.points[-1].T == pytest.approx(bp1.T_star + 1.0)
    sups = [p.sup_norm_m1 for p in branch_up.points]
    assert sups[-1] > 2.0
    assert sups[-1] == max(sups)


def test_branch_points_reverify_residual(branch_down, exp1_model):
    for p in branch_down.points[-3:]:
        r = assemble_residual(p.state, p.T, exp1_model, GRID)
        assert np.max(np.abs(r)) <= 1e-9


def test_near_collapse_shape(branch_down, bp1):
    pre = [p for p in branch_down.points if p.deviation > 1e-4][-1]
    wave = (np.sin(bp1.omega * pre.T * GRID.t)[:, None]
            * np.cos(np.pi * GRID.x)[None, :])
    dev = pre.state.m1 - 1.0
    corr = float(np.sum(dev * wave)
                 / np.sqrt(np.sum(dev**2) * np.sum(wave**2)))
    assert corr >= 0.99


def test_oscillation_counts_synthetic():
    # sin profiles at T*(n) switch n-1 times; plateaus with end decay keep
    # the count unchanged
    grid = Grid(16, 64)
    t = grid.t
    for n, expect in ((1, 0), (2, 1), (3, 2)):
        coeff = np.sin((n - 0.25) * math.pi * t)
        pt = BranchPoint(T=1.0, state=None, sup_norm_m1=1.1, sup_norm_m2=1.0,
                         projection_coeffs=np.stack([coeff] * 4),
                         newton_iters=0)
        assert oscillation_count(pt) == expect
    plateau = np.tanh(8 * t) - 0.1 * np.clip(t - 0.9, 0, None)
    pt = BranchPoint(T=1.0, state=None, sup_norm_m1=1.1, sup_norm_m2=1.0,
                     projection_coeffs=np.stack([plateau] * 4),
                     newton_iters=0)
    assert oscillation_count(pt) == 0
    trivial = BranchPoint(T=1.0, state=None, sup_norm_m1=1.0,
                          sup_norm_m2=1.0,
                          projection_coeffs=np.zeros((4, len(t))),
                          newton_iters=0)
    assert oscillation_count(trivial) == 0


def test_oscillation_constant_along_branch(branch_up):
    counts = {oscillation_count(p) for p in branch_up.points
              if p.deviation > 1e-4}
    assert counts == {0}


def test_make_branch_point_norm_convention(exp1_model):
    state = StateVector.trivial(GRID, 1.0, exp1_model)
    state.m1 += 0.25 * np.cos(np.pi * GRID.x)[None, :] \
        * np.sin(np.pi * GRID.t)[:, None]
    state.m1[0] = 1.0
    pt = make_branch_point(state, 1.0, GRID, 3)
    assert pt.sup_norm_m1 == pytest.approx(1.25, abs=1e-12)
    assert pt.sup_norm_m2 == 1.0
    assert pt.deviation == pytest.approx(0.25, abs=1e-12)
    assert pt.projection_coeffs.shape == (4, GRID.nt + 1)
