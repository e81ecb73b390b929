import math

import numpy as np
import pytest

from mfgbranch import (
    Grid,
    NewtonOptions,
    StateVector,
    bifurcation_times,
    local_guess,
    mass_vector,
    newton_solve,
    trivial_jacobian,
)
from mfgbranch.solver import CONVERGED, MAX_ITERATIONS

from conftest import SIGMA, model_exp1, smooth_test_state


@pytest.fixture(scope="module")
def exp1_model():
    return model_exp1()


@pytest.fixture(scope="module")
def bp1(exp1_model):
    return bifurcation_times(trivial_jacobian(exp1_model.coupling),
                             SIGMA, 1, 1)[0]


@pytest.fixture(scope="module")
def nontrivial_solve(exp1_model, bp1):
    """Shared converged non-trivial solution at T = 0.9 on a 40x40 grid.

    The kernel-mode guess needs a value function consistent with the
    density bump, otherwise the first Newton step jumps to the trivial
    solution (the quadratic Hamiltonian is degenerate at constant u).
    """
    from mfgbranch.discretization import hjb_backward_sweep

    grid = Grid(40, 40)
    guess = local_guess(bp1, 1.2, grid, exp1_model, T=0.9)
    guess = hjb_backward_sweep(guess, 0.9, exp1_model, grid)
    state, report = newton_solve(guess, 0.9, exp1_model, grid)
    return grid, state, report


def test_trivial_start_converges_immediately(exp1_model):
    grid = Grid(16, 16)
    for T in (0.3, 1.0, 7.0):
        state, report = newton_solve(StateVector.trivial(grid, T, exp1_model),
                                     T, exp1_model, grid)
        assert report.converged
        assert report.iterations <= 1
        assert state.max_deviation() <= 1e-12


def test_converges_to_nontrivial_branch(nontrivial_solve):
    grid, state, report = nontrivial_solve
    assert report.status == CONVERGED
    assert np.max(np.abs(state.m1 - 1.0)) > 0.01
    assert report.final_residual <= 1e-9


def test_residual_history_strictly_decreasing(nontrivial_solve):
    _, _, report = nontrivial_solve
    hist = report.residual_history
    assert len(hist) >= 3
    assert all(b < a for a, b in zip(hist, hist[1:]))


def test_quadratic_tail(nontrivial_solve):
    _, _, report = nontrivial_solve
    hist = [h for h in report.residual_history if h > 0]
    tail = hist[-3:]
    constants = [tail[i + 1] / tail[i] ** 2 for i in range(len(tail) - 1)]
    assert max(constants) < 1e6


def test_small_horizon_returns_to_trivial(exp1_model, bp1):
    grid = Grid(24, 24)
    guess = local_guess(bp1, 0.3, grid, exp1_model, T=0.3)
    state, report = newton_solve(guess, 0.3, exp1_model, grid)
    assert report.converged
    assert np.max(np.abs(state.m1 - 1.0)) <= 1e-6
    assert np.max(np.abs(state.m2 - 1.0)) <= 1e-6


def test_mass_conservation_and_positivity(nontrivial_solve):
    grid, state, _ = nontrivial_solve
    drift = np.max(np.abs(mass_vector(state, grid) - 1.0))
    assert drift <= 1e-10
    assert min(state.m1.min(), state.m2.min()) >= -1e-8


def test_symmetry_equivariance(exp1_model, bp1):
    from mfgbranch.discretization import hjb_backward_sweep

    grid = Grid(24, 24)
    guess = local_guess(bp1, 0.55, grid, exp1_model, T=0.85)
    guess = hjb_backward_sweep(guess, 0.85, exp1_model, grid)
    state_a, rep_a = newton_solve(guess, 0.85, exp1_model, grid)
    state_b, rep_b = newton_solve(guess.reflected(), 0.85, exp1_model, grid)
    assert rep_a.converged and rep_b.converged
    assert state_a.max_deviation() > 0.5  # the cos(pi x) branch, not trivial
    mirrored = state_a.reflected()
    for fa, fb in zip(mirrored.fields(), state_b.fields()):
        assert np.max(np.abs(fa - fb)) <= 1e-8


def test_determinism(exp1_model, bp1):
    grid = Grid(16, 16)
    guess = local_guess(bp1, 0.2, grid, exp1_model, T=0.8)
    s1, r1 = newton_solve(guess, 0.8, exp1_model, grid)
    s2, r2 = newton_solve(guess, 0.8, exp1_model, grid)
    assert r1.residual_history == r2.residual_history
    for fa, fb in zip(s1.fields(), s2.fields()):
        assert np.array_equal(fa, fb)


def test_max_iterations_status(exp1_model):
    grid = Grid(16, 16)
    state = smooth_test_state(grid, 1.0, exp1_model, amplitude=0.3)
    opts = NewtonOptions(max_iters=1)
    _, report = newton_solve(state, 1.0, exp1_model, grid, opts)
    assert report.status == MAX_ITERATIONS
    assert not report.converged


def test_invalid_horizon(exp1_model):
    grid = Grid(16, 16)
    state = StateVector.trivial(grid, 1.0, exp1_model)
    with pytest.raises(ValueError):
        newton_solve(state, -1.0, exp1_model, grid)
