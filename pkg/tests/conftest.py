import math

import numpy as np
import pytest

from mfgbranch import (
    CouplingSpec,
    Grid,
    HamiltonianSpec,
    ModelSpec,
    StateVector,
)

SIGMA = 1.0 / math.pi


def model_exp1() -> ModelSpec:
    return ModelSpec(coupling=CouplingSpec.linear_aggregation(2.0),
                     hamiltonian=HamiltonianSpec.quadratic(), sigma=SIGMA)


def model_exp2() -> ModelSpec:
    return ModelSpec(coupling=CouplingSpec.linear_aggregation(5.0),
                     hamiltonian=HamiltonianSpec.quadratic(), sigma=SIGMA)


def model_exp3(gamma: float = 2.1) -> ModelSpec:
    return ModelSpec(coupling=CouplingSpec.linear_aggregation(2.0),
                     hamiltonian=HamiltonianSpec.power_law(gamma), sigma=SIGMA)


def model_exp4() -> ModelSpec:
    return ModelSpec(coupling=CouplingSpec.schelling(5.0, 3.0, 0.7, 0.55),
                     hamiltonian=HamiltonianSpec.quadratic(), sigma=SIGMA)


def model_exp5() -> ModelSpec:
    return ModelSpec(coupling=CouplingSpec.schelling(8.0, 8.0, 0.8, 0.4),
                     hamiltonian=HamiltonianSpec.quadratic(), sigma=SIGMA)


ALL_PRESETS = {1: model_exp1, 2: model_exp2, 3: model_exp3, 4: model_exp4,
               5: model_exp5}

QUADRATIC_PRESETS = {1: model_exp1, 2: model_exp2, 4: model_exp4,
                     5: model_exp5}


@pytest.fixture(scope="session")
def exp1():
    return model_exp1()


@pytest.fixture(scope="session")
def exp4():
    return model_exp4()


def smooth_test_state(grid: Grid, T: float, model: ModelSpec,
                      amplitude: float = 0.13) -> StateVector:
    """Deterministic smooth non-trivial state away from upwind kinks.

    The u-perturbation has a strictly monotone spatial part, keeping every
    one-sided difference quotient bounded away from zero: on the kink set
    {D-u = 0} or {D+u = 0} the power-law Hessian is only Hoelder continuous
    and finite differences of the residual converge too slowly to compare
    against the analytic Jacobian.
    """
    state = StateVector.trivial(grid, T, model)
    x, t = grid.x, grid.t
    slope = np.sin(1.1 * x + 0.2)[None, :] * (1.2 + np.sin(2.1 * t + 0.37))[:, None]
    bump1 = np.cos(np.pi * x)[None, :] * np.sin(2.1 * t + 0.37)[:, None]
    bump2 = np.cos(2 * np.pi * x)[None, :] * np.cos(1.3 * t + 0.19)[:, None]
    for f in (state.u1, state.u2):
        f += amplitude * slope
    for f in (state.m1, state.m2):
        f += amplitude * bump1 + 0.53 * amplitude * bump2
    state.m1[0, :] = 1.0
    state.m2[0, :] = 1.0
    state.u1[-1, :] = 0.0
    state.u2[-1, :] = 0.0
    return state
