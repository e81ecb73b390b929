"""Bifurcation prediction and Newton continuation for two-population
finite-horizon mean-field games on (0,1) with Neumann boundaries."""

from .config import RunConfig, build_config
from .continuation import (
    Branch,
    BranchPoint,
    ContinuationPolicy,
    continue_branch,
    oscillation_count,
    seed_branch,
)
from .discretization import (
    Grid,
    SparseOperator,
    StateVector,
    assemble_jacobian,
    assemble_residual,
    mass_vector,
)
from .errors import MFGBranchError
from .experiments import predict_table, run_experiment
from .model import (
    CouplingSpec,
    HamiltonianSpec,
    ModelSpec,
    TrivialJacobian,
    coupling_jacobian,
    eval_coupling,
    eval_hamiltonian,
    trivial_jacobian,
)
from .solver import NewtonOptions, SolveReport, newton_solve
from .spectral import (
    BifurcationPoint,
    bifurcation_times,
    kernel_residual,
    linearized_bvp_oracle,
    local_guess,
    neumann_eigenvalue,
    transversality_check,
)

__version__ = "0.1.0"

__all__ = [
    "Branch", "BranchPoint", "BifurcationPoint", "ContinuationPolicy",
    "CouplingSpec", "Grid", "HamiltonianSpec", "MFGBranchError", "ModelSpec",
    "NewtonOptions", "RunConfig", "SolveReport", "SparseOperator",
    "StateVector", "TrivialJacobian", "assemble_jacobian",
    "assemble_residual", "bifurcation_times", "build_config",
    "continue_branch", "coupling_jacobian", "eval_coupling",
    "eval_hamiltonian", "kernel_residual", "linearized_bvp_oracle",
    "local_guess", "mass_vector", "neumann_eigenvalue", "newton_solve",
    "oscillation_count", "predict_table", "run_experiment", "seed_branch",
    "transversality_check", "trivial_jacobian",
]
