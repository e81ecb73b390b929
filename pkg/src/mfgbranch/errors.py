"""Exception types shared across the package."""


class MFGBranchError(Exception):
    """Base class for all package-specific errors."""


class NonFiniteInput(MFGBranchError):
    """A scalar input (density, difference quotient) is NaN or infinite."""


class SchellingZeroTotal(MFGBranchError):
    """Schelling coupling evaluated at m1 + m2 = 0 (ratio undefined)."""


class ComplexEigenvalues(MFGBranchError):
    """JV(1,1) has complex eigenvalues; outside the implemented theory."""


class DefectiveMatrix(MFGBranchError):
    """JV(1,1) is not diagonalizable over the reals."""


class ModeOutOfRange(MFGBranchError):
    """Requested eigenvalue index invalid for the discrete mode family."""


class OutOfBand(MFGBranchError):
    """sigma^2 * lambda outside (0, -a1): mode contributes no kernel."""


class NoNegativeEigenvalue(MFGBranchError):
    """a1 >= 0: no bifurcation predictions exist for this model."""


class NonFiniteState(MFGBranchError):
    """State fields contain NaN or infinite entries."""


class BvpSolveFailure(MFGBranchError):
    """Shooting solve of the inhomogeneous transversality BVP broke down."""


class SeedFailure(MFGBranchError):
    """No non-trivial solution found near the predicted bifurcation point."""


class ConfigError(MFGBranchError):
    """Invalid run configuration (CLI exit code 2)."""
