"""Coupling costs, Hamiltonians, and the Jacobian data at the constant state.

Couplings V_i(m1, m2) come in three families:

* ``LinearAggregation`` -- V1 = -a*g(m1), V2 = 0, with g the identity on
  [0, M] extended to a bounded smooth cap (single-population aggregation).
* ``Schelling`` -- V_i = K_i * (m_i/(m1+m2) - alpha_i)^-, with the negative
  part replaced by a C^1 quadratic spline on (-eta, eta).
* ``ExplicitLinear`` -- V(m) = A (m - 1) for an arbitrary 2x2 matrix A,
  used for linear-theory tests.

Hamiltonians are |p|^gamma / 2 evaluated through the monotone upwind
(Godunov-type) numerical flux

    g(p_left, p_right) = kappa/2 * (max(p_left,0)^2 + min(p_right,0)^2)^(gamma/2),

nondecreasing in the backward difference and nonincreasing in the forward
one; g(p, p) = kappa/2 |p|^gamma exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ComplexEigenvalues,
    DefectiveMatrix,
    NonFiniteInput,
    SchellingZeroTotal,
)

COUPLING_KINDS = ("LinearAggregation", "Schelling", "ExplicitLinear")
HAMILTONIAN_KINDS = ("Quadratic", "PowerLaw")


@dataclass
class CouplingSpec:
    """Parameters of one running-cost family V = (V1, V2)."""

    kind: str
    a: float = 2.0          # aggregation strength (LinearAggregation)
    M: float = 10.0         # saturation level of g (LinearAggregation)
    K1: float = 1.0         # Schelling cost scales
    K2: float = 1.0
    alpha1: float = 0.5     # Schelling thresholds in [0, 1]
    alpha2: float = 0.5
    eta: float = 1e-3       # half-width of the negative-part smoothing
    A: np.ndarray | None = None  # ExplicitLinear matrix

    def __post_init__(self):
        if self.kind not in COUPLING_KINDS:
            raise ValueError(f"unknown coupling kind {self.kind!r}")
        if self.kind == "LinearAggregation":
            if not (self.a > 0 and self.M > 1):
                raise ValueError("LinearAggregation needs a > 0 and M > 1")
        elif self.kind == "Schelling":
            if not (self.K1 > 0 and self.K2 > 0 and self.eta > 0):
                raise ValueError("Schelling needs K1, K2, eta > 0")
            if not (0 <= self.alpha1 <= 1 and 0 <= self.alpha2 <= 1):
                raise ValueError("Schelling thresholds must lie in [0, 1]")
        else:
            self.A = np.asarray(self.A, dtype=float)
            if self.A.shape != (2, 2) or not np.all(np.isfinite(self.A)):
                raise ValueError("ExplicitLinear needs a finite 2x2 matrix")

    @classmethod
    def linear_aggregation(cls, a: float, M: float = 10.0) -> "CouplingSpec":
        return cls(kind="LinearAggregation", a=a, M=M)

    @classmethod
    def schelling(cls, K1: float, K2: float, alpha1: float, alpha2: float,
                  eta: float = 1e-3) -> "CouplingSpec":
        return cls(kind="Schelling", K1=K1, K2=K2,
                   alpha1=alpha1, alpha2=alpha2, eta=eta)

    @classmethod
    def explicit_linear(cls, A) -> "CouplingSpec":
        return cls(kind="ExplicitLinear", A=np.asarray(A, dtype=float))


@dataclass
class HamiltonianSpec:
    """Hamiltonian family: Quadratic kappa_i |p|^2/2 or PowerLaw |p|^gamma/2."""

    kind: str = "Quadratic"
    gamma: float = 2.0
    kappa1: float = 1.0
    kappa2: float = 1.0

    def __post_init__(self):
        if self.kind not in HAMILTONIAN_KINDS:
            raise ValueError(f"unknown Hamiltonian kind {self.kind!r}")
        if self.kind == "Quadratic":
            self.gamma = 2.0
            if not (self.kappa1 > 0 and self.kappa2 > 0):
                raise ValueError("Quadratic needs kappa_i > 0")
        elif not self.gamma > 1:
            raise ValueError("PowerLaw needs gamma > 1")

    @classmethod
    def quadratic(cls, kappa1: float = 1.0, kappa2: float = 1.0) -> "HamiltonianSpec":
        return cls(kind="Quadratic", kappa1=kappa1, kappa2=kappa2)

    @classmethod
    def power_law(cls, gamma: float) -> "HamiltonianSpec":
        return cls(kind="PowerLaw", gamma=gamma)

    def kappa(self, population: int) -> float:
        return self.kappa1 if population == 1 else self.kappa2

    def curvature(self, population: int) -> float | None:
        """D^2 H(0) scale, or None when the linearized theory degenerates."""
        if self.kind == "Quadratic" or self.gamma == 2.0:
            return self.kappa(population)
        return None  # 0 for gamma > 2, singular for gamma < 2


@dataclass
class ModelSpec:
    """One MFG instance: couplings, Hamiltonians and the diffusion sigma."""

    coupling: CouplingSpec
    hamiltonian: HamiltonianSpec = field(default_factory=HamiltonianSpec)
    sigma: float = 1.0 / math.pi

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")


@dataclass
class TrivialJacobian:
    """Diagonalization data of JV at the constant state (1, 1).

    Columns of Xi are right eigenvectors; column 1 belongs to a1 <= a2,
    so that Xi^-1 @ JV @ Xi = diag(a1, a2).
    """

    JV: np.ndarray
    a1: float
    a2: float
    Xi: np.ndarray


# ---------------------------------------------------------------------------
# saturated identity g and smoothed negative part
# ---------------------------------------------------------------------------

def _sat(m, M):
    """g(m): identity on [-M, M], capped by M+1-exp(-(m-M)) above, odd below."""
    m = np.asarray(m, dtype=float)
    hi = M + 1.0 - np.exp(-(m - M).clip(min=0.0))
    lo = -(M + 1.0 - np.exp(-(-m - M).clip(min=0.0)))
    return np.where(m > M, hi, np.where(m < -M, lo, m))


def _sat_prime(m, M):
    m = np.asarray(m, dtype=float)
    out = np.ones_like(m)
    out = np.where(m > M, np.exp(-(m - M).clip(min=0.0)), out)
    out = np.where(m < -M, np.exp(-(-m - M).clip(min=0.0)), out)
    return out


def _negpart(x, eta):
    """C^1 smoothing of x^- = max(-x, 0): quadratic (x-eta)^2/(4 eta) on |x|<eta."""
    x = np.asarray(x, dtype=float)
    return np.where(x <= -eta, -x,
                    np.where(x >= eta, 0.0, (x - eta) ** 2 / (4.0 * eta)))


def _negpart_prime(x, eta):
    x = np.asarray(x, dtype=float)
    return np.where(x <= -eta, -1.0,
                    np.where(x >= eta, 0.0, (x - eta) / (2.0 * eta)))


# ---------------------------------------------------------------------------
# couplings
# ---------------------------------------------------------------------------

def coupling_fields(spec: CouplingSpec, m1, m2):
    """Vectorized (V1, V2) on arrays of densities; no scalar validation."""
    m1 = np.asarray(m1, dtype=float)
    m2 = np.asarray(m2, dtype=float)
    if spec.kind == "LinearAggregation":
        v1 = -spec.a * _sat(m1, spec.M)
        return v1, np.zeros_like(v1)
    if spec.kind == "Schelling":
        tot = m1 + m2
        with np.errstate(divide="ignore", invalid="ignore"):
            r1 = m1 / tot
            r2 = m2 / tot
        return (spec.K1 * _negpart(r1 - spec.alpha1, spec.eta),
                spec.K2 * _negpart(r2 - spec.alpha2, spec.eta))
    A = spec.A
    d1, d2 = m1 - 1.0, m2 - 1.0
    return A[0, 0] * d1 + A[0, 1] * d2, A[1, 0] * d1 + A[1, 1] * d2


def coupling_jacobian_fields(spec: CouplingSpec, m1, m2):
    """Vectorized partial derivatives (J11, J12, J21, J22) of V w.r.t. m."""
    m1 = np.asarray(m1, dtype=float)
    m2 = np.asarray(m2, dtype=float)
    if spec.kind == "LinearAggregation":
        j11 = -spec.a * _sat_prime(m1, spec.M)
        z = np.zeros_like(j11)
        return j11, z, z.copy(), z.copy()
    if spec.kind == "Schelling":
        tot = m1 + m2
        with np.errstate(divide="ignore", invalid="ignore"):
            inv2 = 1.0 / tot**2
            p1 = spec.K1 * _negpart_prime(m1 / tot - spec.alpha1, spec.eta)
            p2 = spec.K2 * _negpart_prime(m2 / tot - spec.alpha2, spec.eta)
        # grad of m_i/(m1+m2): population 1 -> (m2, -m1)/tot^2, 2 -> (-m2, m1)/tot^2
        return (p1 * m2 * inv2, -p1 * m1 * inv2,
                -p2 * m2 * inv2, p2 * m1 * inv2)
    A = spec.A
    shape = np.broadcast(m1, m2).shape
    return (np.full(shape, A[0, 0]), np.full(shape, A[0, 1]),
            np.full(shape, A[1, 0]), np.full(shape, A[1, 1]))


def _check_point(spec, m1, m2):
    if not (np.isfinite(m1) and np.isfinite(m2)):
        raise NonFiniteInput(f"coupling evaluated at non-finite ({m1}, {m2})")
    if spec.kind == "Schelling" and m1 + m2 == 0.0:
        raise SchellingZeroTotal("Schelling ratio undefined at m1 + m2 = 0")


def eval_coupling(spec: CouplingSpec, m1: float, m2: float) -> tuple[float, float]:
    """Running costs (V1, V2) at a single density pair."""
    _check_point(spec, m1, m2)
    v1, v2 = coupling_fields(spec, m1, m2)
    return float(v1), float(v2)


def coupling_jacobian(spec: CouplingSpec, m1: float, m2: float) -> np.ndarray:
    """2x2 matrix of partial derivatives of (V1, V2) w.r.t. (m1, m2).

    Inside the Schelling smoothing band the smoothed derivative is returned.
    """
    _check_point(spec, m1, m2)
    j11, j12, j21, j22 = coupling_jacobian_fields(spec, m1, m2)
    return np.array([[float(j11), float(j12)], [float(j21), float(j22)]])


def trivial_jacobian(spec: CouplingSpec) -> TrivialJacobian:
    """Eigen-decomposition of JV(1,1) with a1 <= a2.

    The Schelling regimes away from the smoothing band return the closed-form
    eigenvalue/eigenvector matrices (integer columns (K1,-K2),(1,1) in the
    doubly-intolerant case, (1,0),(1,1) in the single-intolerant case).
    Generic matrices are diagonalized numerically with each column scaled so
    its largest-magnitude entry is 1.
    """
    JV = coupling_jacobian(spec, 1.0, 1.0)

    if spec.kind == "Schelling":
        # at (1,1) both ratios are 1/2; a threshold is active iff alpha > 1/2
        d1 = 0.5 - spec.alpha1
        d2 = 0.5 - spec.alpha2
        outside_band = abs(d1) >= spec.eta and abs(d2) >= spec.eta
        if outside_band:
            act1, act2 = d1 < 0, d2 < 0
            if act1 and act2:
                a1 = -(spec.K1 + spec.K2) / 4.0
                Xi = np.array([[spec.K1, 1.0], [-spec.K2, 1.0]])
                return TrivialJacobian(JV=JV, a1=a1, a2=0.0, Xi=Xi)
            if act1 and not act2:
                return TrivialJacobian(JV=JV, a1=-spec.K1 / 4.0, a2=0.0,
                                       Xi=np.array([[1.0, 1.0], [0.0, 1.0]]))
            if act2 and not act1:
                return TrivialJacobian(JV=JV, a1=-spec.K2 / 4.0, a2=0.0,
                                       Xi=np.array([[0.0, 1.0], [1.0, 1.0]]))
            # case 1: both tolerant, JV = 0
            return TrivialJacobian(JV=JV, a1=0.0, a2=0.0, Xi=np.eye(2))

    scale = max(np.max(np.abs(JV)), 1.0)
    if np.allclose(JV, JV[0, 0] * np.eye(2), atol=1e-15 * scale):
        # multiple of identity (includes JV = 0): any basis diagonalizes
        a = float(JV[0, 0])
        return TrivialJacobian(JV=JV, a1=a, a2=a, Xi=np.eye(2))

    eigvals, eigvecs = np.linalg.eig(JV)
    if np.max(np.abs(eigvals.imag)) > 1e-12 * scale:
        raise ComplexEigenvalues(
            f"JV(1,1) eigenvalues {eigvals} are not real")
    eigvals = eigvals.real
    eigvecs = eigvecs.real
    if abs(np.linalg.det(eigvecs)) < 1e-10:
        raise DefectiveMatrix("JV(1,1) has no real eigenbasis")
    order = np.argsort(eigvals)
    eigvals = eigvals[order]
    Xi = eigvecs[:, order]
    for c in range(2):
        pivot = Xi[np.argmax(np.abs(Xi[:, c])), c]
        Xi[:, c] /= pivot
    return TrivialJacobian(JV=JV, a1=float(eigvals[0]), a2=float(eigvals[1]),
                           Xi=Xi)


# ---------------------------------------------------------------------------
# monotone numerical Hamiltonian
# ---------------------------------------------------------------------------

def ham_value_fields(spec: HamiltonianSpec, population: int, pl, pr):
    """Godunov flux g(pl, pr) on arrays of one-sided difference quotients."""
    P = np.maximum(pl, 0.0)
    Q = np.minimum(pr, 0.0)
    S = P * P + Q * Q
    if spec.gamma == 2.0:
        return 0.5 * spec.kappa(population) * S
    return 0.5 * S ** (0.5 * spec.gamma)


def ham_grad_fields(spec: HamiltonianSpec, population: int, pl, pr):
    """(dg/dpl, dg/dpr); continuous, vanishing where the upwind parts do."""
    P = np.maximum(pl, 0.0)
    Q = np.minimum(pr, 0.0)
    if spec.gamma == 2.0:
        k = spec.kappa(population)
        return k * P, k * Q
    S = P * P + Q * Q
    with np.errstate(divide="ignore", invalid="ignore"):
        w = np.where(S > 0.0, S ** (0.5 * spec.gamma - 1.0), 0.0)
    return 0.5 * spec.gamma * w * P, 0.5 * spec.gamma * w * Q


def ham_hess_fields(spec: HamiltonianSpec, population: int, pl, pr):
    """Second derivatives (g_ll, g_lr, g_rr) with the symmetric kink rule.

    max(.,0)^2 is C^1 only, so on the kink sets {pl = 0}, {pr = 0} the
    one-sided second derivatives are averaged (weight 1/2); this is the
    unique choice preserving the x -> 1-x equivariance of the assembled
    Jacobian and it reproduces the exact reflected Laplacian in the
    linearized transport at the constant state.
    """
    pl = np.asarray(pl, dtype=float)
    pr = np.asarray(pr, dtype=float)
    tl = np.where(pl > 0.0, 1.0, np.where(pl == 0.0, 0.5, 0.0))
    tr = np.where(pr < 0.0, 1.0, np.where(pr == 0.0, 0.5, 0.0))
    if spec.gamma == 2.0:
        k = spec.kappa(population)
        z = np.zeros_like(tl)
        return k * tl, z, k * tr
    P = np.maximum(pl, 0.0)
    Q = np.minimum(pr, 0.0)
    S = P * P + Q * Q
    g2 = 0.5 * spec.gamma
    with np.errstate(divide="ignore", invalid="ignore"):
        w1 = np.where(S > 0.0, S ** (g2 - 1.0), 0.0)
        w2 = np.where(S > 0.0, S ** (g2 - 2.0), 0.0)
    gll = g2 * (w1 + (spec.gamma - 2.0) * w2 * P * P) * tl
    grr = g2 * (w1 + (spec.gamma - 2.0) * w2 * Q * Q) * tr
    glr = g2 * (spec.gamma - 2.0) * w2 * P * Q
    return gll, glr, grr


def eval_hamiltonian(spec: HamiltonianSpec, p_left: float, p_right: float,
                     population: int = 1) -> float:
    """Numerical Hamiltonian at one pair of difference quotients."""
    if not (np.isfinite(p_left) and np.isfinite(p_right)):
        raise NonFiniteInput("difference quotients must be finite")
    return float(ham_value_fields(spec, population, p_left, p_right))
