"""Analytic layer: Neumann eigenpairs, kernel-equation roots, local branch
parametrization, and an independent linearized-BVP oracle.

All kernel computations run in sigma-folded variables

    lam_t = sigma * lambda,      a_t = kappa * a1 / sigma,

under which the time-coefficient ODE of one diagonalized component reads

    h''(t) = T^2 lam_t (lam_t + a_t) h(t),   h(0) = 0,
    h'(1) + T lam_t h(1) = 0,

and the transcendental kernel condition becomes

    tan(T w0) = -sqrt((-a_t - lam_t)/lam_t),   w0 = sqrt(lam_t (-a_t - lam_t)).

Roots are obtained from the arctan-inverted closed form (no iteration), so
tan poles never enter; kernel_residual exposes the raw residual for tests.
The fourth-order ODE integration below exists purely as an independent
cross-check of those closed forms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ModeOutOfRange, NoNegativeEigenvalue, OutOfBand
from .model import ModelSpec, TrivialJacobian, coupling_fields, trivial_jacobian

RESONANCE_TOL = 1e-9


@dataclass(frozen=True)
class BifurcationPoint:
    """Predicted critical horizon for space mode k and temporal count n."""

    n: int
    k: int
    T_star: float
    omega: float          # temporal frequency sqrt(lambda (-kappa a1 - sigma^2 lambda))
    tau: float            # intrinsic period 2 pi / omega
    direction: np.ndarray  # first column of Xi
    resonant: bool = False


def neumann_eigenvalue(k: int, h: float | None = None) -> float:
    """k-th Neumann eigenvalue of -d^2/dx^2 on (0,1).

    h=None gives the continuum value (k pi)^2; h=1/Nx gives the eigenvalue
    (2/h^2)(1 - cos(k pi h)) of the reflected finite-difference Laplacian.
    """
    if k < 0:
        raise ModeOutOfRange("mode index must be nonnegative")
    if h is None:
        return (k * math.pi) ** 2
    nx = round(1.0 / h)
    if nx < 2 or abs(nx * h - 1.0) > 1e-12:
        raise ModeOutOfRange("discrete mode needs h = 1/Nx with Nx >= 2")
    if k > nx:
        raise ModeOutOfRange(f"mode k={k} exceeds Nx={nx}")
    return 2.0 / h**2 * (1.0 - math.cos(k * math.pi * h))


def eigenfunction(k: int, x):
    """Neumann eigenfunction cos(k pi x) (same in both mode families)."""
    return np.cos(k * math.pi * np.asarray(x, dtype=float))


def _folded(lam: float, a1: float, sigma: float, kappa: float):
    lam_t = sigma * lam
    a_t = kappa * a1 / sigma
    return lam_t, a_t


def _band_check(lam: float, a1: float, sigma: float, kappa: float) -> tuple[float, float]:
    lam_t, a_t = _folded(lam, a1, sigma, kappa)
    if not (lam_t > 0.0 and lam_t + a_t < 0.0):
        raise OutOfBand(
            f"sigma^2*lambda = {sigma * lam_t:.6g} not in (0, {-kappa * a1:.6g}): "
            "mode contributes no kernel")
    return lam_t, a_t


def kernel_omega(lam: float, a1: float, sigma: float, kappa: float = 1.0) -> float:
    """Temporal frequency sqrt(lambda (-kappa a1 - sigma^2 lambda)) of the mode."""
    lam_t, a_t = _band_check(lam, a1, sigma, kappa)
    return math.sqrt(lam_t * (-a_t - lam_t))


def kernel_residual(T: float, lam: float, a1: float, sigma: float,
                    kappa: float = 1.0) -> float:
    """Raw residual tan(T w0) + sqrt((-a_t - lam_t)/lam_t) of the kernel equation.

    Blows up at tan poles by design; root finding uses the arctan-inverted
    closed form instead (see bifurcation_times).
    """
    lam_t, a_t = _band_check(lam, a1, sigma, kappa)
    w0 = math.sqrt(lam_t * (-a_t - lam_t))
    return math.tan(T * w0) + math.sqrt((-a_t - lam_t) / lam_t)


def kernel_time(n: int, lam: float, a1: float, sigma: float,
                kappa: float = 1.0) -> float:
    """n-th positive root T*_{n} of the kernel equation, in closed form."""
    lam_t, a_t = _band_check(lam, a1, sigma, kappa)
    w0 = math.sqrt(lam_t * (-a_t - lam_t))
    return (n * math.pi - math.atan(math.sqrt((-a_t - lam_t) / lam_t))) / w0


def bifurcation_times(tj: TrivialJacobian, sigma: float, n_max: int,
                      k_max: int, h: float | None = None,
                      kappa: float = 1.0) -> list[BifurcationPoint]:
    """All predicted bifurcation points T*_{n,k}, sorted by T_star.

    Modes with sigma^2 lambda_k outside (0, -kappa a1) are skipped (no
    kernel); coincident points within 1e-9 are flagged resonant, since only
    non-resonant kernel times are guaranteed bifurcation points.
    """
    if not kappa * tj.a1 < 0.0:
        raise NoNegativeEigenvalue(
            f"a1 = {tj.a1:.6g}: trivial solution is isolated, no predictions")
    points = []
    for k in range(1, k_max + 1):
        lam = neumann_eigenvalue(k, h)
        lam_t, a_t = _folded(lam, a1=tj.a1, sigma=sigma, kappa=kappa)
        if not (lam_t > 0.0 and lam_t + a_t < 0.0):
            continue
        w0 = math.sqrt(lam_t * (-a_t - lam_t))
        for n in range(1, n_max + 1):
            t_star = (n * math.pi - math.atan(math.sqrt((-a_t - lam_t) / lam_t))) / w0
            points.append(BifurcationPoint(
                n=n, k=k, T_star=t_star, omega=w0, tau=2.0 * math.pi / w0,
                direction=tj.Xi[:, 0].copy()))
    points.sort(key=lambda p: p.T_star)
    flagged = []
    for i, p in enumerate(points):
        res = any(abs(p.T_star - q.T_star) <= RESONANCE_TOL
                  for j, q in enumerate(points) if j != i)
        flagged.append(BifurcationPoint(**{**p.__dict__, "resonant": res}))
    return flagged


def local_guess(bp: BifurcationPoint, eps: float, grid, model: ModelSpec,
                T: float | None = None):
    """Near-bifurcation state: trivial fields plus the kernel-mode perturbation.

    m = (1,1) + eps * cos(k pi x) * Xi [sin(omega T t), 0]^T on the rescaled
    grid (physical time s = T t); u is left at the trivial T(1-t) V(1,1).
    """
    from .discretization import StateVector  # local import to avoid a cycle

    if T is None:
        T = bp.T_star
    state = StateVector.trivial(grid, T, model)
    if eps == 0.0:
        return state
    tj = trivial_jacobian(model.coupling)
    psi = eigenfunction(bp.k, grid.x)                      # (nx+1,)
    wave = np.sin(bp.omega * T * grid.t)[:, None] * psi[None, :]
    state.m1 += eps * tj.Xi[0, 0] * wave
    state.m2 += eps * tj.Xi[1, 0] * wave
    state.m1[0, :] = 1.0
    state.m2[0, :] = 1.0  # sin(0) = 0 up to rounding; pin the constraint
    return state


# ---------------------------------------------------------------------------
# independent ODE oracles (classical fourth-order one-step integration)
# ---------------------------------------------------------------------------

def linearized_bvp_oracle(T, lam: float, a1: float, sigma: float,
                          kappa: float = 1.0, steps: int = 10_000):
    """Robin boundary value h'(1) + T lam_t h(1) of the shooting solution.

    Integrates h'' = T^2 lam_t (lam_t + a_t) h from h(0)=0, h'(0)=1 with a
    fixed-step RK4 (1e-4 by default). Zeros in T are kernel points,
    independently of the closed forms above. Accepts scalar or array T.
    """
    T = np.asarray(T, dtype=float)
    lam_t = sigma * lam
    a_t = kappa * a1 / sigma
    c = T**2 * lam_t * (lam_t + a_t)
    dt = 1.0 / steps
    h = np.zeros_like(T)
    hp = np.ones_like(T)
    for _ in range(steps):
        k1h, k1p = hp, c * h
        k2h, k2p = hp + 0.5 * dt * k1p, c * (h + 0.5 * dt * k1h)
        k3h, k3p = hp + 0.5 * dt * k2p, c * (h + 0.5 * dt * k2h)
        k4h, k4p = hp + dt * k3p, c * (h + dt * k3h)
        h = h + dt / 6.0 * (k1h + 2 * k2h + 2 * k3h + k4h)
        hp = hp + dt / 6.0 * (k1p + 2 * k2p + 2 * k3p + k4p)
    out = hp + T * lam_t * h
    return float(out) if out.ndim == 0 else out


def transversality_check(bp: BifurcationPoint, a1: float, lam: float,
                         sigma: float, kappa: float = 1.0,
                         steps: int = 10_000) -> tuple[float, float]:
    """Both sides of the crossing identity at a kernel point.

    Solves the inhomogeneous BVP

        w'' = T^2 lam_t^2 w - 2 T (lam_t + a_t) lam_t sin(omega t),
        w(0) = 0,  w'(1) + T lam_t w(1) = lam_t sin(omega),

    by shooting (particular + homogeneous RK4 runs), then returns

        lhs = -T^2 a_t * integral_0^1 w(t) sin(omega t) dt,
        rhs = T (lam_t + a_t).

    The caller asserts lhs == rhs (Fredholm pairing) and rhs < 0, which is
    the transversal-crossing condition making T_star a true bifurcation.
    """
    lam_t, a_t = _band_check(lam, a1, sigma, kappa)
    T = bp.T_star
    omega = T * math.sqrt(lam_t * (-a_t - lam_t))  # phase rate in rescaled time
    c_h = T**2 * lam_t**2
    forcing = -2.0 * T * (lam_t + a_t) * lam_t

    dt = 1.0 / steps

    def rhs(t, y):
        # y = (w, w', wh, wh', Iw, Ih)
        s = math.sin(omega * t)
        return np.array([
            y[1], c_h * y[0] + forcing * s,
            y[3], c_h * y[2],
            y[0] * s, y[2] * s,
        ])

    y = np.zeros(6)
    y[3] = 1.0  # homogeneous run starts with slope one
    t = 0.0
    for _ in range(steps):
        k1 = rhs(t, y)
        k2 = rhs(t + 0.5 * dt, y + 0.5 * dt * k1)
        k3 = rhs(t + 0.5 * dt, y + 0.5 * dt * k2)
        k4 = rhs(t + dt, y + dt * k3)
        y = y + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        t += dt
    w1, wp1, wh1, whp1, Iw, Ih = y
    denom = whp1 + T * lam_t * wh1
    if abs(denom) < 1e-12:
        from .errors import BvpSolveFailure
        raise BvpSolveFailure("homogeneous Robin value vanished; shooting failed")
    c = (lam_t * math.sin(omega) - (wp1 + T * lam_t * w1)) / denom
    integral = Iw + c * Ih
    lhs = -(T**2) * a_t * integral
    rhs_val = T * (lam_t + a_t)
    return lhs, rhs_val


def trivial_value_rate(model: ModelSpec) -> tuple[float, float]:
    """V_i(1,1): the slope of the trivial value functions u_i = (T-s)V_i(1,1)."""
    v1, v2 = coupling_fields(model.coupling, 1.0, 1.0)
    return float(v1), float(v2)
