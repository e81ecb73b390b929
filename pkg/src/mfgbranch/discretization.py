"""Space-time grid, scheme residual, and its analytic sparse Jacobian.

The rescaled system lives on the fixed unit square: x_j = j h (h = 1/Nx),
t_n = n dt (dt = 1/Nt), with the horizon T entering only as an equation
coefficient. Full variables (u_i, m_i) are used, so the constant state

    u_i = T (1 - t) V_i(1,1),   m_i = 1

is an exact discrete solution for every T.

Scheme (population i, rows weighted by the trapezoid quadrature w_j;
A_i(u) := -sigma Lap_h u + g_i(D-u, D+u) is the spatial HJB operator and
P_i(u, m) := -sigma Lap_h m + W^{-1} B_i(u)^T W m the spatial FP operator,
with B(u) = d(g-vector)/d(u-vector) the Jacobian of the monotone
Hamiltonian values):

  HJB, backward in time, rows n = 0..Nt-1
      -(u^{n+1}-u^n)/(T dt) + [A_i(u^n)+A_i(u^{n+1})]/2
          - [V_i(m^n)+V_i(m^{n+1})]/2 = 0
  FP, forward in time
      (m^{n+1}-m^n)/(T dt) + [P_i(u^n,m^n)+P_i(u^{n+1},m^{n+1})]/2 = 0

Both time integrals use the trapezoid (Crank-Nicolson) rule. A fully
implicit first-order pairing was built first, but its kernel-detection
horizons carry an O(dt) phase shift growing like T^2 (the composed
linearization is a centered second difference scaled by 1+sigma*lam*T*dt),
which moves the n-th collapse endpoint by ~0.1 at Nt=100 for n=3; the
trapezoid coupling brings the shift down to O(dt^2) (~1e-3) so branch
endpoints land on the kernel times of the spatially discretized system.

Defining the FP transport through the weighted transpose of the HJB
transport linearization makes the trapezoid mass of each density exactly
constant in time (column sums of the weighted operator vanish because g
depends on u only through differences), and the implicit side of each FP
slab keeps its M-matrix sign pattern, so converged densities stay
nonnegative in practice.

Neumann walls use even-reflection ghosts (u_{-1} = u_1) for the Laplacian
and the upwind differences alike; this keeps Lap_h second order at the
walls and makes the trivial-state Jacobian decouple exactly over the
discrete cosine modes cos(k pi x_j).

Unknown ordering is field-major (u1, u2, m1, m2), then time-major, then
space; u carries levels 0..Nt-1 (u^{Nt} = 0 fixed) and m levels 1..Nt
(m^0 = 1 fixed), so each field block has Nt*(Nx+1) slots.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import NonFiniteState
from .model import (
    ModelSpec,
    coupling_fields,
    coupling_jacobian_fields,
    ham_grad_fields,
    ham_hess_fields,
    ham_value_fields,
)

#: the spec's SparseOperator: row-compressed pattern + values
SparseOperator = sp.csr_matrix


@dataclass(frozen=True)
class Grid:
    """Uniform mesh on (0,1) x (0,1) in rescaled variables."""

    nx: int
    nt: int

    def __post_init__(self):
        if self.nx < 8 or self.nt < 8:
            raise ValueError("grid needs Nx >= 8 and Nt >= 8")

    @property
    def h(self) -> float:
        return 1.0 / self.nx

    @property
    def dt(self) -> float:
        return 1.0 / self.nt

    @property
    def x(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.nx + 1)

    @property
    def t(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.nt + 1)

    @property
    def weights(self) -> np.ndarray:
        """Trapezoid quadrature weights over space nodes."""
        w = np.full(self.nx + 1, self.h)
        w[0] = w[-1] = 0.5 * self.h
        return w

    @property
    def n_unknowns(self) -> int:
        return 4 * self.nt * (self.nx + 1)


@dataclass
class StateVector:
    """The four discrete fields on the full grid, shape (Nt+1, Nx+1) each."""

    grid: Grid
    u1: np.ndarray
    u2: np.ndarray
    m1: np.ndarray
    m2: np.ndarray

    @classmethod
    def trivial(cls, grid: Grid, T: float, model: ModelSpec) -> "StateVector":
        v1, v2 = coupling_fields(model.coupling, 1.0, 1.0)
        shape = (grid.nt + 1, grid.nx + 1)
        col = (T * (1.0 - grid.t))[:, None]
        return cls(grid=grid,
                   u1=np.broadcast_to(col * float(v1), shape).copy(),
                   u2=np.broadcast_to(col * float(v2), shape).copy(),
                   m1=np.ones(shape), m2=np.ones(shape))

    def copy(self) -> "StateVector":
        return StateVector(self.grid, self.u1.copy(), self.u2.copy(),
                           self.m1.copy(), self.m2.copy())

    def fields(self):
        return (self.u1, self.u2, self.m1, self.m2)

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(f)) for f in self.fields())

    def max_deviation(self) -> float:
        """max_i ||m_i - 1||_inf, the distance from the trivial branch."""
        return max(float(np.max(np.abs(self.m1 - 1.0))),
                   float(np.max(np.abs(self.m2 - 1.0))))

    def reflected(self) -> "StateVector":
        """The x -> 1-x mirror of the state."""
        return StateVector(self.grid, self.u1[:, ::-1].copy(),
                           self.u2[:, ::-1].copy(), self.m1[:, ::-1].copy(),
                           self.m2[:, ::-1].copy())


def pack(state: StateVector) -> np.ndarray:
    """Flatten the unknown slices (u levels 0..Nt-1, m levels 1..Nt)."""
    return np.concatenate([
        state.u1[:-1].ravel(), state.u2[:-1].ravel(),
        state.m1[1:].ravel(), state.m2[1:].ravel()])


def unpack(grid: Grid, y: np.ndarray) -> StateVector:
    """Rebuild a StateVector from unknowns, pinning m^0 = 1 and u^{Nt} = 0."""
    nb = grid.nt * (grid.nx + 1)
    shape = (grid.nt, grid.nx + 1)
    full = (grid.nt + 1, grid.nx + 1)
    u1 = np.zeros(full)
    u2 = np.zeros(full)
    m1 = np.ones(full)
    m2 = np.ones(full)
    u1[:-1] = y[0 * nb:1 * nb].reshape(shape)
    u2[:-1] = y[1 * nb:2 * nb].reshape(shape)
    m1[1:] = y[2 * nb:3 * nb].reshape(shape)
    m2[1:] = y[3 * nb:4 * nb].reshape(shape)
    return StateVector(grid, u1, u2, m1, m2)


# ---------------------------------------------------------------------------
# per-level difference operators (even-reflection ghosts)
# ---------------------------------------------------------------------------

def _pl(u: np.ndarray, h: float) -> np.ndarray:
    """Backward differences D- along the last axis; ghost u_{-1} = u_1."""
    out = np.empty_like(u)
    out[..., 1:] = (u[..., 1:] - u[..., :-1]) / h
    out[..., 0] = (u[..., 0] - u[..., 1]) / h
    return out


def _pr(u: np.ndarray, h: float) -> np.ndarray:
    """Forward differences D+ along the last axis; ghost u_{Nx+1} = u_{Nx-1}."""
    out = np.empty_like(u)
    out[..., :-1] = (u[..., 1:] - u[..., :-1]) / h
    out[..., -1] = (u[..., -2] - u[..., -1]) / h
    return out


def _lap(u: np.ndarray, h: float) -> np.ndarray:
    """Reflected Neumann Laplacian along the last axis (second order)."""
    out = np.empty_like(u)
    out[..., 1:-1] = (u[..., 2:] - 2.0 * u[..., 1:-1] + u[..., :-2]) / h**2
    out[..., 0] = 2.0 * (u[..., 1] - u[..., 0]) / h**2
    out[..., -1] = 2.0 * (u[..., -2] - u[..., -1]) / h**2
    return out


def _aplT(y: np.ndarray, h: float) -> np.ndarray:
    """Apply (D-)^T along the last axis (adjoint of _pl)."""
    out = y / h
    out[..., :-1] -= y[..., 1:] / h
    out[..., 1] -= y[..., 0] / h  # wall row 0 differentiates against u_1
    return out


def _aprT(y: np.ndarray, h: float) -> np.ndarray:
    """Apply (D+)^T along the last axis (adjoint of _pr)."""
    out = -y / h
    out[..., 1:] += y[..., :-1] / h
    out[..., -2] += y[..., -1] / h  # wall row Nx differentiates against u_{Nx-1}
    return out


def _transport(gl: np.ndarray, gr: np.ndarray, m: np.ndarray,
               w: np.ndarray, h: float) -> np.ndarray:
    """W^{-1} B^T W m with B = diag(gl) D- + diag(gr) D+ (per time level)."""
    return (_aplT(gl * w * m, h) + _aprT(gr * w * m, h)) / w


# ---------------------------------------------------------------------------
# residual
# ---------------------------------------------------------------------------

def assemble_residual(state: StateVector, T: float, model: ModelSpec,
                      grid: Grid) -> np.ndarray:
    """Weighted scheme residual over all unknown rows; zero iff solved."""
    if not state.is_finite():
        raise NonFiniteState("state contains non-finite entries")
    h, dt, w = grid.h, grid.dt, grid.weights
    sig = model.sigma
    v1, v2 = coupling_fields(model.coupling, state.m1, state.m2)
    blocks_u, blocks_m = [], []
    for i, (u, m, v) in enumerate(((state.u1, state.m1, v1),
                                   (state.u2, state.m2, v2)), start=1):
        pl = _pl(u, h)
        pr = _pr(u, h)
        g = ham_value_fields(model.hamiltonian, i, pl, pr)
        a_op = -sig * _lap(u, h) + g - v
        hjb = -(u[1:] - u[:-1]) / (T * dt) + 0.5 * (a_op[1:] + a_op[:-1])
        gl, gr = ham_grad_fields(model.hamiltonian, i, pl, pr)
        p_op = -sig * _lap(m, h) + _transport(gl, gr, m, w, h)
        fp = (m[1:] - m[:-1]) / (T * dt) + 0.5 * (p_op[1:] + p_op[:-1])
        blocks_u.append((w * hjb).ravel())
        blocks_m.append((w * fp).ravel())
    return np.concatenate(blocks_u + blocks_m)


def residual_T_derivative(state: StateVector, T: float, model: ModelSpec,
                          grid: Grid) -> np.ndarray:
    """Analytic dF/dT (only the 1/T factors depend on the horizon)."""
    dt, w = grid.dt, grid.weights
    parts = []
    for u in (state.u1, state.u2):
        parts.append((w * (u[1:] - u[:-1]) / (T**2 * dt)).ravel())
    for m in (state.m1, state.m2):
        parts.append((w * -(m[1:] - m[:-1]) / (T**2 * dt)).ravel())
    return np.concatenate(parts)


# ---------------------------------------------------------------------------
# Jacobian
# ---------------------------------------------------------------------------

def _wall_cols(nx: int):
    """Column index pairs of the two-entry rows of D- and D+.

    D- row j: +1/h at apl_p[j], -1/h at apl_m[j]; same for D+ with apr_*.
    The wall rows reference the reflected interior neighbour.
    """
    j = np.arange(nx + 1)
    apl_p = j.copy()
    apl_m = np.maximum(j - 1, 0)
    apl_m[0] = 1
    apr_p = np.minimum(j + 1, nx)
    apr_p[nx] = nx - 1
    apr_m = j.copy()
    return apl_p, apl_m, apr_p, apr_m


def assemble_jacobian(state: StateVector, T: float, model: ModelSpec,
                      grid: Grid) -> SparseOperator:
    """Exact derivative of assemble_residual w.r.t. the unknown vector.

    Each trapezoid level l = 0..Nt contributes half its spatial operator
    derivative to the residual rows of slabs l-1 and l; columns at the
    fixed levels (u^{Nt}, m^0) are skipped.
    """
    if not state.is_finite():
        raise NonFiniteState("state contains non-finite entries")
    nx, nt = grid.nx, grid.nt
    S = nx + 1
    nb = nt * S
    h, dt, w = grid.h, grid.dt, grid.weights
    sig = model.sigma
    off = {"u1": 0, "u2": nb, "m1": 2 * nb, "m2": 3 * nb}

    apl_p, apl_m, apr_p, apr_m = _wall_cols(nx)
    J = np.arange(S)[None, :]

    rows, cols, vals = [], [], []

    def emit(r, c, v):
        r, c, v = np.broadcast_arrays(r, c, v)
        rows.append(r.ravel())
        cols.append(c.ravel())
        vals.append(np.ascontiguousarray(v, dtype=float).ravel())

    # -sigma*Lap stencil coefficients (shared by both field families)
    lap_diag = np.full(S, 2.0 * sig / h**2)
    lap_left = np.full(S, -sig / h**2)   # coefficient of x_{j-1}, rows 1..nx
    lap_left[nx] = -2.0 * sig / h**2
    lap_right = np.full(S, -sig / h**2)  # coefficient of x_{j+1}, rows 0..nx-1
    lap_right[0] = -2.0 * sig / h**2

    jac_cpl = coupling_jacobian_fields(model.coupling, state.m1, state.m2)
    jrow = {1: (jac_cpl[0], jac_cpl[1]), 2: (jac_cpl[2], jac_cpl[3])}

    grad_fams = lambda gl, gr: ((apl_p, gl, 1.0), (apl_m, gl, -1.0),
                                (apr_p, gr, 1.0), (apr_m, gr, -1.0))

    def emit_lap(rowbase, colbase, scale):
        """-sigma*Lap rows of one trapezoid side (scale includes w and 1/2)."""
        ones = np.ones((rowbase.shape[0], 1))
        emit(rowbase + J, colbase + J, scale * lap_diag * ones)
        emit(rowbase + J[:, 1:], colbase + (J[:, 1:] - 1),
             (scale * lap_left)[None, 1:] * ones)
        emit(rowbase + J[:, :-1], colbase + (J[:, :-1] + 1),
             (scale * lap_right)[None, :-1] * ones)

    for i, (u, m) in enumerate(((state.u1, state.m1), (state.u2, state.m2)),
                               start=1):
        ukey, mkey = f"u{i}", f"m{i}"
        pl = _pl(u, h)
        pr = _pr(u, h)
        gl, gr = ham_grad_fields(model.hamiltonian, i, pl, pr)
        gll, glr, grr = ham_hess_fields(model.hamiltonian, i, pl, pr)
        wm = w * m  # per level, used by the bilinear transport block

        slabs = np.arange(nt)[:, None] * S
        urow = off[ukey] + slabs + J          # HJB rows, (nt, S)
        mrow = off[mkey] + slabs + J          # FP rows for m^{n+1}

        # --- time differences -------------------------------------------
        emit(urow, urow, w / (T * dt) * np.ones((nt, S)))
        emit(urow[:-1], urow[1:], -w / (T * dt) * np.ones((nt - 1, S)))
        emit(mrow, mrow, w / (T * dt) * np.ones((nt, S)))
        emit(mrow[1:], mrow[:-1], -w / (T * dt) * np.ones((nt - 1, S)))

        # --- trapezoid level contributions -------------------------------
        # each level l = n (side 0) or l = n+1 (side 1) feeds row slab n
        for side in (0, 1):
            lev_idx = np.arange(nt) + side     # level paired with each slab
            if side == 1:
                usel = slice(0, nt - 1)        # u^{Nt} is fixed data
                msel = slice(None)
            else:
                usel = slice(None)
                msel = slice(1, nt)            # m^0 is fixed data

            # HJB rows: -sigma*Lap u + dg/du at this level
            rb = slabs[usel]
            cb = (lev_idx[usel])[:, None] * S
            emit_lap(off[ukey] + rb, off[ukey] + cb, 0.5 * w)
            for colarr, g_arr, sgn in grad_fams(gl, gr):
                emit(off[ukey] + rb + J, off[ukey] + cb + colarr[None, :],
                     0.5 * w * sgn * g_arr[lev_idx[usel]] / h)

            # HJB rows: coupling block -JV/2 at the level's m columns
            # (m-level l is stored at slot l-1)
            rbm = slabs[msel]
            cbm = (lev_idx[msel] - 1)[:, None] * S
            j1, j2 = jrow[i]
            emit(off[ukey] + rbm + J, off["m1"] + cbm + J,
                 -0.5 * w * j1[lev_idx[msel]])
            emit(off[ukey] + rbm + J, off["m2"] + cbm + J,
                 -0.5 * w * j2[lev_idx[msel]])

            # FP rows: -sigma*Lap m + (B^T W)/W at the level's m columns
            emit_lap(off[mkey] + rbm, off[mkey] + cbm, 0.5 * w)
            for colarr, g_arr, sgn in grad_fams(gl, gr):
                # (B^T W)[j, l] entries enumerated over the source l = J
                emit(off[mkey] + rbm + colarr[None, :], off[mkey] + cbm + J,
                     0.5 * w * sgn * g_arr[lev_idx[msel]] / h)

            # FP rows: bilinear transport u-block at this level,
            # d(B^T W m)_j/du_p = sum_l w_l m_l [(gll Apl[l,p]+glr Apr[l,p]) Apl[l,j]
            #                                  + (glr Apl[l,p]+grr Apr[l,p]) Apr[l,j]]
            lev_u = lev_idx[usel]
            rb = slabs[usel]
            cb = lev_u[:, None] * S
            wm_lev = wm[lev_u]
            pl_entries = ((apl_p, 1.0), (apl_m, -1.0))
            pr_entries = ((apr_p, 1.0), (apr_m, -1.0))
            for hterm, row_fam, col_fam in ((gll[lev_u], pl_entries, pl_entries),
                                            (glr[lev_u], pl_entries, pr_entries),
                                            (glr[lev_u], pr_entries, pl_entries),
                                            (grr[lev_u], pr_entries, pr_entries)):
                for cj, sj in row_fam:
                    for cp, sp_ in col_fam:
                        emit(off[mkey] + rb + cj[None, :],
                             off[ukey] + cb + cp[None, :],
                             0.5 * wm_lev * hterm * (sj * sp_ / h**2))

    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    vals = np.concatenate(vals)
    n = grid.n_unknowns
    return sp.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()


# ---------------------------------------------------------------------------
# guess preparation
# ---------------------------------------------------------------------------

def hjb_backward_sweep(state: StateVector, T: float, model: ModelSpec,
                       grid: Grid, tol: float = 1e-11,
                       max_iters: int = 30) -> StateVector:
    """Replace the u-fields by the backward HJB solution for the given m.

    Marches the trapezoid HJB rows level by level from the final condition,
    with a small tridiagonal Newton solve per level. Used to build initial
    guesses whose value functions are consistent with a prescribed density
    perturbation (a bare density guess with constant-in-x u sits in the
    trivial solution's Newton basin).
    """
    from scipy.linalg import solve_banded

    out = state.copy()
    h, dt, sig = grid.h, grid.dt, model.sigma
    nx = grid.nx
    v1, v2 = coupling_fields(model.coupling, out.m1, out.m2)
    for i, (u, v) in enumerate(((out.u1, v1), (out.u2, v2)), start=1):
        u[-1] = 0.0
        for n in range(grid.nt - 1, -1, -1):
            up1 = u[n + 1]
            pl1 = _pl(up1[None, :], h)[0]
            pr1 = _pr(up1[None, :], h)[0]
            g1 = ham_value_fields(model.hamiltonian, i, pl1, pr1)
            known = 0.5 * (-sig * _lap(up1[None, :], h)[0] + g1 - v[n + 1])
            un = up1.copy()
            for _ in range(max_iters):
                pl = _pl(un[None, :], h)[0]
                pr = _pr(un[None, :], h)[0]
                g = ham_value_fields(model.hamiltonian, i, pl, pr)
                res = (-(up1 - un) / (T * dt) + known
                       + 0.5 * (-sig * _lap(un[None, :], h)[0] + g - v[n]))
                if np.max(np.abs(res)) < tol:
                    break
                gl, gr = ham_grad_fields(model.hamiltonian, i, pl, pr)
                ab = np.zeros((3, nx + 1))
                ab[1] = (1.0 / (T * dt)
                         + 0.5 * (2.0 * sig / h**2 + (gl - gr) / h))
                ab[0, 1:] = 0.5 * (-sig / h**2 + gr[:-1] / h)
                ab[0, 1] += 0.5 * (-sig / h**2 - gl[0] / h)   # wall row 0
                ab[2, :-1] = 0.5 * (-sig / h**2 - gl[1:] / h)
                ab[2, nx - 1] += 0.5 * (-sig / h**2 + gr[nx] / h)  # wall row Nx
                un = un + solve_banded((1, 1), ab, -res)
            u[n] = un
    return out


# ---------------------------------------------------------------------------
# diagnostics
# ---------------------------------------------------------------------------

def mass_vector(state: StateVector, grid: Grid) -> np.ndarray:
    """Trapezoid space integrals of each density per time level, shape (2, Nt+1)."""
    w = grid.weights
    return np.stack([state.m1 @ w, state.m2 @ w])


def cosine_projection(m_field: np.ndarray, grid: Grid, k: int) -> np.ndarray:
    """Time series of integral psi_k(x) (m(x,t) - 1) dx (trapezoid in space)."""
    psi = np.cos(k * math.pi * grid.x)
    return (m_field - 1.0) @ (grid.weights * psi)


def reduced_mode_matrix(T: float, lam: float, a: float, sigma: float,
                        nt: int) -> np.ndarray:
    """Trivial-state linearization of the scheme for one diagonalized mode.

    Unknowns (v^0..v^{Nt-1}, z^1..z^{Nt}) of one cosine mode after the
    eigenbasis transformation; v^{Nt} = 0 and z^0 = 0 are the structural
    conditions. Singularity in T marks the scheme's own kernel times.
    """
    eps = T / nt
    s = sigma * lam
    n2 = 2 * nt
    A = np.zeros((n2, n2))

    def vi(n):
        return n

    def zi(n):
        return nt + n - 1

    e = 1.0 / eps
    for n in range(nt):
        r = vi(n)  # HJB slab n
        A[r, vi(n)] += e + 0.5 * s
        if n + 1 <= nt - 1:
            A[r, vi(n + 1)] += -e + 0.5 * s
        if n >= 1:
            A[r, zi(n)] += -0.5 * a
        A[r, zi(n + 1)] += -0.5 * a
        r = nt + n  # FP slab n
        A[r, zi(n + 1)] += e + 0.5 * s
        if n >= 1:
            A[r, zi(n)] += -e + 0.5 * s
        if n <= nt - 1:
            A[r, vi(n)] += 0.5 * lam
        if n + 1 <= nt - 1:
            A[r, vi(n + 1)] += 0.5 * lam
    return A


def scheme_kernel_time(n: int, lam: float, a1: float, sigma: float,
                       nt: int, bracket: tuple[float, float] | None = None,
                       kappa: float = 1.0) -> float:
    """Kernel time of the *time-discretized* linearization.

    Bisects the determinant sign of the reduced mode system; this is where
    branches of the discrete system meet the trivial one on an Nt-level
    grid. Converges to the continuous-lambda kernel time at O(dt^2).
    """
    a = kappa * a1
    w0sq = lam * (-a - sigma**2 * lam)
    if w0sq <= 0:
        raise ValueError("mode outside the kernel band")
    if bracket is None:
        t0 = (n * math.pi - math.atan(math.sqrt(w0sq) / (sigma * lam))) \
            / math.sqrt(w0sq)
        width = max(0.05, 0.2 * t0**2 * sigma * lam / nt)
        bracket = (max(t0 - width, 1e-6), t0 + width)

    def detsign(T):
        sign, _ = np.linalg.slogdet(reduced_mode_matrix(T, lam, a, sigma, nt))
        return sign

    lo_all, hi_all = bracket
    ts = np.linspace(lo_all, hi_all, 80)
    signs = [detsign(t) for t in ts]
    lo = hi = None
    for i in range(len(ts) - 1):
        if signs[i] != signs[i + 1]:
            lo, hi = float(ts[i]), float(ts[i + 1])
            break
    if lo is None:
        raise ValueError(f"no determinant sign change in bracket {bracket}")
    slo = detsign(lo)
    while hi - lo > 1e-12:
        mid = 0.5 * (lo + hi)
        if detsign(mid) != slo:
            hi = mid
        else:
            lo = mid
    return 0.5 * (lo + hi)
