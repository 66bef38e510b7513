"""Finite-volume discretizations on periodic 2D grids and a 1D CVI slab.

Cells are stored row-major with flat index ``i + nx * j``.  Every stencil goes
through :func:`imdiff.tensor.stencil_apply`, so one stencil application is one
tape node even when its coefficients are learned.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Protocol

import numpy as np

from . import tensor as T
from .krylov import LinearOperator, conjugate_gradient, jacobi_iterate
from .tensor import Tensor

__all__ = [
    "Grid2D", "CoeffFields", "advdiff_stencil", "apply_stencil", "advdiff_rhs",
    "advdiff_matrix", "burgers_rhs", "crank_nicolson_residual",
    "Grid1D", "CviConstants", "CviOps", "TruthCviOps", "CviState",
    "laplacian_dirichlet", "cvi_molarity_residual", "cvi_porosity_step",
    "solve_molarity", "cvi_rollout",
]

# stencil row order used throughout: centre, east, west, north, south
C, E, W, N, S = range(5)


@dataclass(frozen=True)
class Grid2D:
    nx: int
    ny: int
    lx: float = 2.0
    ly: float = 1.0

    def __post_init__(self):
        if self.nx < 4 or self.ny < 4:
            raise ValueError(f"grid must be at least 4x4, got {self.nx}x{self.ny}")
        if self.lx <= 0 or self.ly <= 0:
            raise ValueError("domain lengths must be positive")

    @property
    def n(self) -> int:
        return self.nx * self.ny

    @property
    def dx(self) -> float:
        return self.lx / self.nx

    @property
    def dy(self) -> float:
        return self.ly / self.ny

    @cached_property
    def neighbors(self) -> np.ndarray:
        """(5, n) periodic neighbor table in the order C, E, W, N, S."""
        i, j = np.meshgrid(np.arange(self.nx), np.arange(self.ny), indexing="xy")
        i, j = i.reshape(-1), j.reshape(-1)
        flat = lambda a, b: (a % self.nx) + self.nx * (b % self.ny)  # noqa: E731
        return np.stack([flat(i, j), flat(i + 1, j), flat(i - 1, j),
                         flat(i, j + 1), flat(i, j - 1)])

    def centers(self) -> tuple[np.ndarray, np.ndarray]:
        """Physical cell-centre coordinates, each of shape (n,)."""
        x = (np.arange(self.nx) + 0.5) * self.dx
        y = (np.arange(self.ny) + 0.5) * self.dy
        X, Y = np.meshgrid(x, y, indexing="xy")
        return X.reshape(-1), Y.reshape(-1)

    def normalized_centers(self) -> np.ndarray:
        """Cell centres mapped to [-1, 1] per axis, shape (n, 2)."""
        x, y = self.centers()
        return np.stack([2.0 * x / self.lx - 1.0, 2.0 * y / self.ly - 1.0], axis=1)

    def to_2d(self, values) -> np.ndarray:
        """(..., n) -> (..., ny, nx)."""
        v = np.asarray(values)
        return v.reshape(*v.shape[:-1], self.ny, self.nx)


@dataclass
class CoeffFields:
    """Advection velocities per cell and a diffusivity (scalar or per cell)."""
    ux: object
    uy: object
    k: object = 0.0


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def advdiff_stencil(coeffs: CoeffFields, grid: Grid2D) -> Tensor:
    """Assemble the (5, n) coefficient table of the advection-diffusion operator.

    Advection is in advective form, upwinded by the sign of the face velocity
    (face value = mean of the two adjacent cells).  Diffusion is second-order
    central.  A uniform state is mapped to zero for any velocity field.
    """
    nb = grid.neighbors
    ux, uy = _t(coeffs.ux), _t(coeffs.uy)
    k = _t(coeffs.k)
    dx, dy = grid.dx, grid.dy
    ue = 0.5 * (ux + T.take(ux, nb[E]))
    uw = 0.5 * (ux + T.take(ux, nb[W]))
    un = 0.5 * (uy + T.take(uy, nb[N]))
    us = 0.5 * (uy + T.take(uy, nb[S]))
    # -[max(u_w,0)(phi - phi_W) + min(u_e,0)(phi_E - phi)] / dx, same along y
    pw, me = T.relu(uw), T.relu(-ue)
    ps, mn = T.relu(us), T.relu(-un)
    kx, ky = k * (1.0 / dx ** 2), k * (1.0 / dy ** 2)
    ones = np.ones(grid.n)
    centre = -(pw + me) * (1.0 / dx) - (ps + mn) * (1.0 / dy) - 2.0 * (kx + ky) * ones
    east = me * (1.0 / dx) + kx * ones
    west = pw * (1.0 / dx) + kx * ones
    north = mn * (1.0 / dy) + ky * ones
    south = ps * (1.0 / dy) + ky * ones
    return T.stack([centre, east, west, north, south])


def apply_stencil(phi, stencil, grid: Grid2D) -> Tensor:
    return T.stencil_apply(phi, grid.neighbors, stencil)


def advdiff_rhs(phi, coeffs: CoeffFields, grid: Grid2D) -> Tensor:
    """Semi-discrete right-hand side ``-u.grad(phi) + k lap(phi)``."""
    return apply_stencil(phi, advdiff_stencil(coeffs, grid), grid)


def advdiff_matrix(coeffs: CoeffFields, grid: Grid2D) -> np.ndarray:
    """Dense (n, n) matrix of the linear operator; for tests and small grids."""
    st = advdiff_stencil(CoeffFields(_t(coeffs.ux).data, _t(coeffs.uy).data,
                                     _t(coeffs.k).data), grid).data
    A = np.zeros((grid.n, grid.n))
    rows = np.arange(grid.n)
    for m in range(5):
        np.add.at(A, (rows, grid.neighbors[m]), st[m])
    return A


def burgers_rhs(u, nu, grid: Grid2D) -> Tensor:
    """Scalar Burgers ``-u u_x - u u_y + nu lap(u)`` in conservative form.

    Convective face flux ``a * u_up / 2`` with ``a`` the mean of the adjacent
    cells and ``u_up`` taken from the upwind side of ``a``; diffusive face
    flux ``nu_f (u_E - u) / dx`` with ``nu_f`` the arithmetic face mean.
    """
    nb = grid.neighbors
    u, nu = _t(u), _t(nu)
    out = None
    for fwd, back, h in ((E, W, grid.dx), (N, S, grid.dy)):
        u_f = T.take(u, nb[fwd])
        a = 0.5 * (u + u_f)
        up = T.where(a.data > 0.0, u, u_f)
        conv = 0.5 * a * up
        nu_f = 0.5 * (nu + T.take(nu, nb[fwd]))
        diff = nu_f * (u_f - u) * (1.0 / h)
        flux = diff - conv
        term = (flux - T.take(flux, nb[back])) * (1.0 / h)
        out = term if out is None else out + term
    return out


def crank_nicolson_residual(phi_next, phi_curr, dt: float, rhs_fn: Callable,
                            rhs_fn_curr: Callable | None = None) -> Tensor:
    """``phi_next - phi_curr - dt/2 (F(phi_next) + F(phi_curr))``.

    ``rhs_fn_curr`` allows a different operator at the old time level (time
    dependent coefficients); it defaults to ``rhs_fn``.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    rhs_curr = (rhs_fn_curr or rhs_fn)(phi_curr)
    return phi_next - phi_curr - (0.5 * dt) * (rhs_fn(phi_next) + rhs_curr)


# ------------------------------------------------------------------ CVI (1D)

@dataclass(frozen=True)
class Grid1D:
    n: int = 32
    length: float = 1.0

    @property
    def dx(self) -> float:
        return self.length / self.n

    def centers(self) -> np.ndarray:
        return (np.arange(self.n) + 0.5) * self.dx

    @cached_property
    def stencil(self):
        """Neighbor table (3, n) in order self, east, west, and unit coefficients.

        Boundary cells use a ghost value ``2 c_b - C`` so their stencil reads
        ``(C_E - 3 C + 2 c_b) / dx^2``; the ``2 c_b`` part is returned separately.
        """
        n = self.n
        idx = np.arange(n)
        nb = np.stack([idx, np.minimum(idx + 1, n - 1), np.maximum(idx - 1, 0)])
        c = np.stack([-2.0 * np.ones(n), np.ones(n), np.ones(n)])
        c[0, 0] = c[0, -1] = -3.0
        c[2, 0] = 0.0
        c[1, -1] = 0.0
        return nb, c / self.dx ** 2


@dataclass(frozen=True)
class CviConstants:
    """Nondimensional CVI constants; ``c_left``/``c_right`` are the inlet molarities."""
    q: float = 1.0
    Ms: float = 1.0
    rho_s: float = 1.0
    c_left: float = 1.0
    c_right: float = 1.0
    eps_min: float = 1e-4


class CviOps(Protocol):
    def deff(self, eps: Tensor) -> Tensor: ...
    def k(self, eps: Tensor) -> Tensor: ...
    def sv(self, eps: Tensor) -> Tensor: ...


@dataclass(frozen=True)
class TruthCviOps:
    """Synthetic closure ``D = D0 eps^1.5``, ``S_v = S0 eps (1 - eps)``, ``K = K0``."""
    D0: float = 1.0
    S0: float = 40.0
    K0: float = 1.0

    def deff(self, eps):
        return self.D0 * T.power(_t(eps), 1.5)

    def sv(self, eps):
        eps = _t(eps)
        return self.S0 * eps * (1.0 - eps)

    def k(self, eps):
        return self.K0 * T.constant(np.ones(_t(eps).shape))


@dataclass
class CviState:
    C: np.ndarray
    eps: np.ndarray
    constants: CviConstants = field(default_factory=CviConstants)


def laplacian_dirichlet(Cm, grid: Grid1D, c_left: float, c_right: float) -> Tensor:
    nb, coef = grid.stencil
    bvec = np.zeros(grid.n)
    bvec[0] = 2.0 * c_left / grid.dx ** 2
    bvec[-1] = 2.0 * c_right / grid.dx ** 2
    return T.stencil_apply(Cm, nb, coef) + bvec


def _molarity_residual(Cm, D, R, grid: Grid1D, const: CviConstants) -> Tensor:
    return D * laplacian_dirichlet(Cm, grid, const.c_left, const.c_right) - R * Cm


def cvi_molarity_residual(Cm, eps, ops: CviOps, grid: Grid1D,
                          const: CviConstants = CviConstants()) -> Tensor:
    """``D_eff(eps) lap(C) - K(eps) S_v(eps) C`` with Dirichlet inlet values."""
    eps = _t(eps)
    return _molarity_residual(_t(Cm), ops.deff(eps), ops.k(eps) * ops.sv(eps), grid, const)


def cvi_porosity_step(eps, Cm, dt: float, ops: CviOps,
                      const: CviConstants = CviConstants()) -> Tensor:
    """Explicit Euler ``eps - dt q Ms K S_v C / rho_s``, clamped below at ``eps_min``."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    eps = _t(eps)
    rate = ops.k(eps) * ops.sv(eps) * _t(Cm)
    return T.maximum(eps - (dt * const.q * const.Ms / const.rho_s) * rate, const.eps_min)


def solve_molarity(D: np.ndarray, R: np.ndarray, grid: Grid1D, const: CviConstants,
                   x0=None, method: str = "cg", tol: float = 1e-12, max_iter: int = 20000):
    """Solve ``D lap(C) = R C`` for C.

    Divided by ``D`` the system ``-lap(C) + (R/D) C = b`` is symmetric positive
    definite, so CG applies; point-Jacobi is the slower alternative.
    Returns ``(C, report)``.
    """
    nb, coef = grid.stencil
    ratio = np.asarray(R) / np.asarray(D)
    b = np.zeros(grid.n)
    b[0] = 2.0 * const.c_left / grid.dx ** 2
    b[-1] = 2.0 * const.c_right / grid.dx ** 2

    def lap(v):
        return np.einsum("mn,mn->n", v[nb], coef)

    if method == "cg":
        A = LinearOperator(lambda v: -lap(v) + ratio * v, grid.n)
        return conjugate_gradient(A, b, x0, tol=tol, max_iter=max_iter)
    if method == "jacobi":
        diag = -coef[0] + ratio
        off = coef.copy()
        off[0] = 0.0
        return jacobi_iterate(diag, lambda v: -np.einsum("mn,mn->n", v[nb], off), b, x0,
                              tol=tol, max_iter=max_iter)
    raise ValueError(f"unknown molarity solver {method!r}")


def cvi_rollout(eps0, ops: CviOps, grid: Grid1D, dt: float, steps: int,
                const: CviConstants = CviConstants(), method: str = "cg",
                tol: float = 1e-12, adjoint_tol: float = 1e-10, warm=None):
    """Nested CVI rollout: elliptic molarity solve (implicit layer) then Euler porosity.

    Returns ``(eps_history, C_history)`` as lists of tensors.
    """
    from .implicit import implicit_step

    def residual(Cm, D, R):
        return _molarity_residual(Cm, D, R, grid, const)

    def solver(f, x0, D, R):
        x, rep = solve_molarity(D, R, grid, const, x0=x0, method=method, tol=tol)
        if not rep.converged:
            from .rootfind import RootFindError
            raise RootFindError("molarity solve did not converge", x, rep.final_residual_norm)
        return x, rep.iterations

    eps = _t(eps0)
    C_prev = None
    eps_hist, C_hist = [eps], []
    for step in range(steps):
        D = ops.deff(eps)
        R = ops.k(eps) * ops.sv(eps)
        Cm = implicit_step(residual, D, R, x0=C_prev, solver=solver, step_index=step,
                           adjoint_tol=adjoint_tol, warm=warm)
        C_prev = Cm.data
        eps = cvi_porosity_step(eps, Cm, dt, ops, const)
        C_hist.append(Cm)
        eps_hist.append(eps)
    return eps_hist, C_hist
