"""Matrix-free iterative linear solvers.

All solvers touch the operator only through ``A.apply`` and use the relative
stopping rule ``||A x - b|| <= tol * max(1, ||b||)``.  No preconditioning.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

__all__ = ["LinearOperator", "SolveReport", "as_operator", "bicgstab",
           "conjugate_gradient", "jacobi_iterate", "check_linearity"]


@dataclass
class LinearOperator:
    apply: Callable[[np.ndarray], np.ndarray]
    dim: int

    def __call__(self, v: np.ndarray) -> np.ndarray:
        out = np.asarray(self.apply(v), dtype=np.float64)
        if out.shape != (self.dim,):
            raise ValueError(f"operator returned shape {out.shape}, expected ({self.dim},)")
        return out

    @classmethod
    def from_matrix(cls, M) -> "LinearOperator":
        M = np.asarray(M, dtype=np.float64)
        return cls(lambda v: M @ v, M.shape[0])


@dataclass
class SolveReport:
    iterations: int
    final_residual_norm: float
    converged: bool


def as_operator(A, dim: int | None = None) -> LinearOperator:
    if isinstance(A, LinearOperator):
        return A
    if isinstance(A, np.ndarray):
        return LinearOperator.from_matrix(A)
    if dim is None:
        raise ValueError("a bare callable needs an explicit dim")
    return LinearOperator(A, dim)


def _threshold(tol: float, b: np.ndarray) -> float:
    if tol <= 0:
        raise ValueError("tol must be positive")
    return tol * max(1.0, float(np.linalg.norm(b)))


def _prepare(A, b, x0):
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    A = as_operator(A, b.size)
    if A.dim != b.size:
        raise ValueError(f"operator dim {A.dim} does not match rhs length {b.size}")
    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=np.float64).reshape(-1)
    if x.size != b.size:
        raise ValueError(f"x0 length {x.size} does not match rhs length {b.size}")
    return A, b, x


def bicgstab(A, b, x0=None, tol: float = 1e-8, max_iter: int = 1000):
    """Stabilized bi-conjugate gradients for a general square system.

    On breakdown (``rho`` or ``omega`` vanishing) the iteration restarts once
    from the current iterate with a fresh shadow residual; a second breakdown
    returns a non-converged report.
    """
    A, b, x = _prepare(A, b, x0)
    thresh = _threshold(tol, b)
    r = b - A(x)
    rnorm = float(np.linalg.norm(r))
    it = 0
    restarts = 0
    tiny = 1e-300
    while True:
        if rnorm <= thresh:
            return x, SolveReport(it, rnorm, True)
        r_hat = r.copy()
        rho = alpha = omega = 1.0
        v = np.zeros_like(b)
        p = np.zeros_like(b)
        broke = False
        while it < max_iter:
            rho_new = float(r_hat @ r)
            if abs(rho_new) < tiny or abs(omega) < tiny:
                broke = True
                break
            beta = (rho_new / rho) * (alpha / omega)
            p = r + beta * (p - omega * v)
            v = A(p)
            denom = float(r_hat @ v)
            if abs(denom) < tiny:
                broke = True
                break
            alpha = rho_new / denom
            s = r - alpha * v
            it += 1
            snorm = float(np.linalg.norm(s))
            if snorm <= thresh:
                x = x + alpha * p
                r = s
                rnorm = snorm
                break
            t = A(s)
            tt = float(t @ t)
            if tt < tiny:
                broke = True
                x = x + alpha * p
                r = s
                break
            omega = float(t @ s) / tt
            x = x + alpha * p + omega * s
            r = s - omega * t
            rnorm = float(np.linalg.norm(r))
            rho = rho_new
            if rnorm <= thresh:
                break
        rnorm = float(np.linalg.norm(b - A(x)))
        if rnorm <= thresh:
            return x, SolveReport(it, rnorm, True)
        if broke and restarts == 0 and it < max_iter:
            restarts += 1
            r = b - A(x)
            continue
        return x, SolveReport(it, rnorm, False)


def conjugate_gradient(A, b, x0=None, tol: float = 1e-8, max_iter: int = 1000):
    """Conjugate gradients; ``A`` must be symmetric positive definite."""
    A, b, x = _prepare(A, b, x0)
    thresh = _threshold(tol, b)
    r = b - A(x)
    rr = float(r @ r)
    if np.sqrt(rr) <= thresh:
        return x, SolveReport(0, float(np.sqrt(rr)), True)
    p = r.copy()
    it = 0
    while it < max_iter:
        Ap = A(p)
        pAp = float(p @ Ap)
        if pAp <= 0.0:
            break
        alpha = rr / pAp
        x = x + alpha * p
        r = r - alpha * Ap
        it += 1
        rr_new = float(r @ r)
        if np.sqrt(rr_new) <= thresh:
            break
        p = r + (rr_new / rr) * p
        rr = rr_new
    rnorm = float(np.linalg.norm(b - A(x)))
    return x, SolveReport(it, rnorm, rnorm <= thresh)


def jacobi_iterate(A_diag, A_offdiag_apply: Callable, b, x0=None, tol: float = 1e-8,
                   max_iter: int = 10000):
    """Point-Jacobi: ``x <- D^{-1} (b - R x)`` with ``A = D + R``."""
    d = np.asarray(A_diag, dtype=np.float64).reshape(-1)
    if np.any(d == 0.0):
        raise ValueError("jacobi_iterate: zero on the diagonal")
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=np.float64).reshape(-1)
    thresh = _threshold(tol, b)
    Rx = A_offdiag_apply(x)
    rnorm = float(np.linalg.norm(d * x + Rx - b))
    it = 0
    while rnorm > thresh and it < max_iter:
        x = (b - Rx) / d
        it += 1
        Rx = A_offdiag_apply(x)
        rnorm = float(np.linalg.norm(d * x + Rx - b))
    return x, SolveReport(it, rnorm, rnorm <= thresh)


def check_linearity(A: LinearOperator, rng: np.random.Generator, trials: int = 3,
                    atol: float = 1e-10) -> bool:
    """Probe ``A(a u + b v) == a A(u) + b A(v)`` on random vectors."""
    for _ in range(trials):
        u, v = rng.standard_normal(A.dim), rng.standard_normal(A.dim)
        a, c = rng.standard_normal(2)
        lhs = A(a * u + c * v)
        rhs = a * A(u) + c * A(v)
        if np.linalg.norm(lhs - rhs) > atol * max(1.0, np.linalg.norm(rhs)):
            return False
    return True
