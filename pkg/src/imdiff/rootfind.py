"""Nonlinear root finding for implicit time steps."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .krylov import bicgstab, conjugate_gradient

__all__ = ["RootProblem", "RootFindError", "RootStats", "newton_krylov",
           "fixed_point_iterate"]

_SQRT_EPS = np.sqrt(np.finfo(np.float64).eps)


class RootFindError(RuntimeError):
    """Raised when a root solve fails; carries the best iterate found."""

    def __init__(self, message: str, best: np.ndarray, residual_norm: float):
        super().__init__(f"{message} (residual norm {residual_norm:.3e})")
        self.best = best
        self.residual_norm = residual_norm


@dataclass
class RootProblem:
    residual_fn: Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]
    dim: int

    def __call__(self, x, phi_prev, theta) -> np.ndarray:
        r = np.asarray(self.residual_fn(x, phi_prev, theta), dtype=np.float64).reshape(-1)
        if r.size != self.dim:
            raise ValueError(f"residual has length {r.size}, expected {self.dim}")
        return r


@dataclass
class RootStats:
    """Counters filled in by the solvers when passed as ``stats=``."""
    newton_steps: int = 0
    linear_iterations: int = 0
    residual_evals: int = 0
    residual_norm: float = float("nan")
    history: list = field(default_factory=list)


def newton_krylov(problem: RootProblem, x0, phi_prev, theta, tol: float = 1e-10,
                  max_newton: int = 30, linear: str = "bicgstab", linear_tol: float = 1e-8,
                  max_linear: int = 500, abs_tol: float = 1e-10,
                  stats: RootStats | None = None):
    """Inexact Newton with matrix-free finite-difference Jacobian actions.

    Stops once ``||f(x)|| <= tol * max(1, ||f(x0)||)`` (or the absolute
    fallback ``abs_tol`` for near-zero starting residuals).  Each Newton
    update is halved up to eight times until the residual norm decreases.
    Returns ``(x_star, newton_iterations)``.
    """
    stats = stats if stats is not None else RootStats()
    solve = {"bicgstab": bicgstab, "cg": conjugate_gradient}[linear]
    x = np.array(x0, dtype=np.float64).reshape(-1)
    f = problem(x, phi_prev, theta)
    stats.residual_evals += 1
    fnorm = float(np.linalg.norm(f))
    thresh = max(tol * max(1.0, fnorm), min(abs_tol, tol))
    stats.history.append(fnorm)
    k = 0
    while fnorm > thresh:
        if k >= max_newton:
            stats.residual_norm = fnorm
            raise RootFindError(f"Newton did not converge in {max_newton} iterations", x, fnorm)
        h = _SQRT_EPS * (1.0 + float(np.linalg.norm(x)))

        def jv(v, x=x, f=f, h=h):
            vn = float(np.linalg.norm(v))
            if vn == 0.0:
                return np.zeros_like(v)
            stats.residual_evals += 1
            return (problem(x + (h / vn) * v, phi_prev, theta) - f) * (vn / h)

        # normalised right-hand side so linear_tol is relative even when ||f|| < 1
        dx, rep = solve(_Op(jv, x.size), -f / fnorm, None, tol=linear_tol, max_iter=max_linear)
        dx *= fnorm
        stats.linear_iterations += rep.iterations
        step = 1.0
        for _ in range(9):
            x_new = x + step * dx
            f_new = problem(x_new, phi_prev, theta)
            stats.residual_evals += 1
            fn_new = float(np.linalg.norm(f_new))
            if np.isfinite(fn_new) and fn_new < fnorm:
                break
            step *= 0.5
        else:
            stats.residual_norm = fnorm
            raise RootFindError("Newton step halving failed to reduce the residual", x, fnorm)
        x, f, fnorm = x_new, f_new, fn_new
        stats.history.append(fnorm)
        k += 1
    stats.newton_steps += k
    stats.residual_norm = fnorm
    return x, k


class _Op:
    __slots__ = ("apply", "dim")

    def __init__(self, apply, dim):
        self.apply, self.dim = apply, dim

    def __call__(self, v):
        return self.apply(v)


def fixed_point_iterate(g: Callable[[np.ndarray], np.ndarray], x0, tol: float = 1e-10,
                        max_iter: int = 1000, stats: RootStats | None = None):
    """Iterate ``x <- g(x)`` until ``||x - g(x)|| <= tol``.

    Raises :class:`RootFindError` if the update norm grows three iterations
    in a row or ``max_iter`` is exhausted.  Returns ``(x_star, iterations)``.
    """
    x = np.array(x0, dtype=np.float64)
    gx = np.asarray(g(x), dtype=np.float64)
    res = float(np.linalg.norm(gx - x))
    k = 0
    growth = 0
    while res > tol:
        if k >= max_iter:
            raise RootFindError(f"fixed-point iteration did not converge in {max_iter} steps", x, res)
        x = gx
        gx = np.asarray(g(x), dtype=np.float64)
        new_res = float(np.linalg.norm(gx - x))
        growth = growth + 1 if new_res > res else 0
        res = new_res
        k += 1
        if growth >= 3 or not np.isfinite(res):
            raise RootFindError("fixed-point iteration diverging", x, res)
    if stats is not None:
        stats.newton_steps += k
        stats.residual_norm = res
    return x, k
