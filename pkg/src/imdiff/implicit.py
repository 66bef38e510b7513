"""Implicit time-step layer with adjoint backpropagation.

Forward: solve ``f(x; prev, theta) = 0`` for ``x`` with recording suspended.
Backward: solve ``w^T [df/dx] = -g`` with BiCGStab, where the transposed
Jacobian action is the VJP of ``f`` in its first argument, then return
``w^T df/dprev`` and ``w^T df/dtheta``.  The whole step is one tape node, so
the tape cost does not depend on how many solver iterations were needed.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T
from .krylov import bicgstab
from .rootfind import RootFindError, RootProblem, RootStats, fixed_point_iterate, newton_krylov
from .tensor import Tensor

__all__ = ["ImplicitStepContext", "AdjointSolveError", "StepFailure", "AdjointWarmStart",
           "implicit_step", "implicit_step_backward", "naive_unrolled_step"]

ResidualFn = Callable[[Tensor, Tensor, Tensor], Tensor]


class AdjointSolveError(RuntimeError):
    pass


class StepFailure(RuntimeError):
    """Forward root solve failed at a given step."""

    def __init__(self, step_index, residual_norm: float, cause: Exception | None = None):
        super().__init__(f"implicit step {step_index} failed: residual norm {residual_norm:.3e}")
        self.step_index = step_index
        self.residual_norm = residual_norm
        self.__cause__ = cause


@dataclass
class AdjointWarmStart:
    """Shared across the steps of one rollout; holds the last adjoint vector."""
    w: np.ndarray | None = None
    iterations: list = field(default_factory=list)


@dataclass
class ImplicitStepContext:
    phi_star: np.ndarray
    phi_prev: np.ndarray
    theta: np.ndarray
    residual_fn: ResidualFn
    step_index: object = None
    adjoint_tol: float = 1e-8
    adjoint_max_iter: int = 2000
    warm: AdjointWarmStart | None = None

    def saved_arrays(self):
        return (self.phi_star, self.phi_prev, self.theta)


def _residual_numpy(residual_fn: ResidualFn, shape):
    def f(x, prev, theta):
        return residual_fn(Tensor(np.reshape(x, shape)), Tensor(prev), Tensor(theta)).data.reshape(-1)
    return f


def implicit_step_backward(ctx: ImplicitStepContext, cotangent: np.ndarray):
    """Adjoint VJP of the implicit step.  Returns ``(g_prev, g_theta)``."""
    g = np.asarray(cotangent, dtype=np.float64).reshape(-1)
    _, pullback = T.vjp(ctx.residual_fn, ctx.phi_star, ctx.phi_prev, ctx.theta)
    shape = ctx.phi_star.shape

    def transposed_jac(v):
        return pullback(v.reshape(shape), wrt=(0,))[0].reshape(-1)

    w0 = None
    if ctx.warm is not None and ctx.warm.w is not None and ctx.warm.w.size == g.size:
        w0 = ctx.warm.w
    w, rep = bicgstab(_Op(transposed_jac, g.size), -g, w0, tol=ctx.adjoint_tol,
                      max_iter=ctx.adjoint_max_iter)
    if not rep.converged:
        raise AdjointSolveError(f"adjoint solve did not converge at step {ctx.step_index}:"
                                f" residual {rep.final_residual_norm:.3e} after {rep.iterations} iterations")
    if ctx.warm is not None:
        ctx.warm.w = w
        ctx.warm.iterations.append(rep.iterations)
    _, g_prev, g_theta = pullback(w.reshape(shape), wrt=(1, 2))
    return g_prev, g_theta


class _Op:
    __slots__ = ("apply", "dim")

    def __init__(self, apply, dim):
        self.apply, self.dim = apply, dim

    def __call__(self, v):
        return self.apply(v)


def implicit_step(residual_fn: ResidualFn, phi_prev: Tensor, theta: Tensor, *,
                  x0=None, method: str = "newton", tol: float = 1e-10, max_iter: int = 50,
                  linear_tol: float = 1e-8, adjoint_tol: float = 1e-8,
                  solver: Callable | None = None, step_index=None,
                  warm: AdjointWarmStart | None = None,
                  stats: RootStats | None = None) -> Tensor:
    """Advance one implicit step; returns ``x*`` with ``f(x*; phi_prev, theta) = 0``.

    ``method`` is ``"newton"`` (Newton-Krylov) or ``"fixed-point"`` (iterate
    ``x <- x - f(x)``).  A custom ``solver(f_numpy, x0, prev, theta)`` returning
    ``(x, iterations)`` overrides both.  The initial guess defaults to
    ``phi_prev`` when shapes agree.
    """
    phi_prev = T._as_tensor(phi_prev)
    theta = T._as_tensor(theta)
    stats = stats if stats is not None else RootStats()

    def forward(prev, th):
        shape = prev.shape if x0 is None else np.shape(x0)
        guess = prev if x0 is None else np.asarray(x0, dtype=np.float64)
        f = _residual_numpy(residual_fn, shape)
        try:
            if solver is not None:
                x, its = solver(f, guess.reshape(-1), prev, th)
                stats.linear_iterations += int(its)
            elif method == "newton":
                problem = RootProblem(f, int(np.prod(shape)))
                x, _ = newton_krylov(problem, guess.reshape(-1), prev, th, tol=tol,
                                     max_newton=max_iter, linear_tol=linear_tol, stats=stats)
            elif method == "fixed-point":
                x, _ = fixed_point_iterate(lambda z: z - f(z, prev, th), guess.reshape(-1),
                                           tol=tol, max_iter=max_iter, stats=stats)
            else:
                raise ValueError(f"unknown root-find method {method!r}")
        except RootFindError as exc:
            raise StepFailure(step_index, exc.residual_norm, exc) from exc
        x = np.asarray(x, dtype=np.float64).reshape(shape)
        ctx = ImplicitStepContext(x, prev, th, residual_fn, step_index, adjoint_tol, warm=warm)
        return x, ctx

    op = T.custom_vjp(forward, lambda g, ctx: implicit_step_backward(ctx, g), name="implicit_step")
    return op(phi_prev, theta)


def naive_unrolled_step(residual_fn: ResidualFn, phi_prev: Tensor, theta: Tensor,
                        K_fixed: int, stats: RootStats | None = None) -> Tensor:
    """Unrolled baseline: ``K_fixed`` iterations of ``x <- x - f(x)`` on the tape.

    For a residual of the form ``x - G(x)`` this is Picard iteration; for an
    affine residual with unit Jacobian a single iteration is exact.  Every
    iterate stays on the tape, which is the point of this baseline.
    """
    if K_fixed < 1:
        raise ValueError("K_fixed must be >= 1")
    phi_prev = T._as_tensor(phi_prev)
    x = phi_prev
    for _ in range(K_fixed):
        x = x - residual_fn(x, phi_prev, theta)
    if stats is not None:
        r = residual_fn(Tensor(x.data), Tensor(phi_prev.data), Tensor(T._as_tensor(theta).data))
        stats.residual_norm = float(np.linalg.norm(r.data))
        stats.newton_steps += K_fixed
    return x
