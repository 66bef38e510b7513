"""Implicit differentiable hybrid neural-physics solvers.

Submodules: ``tensor`` (reverse-mode AD), ``krylov`` and ``rootfind``
(solvers), ``implicit`` (implicit time-step layer with adjoint backward),
``fields`` (conditional neural fields), ``pde`` (finite-volume models),
``data`` (reference data), ``training`` and ``models`` (rollouts and the
optimisation loop), ``experiments`` and ``cli`` (experiment harness).
"""
from .tensor import Tape, Tensor
from .implicit import implicit_step, naive_unrolled_step
from .training import rollout, train

__all__ = ["Tape", "Tensor", "implicit_step", "naive_unrolled_step", "rollout", "train"]
__version__ = "0.1.0"
