"""Hybrid neural-physics models.

A model exposes

* ``segments()``: the parameter layout,
* ``coefficients(p, t)``: the operator data at time ``t`` as a tensor (for
  advection-diffusion the assembled stencil, for Burgers the viscosity),
* ``rhs(phi, coeff)``: the semi-discrete right-hand side,
* ``steady``: whether the coefficients are time independent,

or, for systems that are not plain time-stepped ODEs (CVI), a ``step``
method used directly by the rollout.  ``p`` is a callable mapping segment
names to parameter tensors.
"""
from __future__ import annotations


import numpy as np

from . import tensor as T
from .fields import CNF, MLP, time_conditioned_field
from .params import ParamSet
from .pde import (CoeffFields, CviConstants, Grid1D, Grid2D, TruthCviOps, advdiff_stencil,
                  burgers_rhs, cvi_porosity_step, _molarity_residual, solve_molarity)
from .tensor import Tensor

__all__ = ["HybridModel", "AdvDiffModel", "BurgersModel", "LinearDecayModel",
           "NeuralCviOps", "CviModel"]


class HybridModel:
    steady = True

    def segments(self) -> list[tuple[str, int, bool]]:
        return []

    def init_params(self, rng: np.random.Generator | int = 0) -> ParamSet:
        rng = np.random.default_rng(rng)
        ps = ParamSet(self.segments())
        for name, vals in self._init_values(rng).items():
            ps.set(name, vals)
        return ps

    def _init_values(self, rng) -> dict:
        return {}

    def layout(self) -> ParamSet:
        return ParamSet(self.segments())

    def fields(self, p, t: float = 0.0) -> dict:
        """Inferred latent fields as numpy arrays (empty for fully known models)."""
        return {}


class AdvDiffModel(HybridModel):
    """Advection-diffusion with learned (CNF) or prescribed velocities.

    ``truth`` is a pair of arrays or a callable ``t -> (ux, uy)``.  With
    ``learn_k`` the diffusivity is a physical unknown stored as ``log k``.
    """

    def __init__(self, grid: Grid2D, k: float, velocity: CNF | None = None, truth=None,
                 learn_k: bool = False):
        if (velocity is None) == (truth is None):
            raise ValueError("give exactly one of a velocity CNF or truth velocities")
        self.grid, self.k, self.velocity, self.truth, self.learn_k = grid, k, velocity, truth, learn_k
        self.coords = grid.normalized_centers()
        if velocity is not None:
            if velocity.out_dim != 2:
                raise ValueError("velocity field needs two output components")
            self.steady = velocity.mode == "steady"
        else:
            self.steady = not callable(truth)

    def segments(self):
        segs = list(self.velocity.segments()) if self.velocity is not None else []
        if self.learn_k:
            segs.append(("log_k", 1, False))
        return segs

    def _init_values(self, rng):
        vals = self.velocity.init(rng) if self.velocity is not None else {}
        if self.learn_k:
            vals["log_k"] = np.array([np.log(self.k)])
        return vals

    def velocities(self, p, t: float):
        if self.velocity is None:
            ux, uy = self.truth(t) if callable(self.truth) else self.truth
            return Tensor(np.asarray(ux, float)), Tensor(np.asarray(uy, float))
        out = time_conditioned_field(self.coords, t, self.velocity, p)
        return T.getitem(out, (slice(None), 0)), T.getitem(out, (slice(None), 1))

    def diffusivity(self, p):
        return T.exp(p("log_k")) if self.learn_k else self.k

    def coefficients(self, p, t: float) -> Tensor:
        ux, uy = self.velocities(p, t)
        return advdiff_stencil(CoeffFields(ux, uy, self.diffusivity(p)), self.grid)

    def rhs(self, phi, coeff) -> Tensor:
        return T.stencil_apply(phi, self.grid.neighbors, coeff)

    def fields(self, p, t: float = 0.0) -> dict:
        ux, uy = self.velocities(p, t)
        return {"ux": ux.data, "uy": uy.data}


class BurgersModel(HybridModel):
    """Scalar Burgers with a learned (positive CNF) or prescribed viscosity field."""

    def __init__(self, grid: Grid2D, viscosity: CNF | None = None, truth=None):
        if (viscosity is None) == (truth is None):
            raise ValueError("give exactly one of a viscosity CNF or a truth field")
        if viscosity is not None and not viscosity.positive:
            raise ValueError("the viscosity CNF must have positive output")
        self.grid, self.viscosity, self.truth = grid, viscosity, truth
        self.coords = grid.normalized_centers()

    def segments(self):
        return list(self.viscosity.segments()) if self.viscosity is not None else []

    def _init_values(self, rng):
        return self.viscosity.init(rng) if self.viscosity is not None else {}

    def coefficients(self, p, t: float) -> Tensor:
        if self.viscosity is None:
            return Tensor(np.asarray(self.truth, float))
        out = time_conditioned_field(self.coords, t, self.viscosity, p)
        return T.getitem(out, (slice(None), 0))

    def rhs(self, phi, coeff) -> Tensor:
        return burgers_rhs(phi, coeff, self.grid)

    def fields(self, p, t: float = 0.0) -> dict:
        return {"nu": self.coefficients(p, t).data}


class LinearDecayModel(HybridModel):
    """``dphi/dt = -lam phi``; ``lam`` is a parameter when ``learn`` is set."""

    def __init__(self, lam: float, learn: bool = False):
        self.lam, self.learn = float(lam), learn

    def segments(self):
        return [("lam", 1, False)] if self.learn else []

    def _init_values(self, rng):
        return {"lam": np.array([self.lam])} if self.learn else {}

    def coefficients(self, p, t: float) -> Tensor:
        return p("lam") if self.learn else Tensor(np.array([self.lam]))

    def rhs(self, phi, coeff) -> Tensor:
        return -(coeff * phi)


class NeuralCviOps:
    """``D_eff``, ``K`` and ``S_v`` as 1-16-1 MLPs of porosity with softplus outputs."""

    names = ("deff", "k", "sv")

    def __init__(self, hidden: int = 16, scales=(1.0, 1.0, 10.0), prefix: str = "cvi"):
        self.mlp = MLP((1, hidden, 1), hidden_act="tanh", out_act="softplus")
        self.scales = dict(zip(self.names, scales))
        self.prefix = prefix
        self.p = None

    def segments(self):
        return [(f"{self.prefix}.{n}", self.mlp.num_params, True) for n in self.names]

    def bind(self, p) -> "NeuralCviOps":
        bound = NeuralCviOps.__new__(NeuralCviOps)
        bound.mlp, bound.scales, bound.prefix, bound.p = self.mlp, self.scales, self.prefix, p
        return bound

    def _eval(self, name, eps):
        eps = eps if isinstance(eps, Tensor) else Tensor(np.asarray(eps, float))
        z = self.mlp.apply(self.p(f"{self.prefix}.{name}"), T.reshape(eps, (eps.shape[0], 1)))
        return self.scales[name] * T.reshape(z, (eps.shape[0],))

    def deff(self, eps):
        return self._eval("deff", eps)

    def k(self, eps):
        return self._eval("k", eps)

    def sv(self, eps):
        return self._eval("sv", eps)


class CviModel(HybridModel):
    """Porosity evolution with a nested steady molarity solve each step."""

    def __init__(self, grid: Grid1D, ops=None, const: CviConstants = CviConstants(),
                 solver: str = "cg", solve_tol: float = 1e-12):
        self.grid, self.const, self.solver, self.solve_tol = grid, const, solver, solve_tol
        self.ops = ops if ops is not None else TruthCviOps()

    def segments(self):
        return self.ops.segments() if hasattr(self.ops, "segments") else []

    def _init_values(self, rng):
        if not hasattr(self.ops, "segments"):
            return {}
        return {name: self.ops.mlp.init(rng) for name, _, _ in self.ops.segments()}

    def bound_ops(self, p):
        return self.ops.bind(p) if hasattr(self.ops, "bind") else self.ops

    def step(self, eps, p, t0: float, t1: float, config, step_index, warm, stats=None):
        from .implicit import implicit_step
        from .rootfind import RootFindError

        ops = self.bound_ops(p)
        grid, const = self.grid, self.const

        def residual(Cm, D, R):
            return _molarity_residual(Cm, D, R, grid, const)

        def solver(f, x0, D, R):
            x, rep = solve_molarity(D, R, grid, const, x0=x0, method=self.solver,
                                    tol=self.solve_tol)
            if not rep.converged:
                raise RootFindError("molarity solve did not converge", x, rep.final_residual_norm)
            return x, rep.iterations

        D = ops.deff(eps)
        R = ops.k(eps) * ops.sv(eps)
        Cm = implicit_step(residual, D, R, solver=solver, step_index=step_index,
                           adjoint_tol=config.adjoint_tol, warm=warm, stats=stats)
        return cvi_porosity_step(eps, Cm, t1 - t0, ops, const)

    def fields(self, p, t: float = 0.0) -> dict:
        ops = self.bound_ops(p)
        eps = np.linspace(0.05, 0.95, 19)
        return {"deff": ops.deff(eps).data, "ksv": (ops.k(eps) * ops.sv(eps)).data}
