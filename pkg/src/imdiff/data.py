"""Ground-truth generation: latent cosine fields, GP initial conditions, RK4 rollouts."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.linalg import cho_factor, LinAlgError

from .pde import CoeffFields, Grid2D, advdiff_stencil, burgers_rhs
from .tensor import Tensor

__all__ = ["CosineFieldSpec", "sample_cosine_field", "GpIcSpec", "sample_gp_ic",
           "gp_kernel", "restrict", "SnapshotDataset", "rk4_reference_rollout",
           "advdiff_truth_rhs", "burgers_truth_rhs", "velocity_truth", "viscosity_truth"]


@dataclass(frozen=True)
class CosineFieldSpec:
    """``f(x, t) = sum_i A_i sin(2 pi (k_i . x + omega_i t) + p_i)``."""
    A: tuple
    k: tuple          # one (kx, ky) pair per wave
    omega: tuple
    p: tuple
    seed: int | None = None

    @property
    def nw(self) -> int:
        return len(self.A)

    @classmethod
    def sample(cls, seed: int, nw: int = 4, dim: int = 2) -> "CosineFieldSpec":
        rng = np.random.default_rng(seed)
        A = rng.uniform(-2.0, 2.0, nw)
        k = rng.uniform(0.0, 2.0, (nw, dim))
        omega = rng.uniform(-1.0, 1.0, nw)
        p = rng.uniform(0.0, 2.0, nw)
        return cls(tuple(A), tuple(map(tuple, k)), tuple(omega), tuple(p), seed)

    def steady(self) -> "CosineFieldSpec":
        return CosineFieldSpec(self.A, self.k, tuple(0.0 for _ in self.omega), self.p, self.seed)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["k"] = [list(r) for r in self.k]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CosineFieldSpec":
        return cls(tuple(d["A"]), tuple(map(tuple, d["k"])), tuple(d["omega"]), tuple(d["p"]),
                   d.get("seed"))


def sample_cosine_field(spec: CosineFieldSpec, x, t: float = 0.0) -> np.ndarray:
    """Evaluate the superposition at points ``x`` of shape (P, dim) (or (P,) in 1D)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    k = np.asarray(spec.k, dtype=np.float64).reshape(spec.nw, -1)
    if k.shape[1] != x.shape[1]:
        raise ValueError(f"wave vectors have dimension {k.shape[1]}, points {x.shape[1]}")
    phase = 2.0 * np.pi * (x @ k.T + np.asarray(spec.omega) * t) + np.asarray(spec.p)
    return np.sin(phase) @ np.asarray(spec.A)


@dataclass(frozen=True)
class GpIcSpec:
    length_scale: float = 0.3
    seed: int = 0
    coarse: tuple = (30, 10)
    variance: float = 1.0
    mean: float = 0.0


def _periodic_rbf_1d(d: np.ndarray, length_scale: float, period: float) -> np.ndarray:
    # Fourier series of the periodised Gaussian; all coefficients are positive,
    # so any truncation is still positive semi-definite.
    a = 2.0 * (np.pi * length_scale / period) ** 2
    q_max = int(np.ceil(np.sqrt(40.0 / a))) if a > 0 else 0
    q = np.arange(1, q_max + 1)
    coef = np.exp(-a * q ** 2)
    return (1.0 + 2.0 * np.cos(2.0 * np.pi * d[..., None] * q / period) @ coef) / (1.0 + 2.0 * coef.sum())


def gp_kernel(points: np.ndarray, length_scale: float, lx: float, ly: float) -> np.ndarray:
    """RBF kernel periodised over the ``lx x ly`` torus, unit variance.

    Equal to the sum of the Gaussian over all periodic images, evaluated
    through its (rapidly converging) Fourier series.
    """
    d = points[:, None, :] - points[None, :, :]
    return _periodic_rbf_1d(d[..., 0], length_scale, lx) * _periodic_rbf_1d(d[..., 1], length_scale, ly)


def _coarse_points(spec: GpIcSpec, grid: Grid2D) -> np.ndarray:
    cx, cy = spec.coarse
    X, Y = np.meshgrid(np.arange(cx) * grid.lx / cx, np.arange(cy) * grid.ly / cy, indexing="xy")
    return np.stack([X.reshape(-1), Y.reshape(-1)], axis=1)


def sample_gp_ic(spec: GpIcSpec, grid: Grid2D) -> np.ndarray:
    """Draw a GP on the coarse periodic grid and interpolate bilinearly onto cell centres."""
    cx, cy = spec.coarse
    if cx > grid.nx * 8 or cy > grid.ny * 8 or cx < 2 or cy < 2:
        raise ValueError(f"coarse grid {spec.coarse} incompatible with target {grid.nx}x{grid.ny}")
    pts = _coarse_points(spec, grid)
    K = spec.variance * gp_kernel(pts, spec.length_scale, grid.lx, grid.ly)
    try:
        L, _ = cho_factor(K, lower=True)
    except LinAlgError:
        K = K + 1e-8 * np.eye(K.shape[0])
        L, _ = cho_factor(K, lower=True)
    L = np.tril(L)
    z = np.random.default_rng(spec.seed).standard_normal(K.shape[0])
    coarse = (spec.mean + L @ z).reshape(cy, cx)
    return _bilinear_periodic(coarse, grid)


def _bilinear_periodic(coarse: np.ndarray, grid: Grid2D) -> np.ndarray:
    cy, cx = coarse.shape
    x, y = grid.centers()
    fx, fy = x / grid.lx * cx, y / grid.ly * cy
    i0, j0 = np.floor(fx).astype(int), np.floor(fy).astype(int)
    tx, ty = fx - i0, fy - j0
    i0, j0 = i0 % cx, j0 % cy
    i1, j1 = (i0 + 1) % cx, (j0 + 1) % cy
    return ((1 - tx) * (1 - ty) * coarse[j0, i0] + tx * (1 - ty) * coarse[j0, i1]
            + (1 - tx) * ty * coarse[j1, i0] + tx * ty * coarse[j1, i1])


def restrict(values: np.ndarray, fine: Grid2D, factor: int) -> np.ndarray:
    """Average ``factor x factor`` blocks of a fine-grid field onto the coarse grid."""
    v = np.asarray(values)
    lead = v.shape[:-1]
    v = v.reshape(*lead, fine.ny // factor, factor, fine.nx // factor, factor)
    return v.mean(axis=(-3, -1)).reshape(*lead, -1)


def velocity_truth(specs: Sequence[CosineFieldSpec], grid: Grid2D, t: float = 0.0):
    x, y = grid.centers()
    pts = np.stack([x, y], axis=1)
    return tuple(sample_cosine_field(s, pts, t) for s in specs)


def viscosity_truth(spec: CosineFieldSpec, grid: Grid2D, nu0: float = 0.02,
                    rel: float = 0.5) -> np.ndarray:
    """Positive viscosity ``nu0 (1 + rel tanh(f / 2))`` from a cosine field ``f``."""
    x, y = grid.centers()
    f = sample_cosine_field(spec, np.stack([x, y], axis=1))
    return nu0 * (1.0 + rel * np.tanh(0.5 * f))


def advdiff_truth_rhs(grid: Grid2D, specs: Sequence[CosineFieldSpec], k: float,
                      steady: bool = True) -> Callable[[np.ndarray, float], np.ndarray]:
    """Numpy right-hand side ``F(phi, t)`` with cosine-field velocities."""
    nb = grid.neighbors
    cache = {}

    def stencil(t):
        key = 0.0 if steady else t
        if key not in cache:
            ux, uy = velocity_truth(specs, grid, key)
            cache.clear()
            cache[key] = advdiff_stencil(CoeffFields(ux, uy, k), grid).data
        return cache[key]

    def rhs(phi, t):
        return np.einsum("...mn,mn->...n", phi[..., nb], stencil(t))
    return rhs


def burgers_truth_rhs(grid: Grid2D, nu: np.ndarray) -> Callable[[np.ndarray, float], np.ndarray]:
    return lambda u, t: burgers_rhs(Tensor(u), Tensor(nu), grid).data


@dataclass
class SnapshotDataset:
    """States of shape (n_times, n_ics, n) at strictly increasing times starting at 0."""
    times: list
    states: np.ndarray
    grid: Grid2D
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.times = [float(t) for t in self.times]
        self.states = np.asarray(self.states, dtype=np.float64)
        if not self.times or self.times[0] != 0.0:
            raise ValueError("snapshot times must start at 0")
        if any(b <= a for a, b in zip(self.times, self.times[1:])):
            raise ValueError("snapshot times must be strictly increasing")
        if self.states.ndim == 2:
            self.states = self.states[:, None, :]
        if self.states.shape[0] != len(self.times) or self.states.shape[-1] != self.grid.n:
            raise ValueError(f"states shape {self.states.shape} does not match"
                             f" {len(self.times)} times on a {self.grid.n}-cell grid")

    @property
    def n_ics(self) -> int:
        return self.states.shape[1]

    def at(self, t: float, tol: float = 1e-9) -> np.ndarray:
        for i, s in enumerate(self.times):
            if abs(s - t) <= tol:
                return self.states[i]
        raise KeyError(f"no snapshot at t={t}")

    def select(self, ics: Sequence[int]) -> "SnapshotDataset":
        return SnapshotDataset(self.times, self.states[:, list(ics)], self.grid, dict(self.meta))

    def subset_times(self, times: Sequence[float]) -> "SnapshotDataset":
        return SnapshotDataset(list(times), np.stack([self.at(t) for t in times]), self.grid,
                               dict(self.meta))


def _steps_for(t: float, dt: float) -> int:
    m = int(round(t / dt))
    if abs(m * dt - t) > 1e-12 * max(1.0, abs(t)) + 1e-12:
        raise ValueError(f"time {t} is not a multiple of dt_ref={dt}")
    return m


def rk4_reference_rollout(ic, rhs_fn: Callable[[np.ndarray, float], np.ndarray], dt_ref: float,
                          t_end: float, record_times: Sequence[float], grid: Grid2D | None = None,
                          meta: dict | None = None):
    """Classic RK4 with fixed ``dt_ref``; records the state at ``record_times``.

    Returns a :class:`SnapshotDataset` when ``grid`` is given, else the
    ``(times, states)`` pair.
    """
    if dt_ref <= 0:
        raise ValueError("dt_ref must be positive")
    n_end = _steps_for(t_end, dt_ref)
    want = {_steps_for(t, dt_ref): float(t) for t in record_times}
    if max(want, default=0) > n_end:
        raise ValueError("record time beyond t_end")
    phi = np.array(ic, dtype=np.float64)
    out_t, out_s = [], []
    if 0 in want:
        out_t.append(want[0])
        out_s.append(phi.copy())
    for m in range(n_end):
        t = m * dt_ref
        k1 = rhs_fn(phi, t)
        k2 = rhs_fn(phi + 0.5 * dt_ref * k1, t + 0.5 * dt_ref)
        k3 = rhs_fn(phi + 0.5 * dt_ref * k2, t + 0.5 * dt_ref)
        k4 = rhs_fn(phi + dt_ref * k3, t + dt_ref)
        phi = phi + (dt_ref / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.all(np.isfinite(phi)):
            raise FloatingPointError(f"RK4 reference produced non-finite values at step {m + 1}")
        if m + 1 in want:
            out_t.append(want[m + 1])
            out_s.append(phi.copy())
    if grid is None:
        return out_t, np.array(out_s)
    return SnapshotDataset(out_t, np.array(out_s), grid, dict(meta or {}))
