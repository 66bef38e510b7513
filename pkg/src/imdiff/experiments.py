"""Experiment assembly shared by the command line and the acceptance tests.

An :class:`ExperimentConfig` fully determines data generation, the hybrid
model, training and the benchmark sweeps.
"""
from __future__ import annotations

import dataclasses
import io
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io as fio
from .data import (CosineFieldSpec, GpIcSpec, SnapshotDataset, advdiff_truth_rhs,
                   burgers_truth_rhs, restrict, rk4_reference_rollout, sample_gp_ic,
                   velocity_truth, viscosity_truth)
from .fields import CNF
from .models import AdvDiffModel, BurgersModel, CviModel, NeuralCviOps
from .params import ParamSet
from .pde import Grid1D, Grid2D, TruthCviOps
from .tensor import MemoryMeter, Tape
from .training import (AdamState, DivergenceError, LossSpec, RolloutConfig, TrainConfig,
                       relative_error_l1, rollout, total_loss)

__all__ = ["CASES", "ConfigError", "ExperimentConfig", "default_config", "Truth",
           "make_truth", "generate", "build_model", "rollout_config", "loss_spec",
           "train_config", "save_checkpoint", "load_checkpoint", "bench_stability",
           "bench_cost", "DYNAMIC_TRAIN_TIMES", "DYNAMIC_EVAL_TIMES"]

CASES = ("advdiff-steady", "advdiff-dynamic", "burgers", "cvi")
DYNAMIC_TRAIN_TIMES = (0.0, 0.05, 0.102, 0.15, 0.201, 0.25, 0.298, 0.35)
DYNAMIC_EVAL_TIMES = (0.02, 0.07, 0.12, 0.17, 0.22, 0.27, 0.32, 0.37, 0.4)


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    case: str = "advdiff-steady"
    seed: int = 7
    out: str = "runs/default"
    # grid and physics
    nx: int = 32
    ny: int = 16
    lx: float = 2.0
    ly: float = 1.0
    k: float = 0.1
    nw: int = 4
    nu0: float = 0.02
    nu_rel: float = 0.5
    ic_amplitude: float = 1.0
    # data
    dt_ref: float = 1e-3
    n_ics: int = 10
    n_train: int = 8
    length_scales: tuple = (0.25, 0.45)
    ood_length_scales: tuple = (0.15, 0.6)
    snapshot_times: tuple = (0.0, 0.05)
    eval_times: tuple = (0.0, 0.05, 0.1, 0.15, 0.2)
    # model and rollout
    dt: float = 1e-2
    stepper: str = "implicit-cn"
    checkpoint_every: int = 0
    K_fixed: int = 8
    latent_dim: int = 16
    hyper_hidden: tuple = (64, 64)
    siren_hidden: tuple = (32, 32)
    omega0: float = 7.5          # 30 * nx / 128: canonical SIREN frequency rescaled to the grid
    gain_init: float = 1.0
    # training
    epochs: int = 2000
    lr: float = 1e-3
    reg_weight: float = 1e-6
    # benchmarks
    dt_sweep: tuple = (1e-3, 2e-3, 5e-3, 1e-2, 2e-2)
    ref_refine: int = 2
    bench_t_end: float = 0.2
    K_sweep: tuple = (4, 8, 16, 32)
    cost_dt_im: float = 2e-3
    cost_dt_ex: float = 1e-4
    cost_t_end: float = 0.2
    # CVI
    cvi_cells: int = 32
    cvi_steps: int = 50
    cvi_dt: float = 5e-4
    cvi_solver: str = "cg"

    _TUPLES = ("length_scales", "ood_length_scales", "snapshot_times", "eval_times",
               "hyper_hidden", "siren_hidden", "dt_sweep", "K_sweep")

    def validate(self) -> "ExperimentConfig":
        errs = []
        if self.case not in CASES:
            errs.append(f"case must be one of {CASES}, got {self.case!r}")
        if self.stepper not in ("implicit-cn", "naive-unrolled", "explicit-euler", "explicit-rk4"):
            errs.append(f"unknown stepper {self.stepper!r}")
        if self.cvi_solver not in ("cg", "jacobi"):
            errs.append(f"unknown cvi_solver {self.cvi_solver!r}")
        for name in ("nx", "ny"):
            if getattr(self, name) < 4:
                errs.append(f"{name} must be >= 4")
        for name in ("dt", "dt_ref", "lr", "lx", "ly", "cvi_dt", "nu0"):
            if not getattr(self, name) > 0:
                errs.append(f"{name} must be positive")
        if self.k < 0:
            errs.append("k must be non-negative")
        if not 0 < self.n_train <= self.n_ics:
            errs.append("need 0 < n_train <= n_ics")
        if self.epochs < 0 or self.checkpoint_every < 0:
            errs.append("epochs and checkpoint_every must be non-negative")
        for name in ("snapshot_times", "eval_times"):
            ts = list(getattr(self, name))
            if not ts or ts[0] != 0.0 or any(b <= a for a, b in zip(ts, ts[1:])):
                errs.append(f"{name} must start at 0 and be strictly increasing")
        if errs:
            raise ConfigError("; ".join(errs))
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        base = default_config(d.get("case", "advdiff-steady"))
        kw = dataclasses.asdict(base)
        for key, val in d.items():
            default = kw[key]
            if key in cls._TUPLES:
                if not isinstance(val, (list, tuple)):
                    raise ConfigError(f"{key} must be a list")
                val = tuple(val)
            elif isinstance(default, bool) or default is None:
                pass
            elif isinstance(default, int) and not isinstance(default, bool):
                if not isinstance(val, int) or isinstance(val, bool):
                    raise ConfigError(f"{key} must be an integer, got {val!r}")
            elif isinstance(default, float):
                if not isinstance(val, (int, float)) or isinstance(val, bool):
                    raise ConfigError(f"{key} must be a number, got {val!r}")
                val = float(val)
            elif isinstance(default, str) and not isinstance(val, str):
                raise ConfigError(f"{key} must be a string, got {val!r}")
            kw[key] = val
        return cls(**kw).validate()

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    def override(self, **kw) -> "ExperimentConfig":
        d = self.to_dict()
        d.update({k: v for k, v in kw.items() if v is not None})
        return ExperimentConfig.from_dict(d)

    @property
    def grid(self) -> Grid2D:
        return Grid2D(self.nx, self.ny, self.lx, self.ly)


def default_config(case: str = "advdiff-steady") -> ExperimentConfig:
    if case not in CASES:
        raise ConfigError(f"case must be one of {CASES}, got {case!r}")
    cfg = ExperimentConfig(case=case)
    if case == "advdiff-dynamic":
        cfg.snapshot_times = DYNAMIC_TRAIN_TIMES
        cfg.eval_times = (0.0,) + DYNAMIC_EVAL_TIMES
    elif case == "burgers":
        cfg.snapshot_times = (0.0, 0.05, 0.1, 0.15)
        cfg.eval_times = (0.0, 0.05, 0.1, 0.15, 0.2)
        cfg.nw = 2
    elif case == "cvi":
        cfg.snapshot_times = (0.0, 0.005, 0.0125, 0.025)
        cfg.eval_times = (0.0, 0.005, 0.0125, 0.025)
        cfg.dt = cfg.cvi_dt
        cfg.dt_ref = cfg.cvi_dt
        cfg.n_ics, cfg.n_train = 4, 3
        cfg.lr = 3e-3
        cfg.epochs = 300
    return cfg


# ------------------------------------------------------------------ truth

@dataclass
class Truth:
    """Ground-truth coefficient data for one configuration."""
    specs: list = field(default_factory=list)
    nu: np.ndarray | None = None

    def fields(self, grid, t: float = 0.0, steady: bool = True) -> dict:
        if self.nu is not None:
            return {"nu": self.nu}
        if self.specs:
            ux, uy = velocity_truth(self.specs, grid, 0.0 if steady else t)
            return {"ux": ux, "uy": uy}
        return {}

    def to_dict(self) -> dict:
        return {"specs": [s.to_dict() for s in self.specs]}


def make_truth(cfg: ExperimentConfig, grid: Grid2D | None = None) -> Truth:
    grid = grid or cfg.grid
    if cfg.case == "cvi":
        return Truth()
    if cfg.case == "burgers":
        spec = CosineFieldSpec.sample(cfg.seed * 1000 + 1, cfg.nw).steady()
        return Truth([spec], viscosity_truth(spec, grid, cfg.nu0, cfg.nu_rel))
    specs = [CosineFieldSpec.sample(cfg.seed * 1000 + 1, cfg.nw),
             CosineFieldSpec.sample(cfg.seed * 1000 + 2, cfg.nw)]
    if cfg.case == "advdiff-steady":
        specs = [s.steady() for s in specs]
    return Truth(specs)


def truth_rhs(cfg: ExperimentConfig, truth: Truth, grid: Grid2D):
    if cfg.case == "burgers":
        spec = truth.specs[0]
        return burgers_truth_rhs(grid, viscosity_truth(spec, grid, cfg.nu0, cfg.nu_rel))
    return advdiff_truth_rhs(grid, truth.specs, cfg.k, steady=cfg.case == "advdiff-steady")


def ic_specs(cfg: ExperimentConfig, ood: bool = False) -> list[GpIcSpec]:
    rng = np.random.default_rng(cfg.seed * 1000 + (7 if ood else 3))
    if ood:
        return [GpIcSpec(float(l), seed=cfg.seed * 1000 + 500 + i, variance=cfg.ic_amplitude ** 2)
                for i, l in enumerate(cfg.ood_length_scales)]
    lo, hi = cfg.length_scales
    ls = rng.uniform(lo, hi, cfg.n_ics)
    return [GpIcSpec(float(l), seed=cfg.seed * 1000 + 100 + i, variance=cfg.ic_amplitude ** 2)
            for i, l in enumerate(ls)]


def _all_times(cfg: ExperimentConfig) -> list[float]:
    return sorted(set(cfg.snapshot_times) | set(cfg.eval_times))


def cvi_initial_porosity(cfg: ExperimentConfig, n: int) -> np.ndarray:
    rng = np.random.default_rng(cfg.seed * 1000 + 11)
    base = rng.uniform(0.5, 0.7, n)
    x = Grid1D(cfg.cvi_cells).centers()
    return np.stack([b + 0.05 * np.sin(2 * np.pi * x + 3 * b) for b in base])


def generate(cfg: ExperimentConfig, refine: int = 1) -> dict[str, SnapshotDataset]:
    """Reference datasets ``{"main": ..., "ood": ...}`` (no OOD set for CVI).

    ``refine > 1`` integrates on a grid refined by that factor and averages
    back onto the configured grid.
    """
    times = _all_times(cfg)
    meta = {"config": cfg.to_dict(), "seed": cfg.seed}
    if cfg.case == "cvi":
        grid = Grid1D(cfg.cvi_cells)
        model = CviModel(grid, TruthCviOps(), solver=cfg.cvi_solver)
        eps0 = cvi_initial_porosity(cfg, cfg.n_ics)
        t_end = times[-1]
        rc = RolloutConfig(dt=cfg.cvi_dt, t_end=t_end)
        states = []
        for e0 in eps0:
            traj = rollout(e0, np.zeros(0), rc, model)
            states.append([traj.at(t).data for t in times])
        meta["grid"] = {"n": grid.n, "length": grid.length}
        meta["truth"] = {"D0": 1.0, "S0": 40.0, "K0": 1.0}
        return {"main": SnapshotDataset(times, np.swapaxes(np.array(states), 0, 1), grid, meta)}
    grid = cfg.grid
    fine = Grid2D(cfg.nx * refine, cfg.ny * refine, cfg.lx, cfg.ly)
    truth = make_truth(cfg, fine)
    rhs = truth_rhs(cfg, truth, fine)
    meta["grid"] = {"nx": grid.nx, "ny": grid.ny, "lx": grid.lx, "ly": grid.ly}
    meta["truth"] = truth.to_dict()
    meta["refine"] = refine
    out = {}
    for name, specs in (("main", ic_specs(cfg)), ("ood", ic_specs(cfg, ood=True))):
        ic = np.stack([sample_gp_ic(s, fine) for s in specs])
        _, states = rk4_reference_rollout(ic, rhs, cfg.dt_ref, times[-1], times)
        if refine > 1:
            states = restrict(states, fine, refine)
        m = dict(meta, ics=[dataclasses.asdict(s) for s in specs])
        out[name] = SnapshotDataset(times, states, grid, m)
    return out


# ------------------------------------------------------------------ models

def build_model(cfg: ExperimentConfig, learned: bool = True):
    if cfg.case == "cvi":
        grid = Grid1D(cfg.cvi_cells)
        ops = NeuralCviOps() if learned else TruthCviOps()
        return CviModel(grid, ops, solver=cfg.cvi_solver)
    grid = cfg.grid
    horizon = max(cfg.eval_times[-1], cfg.snapshot_times[-1])
    if cfg.case == "burgers":
        if not learned:
            return BurgersModel(grid, truth=make_truth(cfg).nu)
        cnf = CNF("nu", out_dim=1, mode="steady", latent_dim=cfg.latent_dim,
                  hyper_hidden=cfg.hyper_hidden, siren_hidden=cfg.siren_hidden,
                  omega0=cfg.omega0, positive=True, scale=cfg.nu0, gain_init=cfg.gain_init)
        return BurgersModel(grid, viscosity=cnf)
    steady = cfg.case == "advdiff-steady"
    if not learned:
        truth = make_truth(cfg)
        if steady:
            return AdvDiffModel(grid, cfg.k, truth=velocity_truth(truth.specs, grid))
        return AdvDiffModel(grid, cfg.k, truth=lambda t: velocity_truth(truth.specs, grid, t))
    cnf = CNF("vel", out_dim=2, mode="steady" if steady else "dynamic", horizon=horizon,
              latent_dim=cfg.latent_dim, hyper_hidden=cfg.hyper_hidden,
              siren_hidden=cfg.siren_hidden, omega0=cfg.omega0, gain_init=cfg.gain_init)
    return AdvDiffModel(grid, cfg.k, velocity=cnf)


def rollout_config(cfg: ExperimentConfig, t_end: float | None = None, **kw) -> RolloutConfig:
    t_end = cfg.snapshot_times[-1] if t_end is None else t_end
    dt = cfg.cvi_dt if cfg.case == "cvi" else cfg.dt
    n = int(np.ceil(t_end / dt - 1e-9))
    grid_end = n * dt
    extra = tuple(t for t in _all_times(cfg) if t <= grid_end + 1e-12)
    base = dict(dt=dt, t_end=grid_end, checkpoint_every=cfg.checkpoint_every,
                stepper=cfg.stepper, extra_times=extra, K_fixed=cfg.K_fixed)
    base.update(kw)
    return RolloutConfig(**base)


def loss_spec(cfg: ExperimentConfig) -> LossSpec:
    return LossSpec(reg_weight=cfg.reg_weight, times=tuple(t for t in cfg.snapshot_times if t > 0))


def field_truth_fn(cfg: ExperimentConfig):
    if cfg.case == "cvi":
        return None
    truth = make_truth(cfg)
    steady = cfg.case != "advdiff-dynamic"
    return lambda t: truth.fields(cfg.grid, t, steady)


def train_config(cfg: ExperimentConfig, epochs: int | None = None, **kw) -> TrainConfig:
    return TrainConfig(epochs=cfg.epochs if epochs is None else epochs, lr=cfg.lr,
                       rollout=rollout_config(cfg), loss=loss_spec(cfg),
                       field_truth=field_truth_fn(cfg), **kw)


# ------------------------------------------------------------------ checkpoints

def save_checkpoint(path, params: ParamSet, adam: AdamState, epoch: int, meta: dict) -> None:
    path = Path(path)
    buf = io.BytesIO()
    np.savez(buf, params=params.flat, m=adam.m, v=adam.v, step=adam.step,
             skipped=adam.skipped, epoch=epoch)
    fio.atomic_write(path.with_suffix(".npz"), buf.getvalue())
    meta = dict(meta, epoch=epoch, layout=params.layout())
    fio.write_json(path.with_suffix(".json"), meta)


def load_checkpoint(path):
    path = Path(path)
    if not path.with_suffix(".npz").exists():
        raise FileNotFoundError(f"no checkpoint at {path.with_suffix('.npz')}")
    with np.load(path.with_suffix(".npz")) as z:
        arrays = {k: z[k] for k in z.files}
    meta = fio.read_json(path.with_suffix(".json"))
    params = ParamSet([tuple(s) for s in meta["layout"]], arrays["params"])
    adam = AdamState(arrays["m"], arrays["v"], int(arrays["step"]), int(arrays["skipped"]))
    return params, adam, int(arrays["epoch"]), meta


# ------------------------------------------------------------------ benchmarks

def bench_stability(cfg: ExperimentConfig, steppers=("explicit-euler", "implicit-cn")):
    """Frozen-truth rollouts across ``cfg.dt_sweep``.

    Errors are measured against an RK4 solution on a grid refined by
    ``cfg.ref_refine`` and averaged back.  Returns ``(per_time, final)`` row
    lists; diverged runs carry ``inf`` errors and ``diverged = 1``.
    """
    t_end = cfg.bench_t_end
    check_times = [t for t in np.round(np.arange(0.0, t_end + 1e-12, 0.02), 10) if t > 0]
    bcfg = cfg.override(snapshot_times=[0.0], eval_times=[0.0] + list(check_times))
    ref = generate(bcfg, refine=cfg.ref_refine)["main"].select([0])
    model = build_model(bcfg, learned=False)
    ic = ref.states[0]
    per_time, final = [], []
    for st in steppers:
        for dt in cfg.dt_sweep:
            rc = RolloutConfig(dt=dt, t_end=t_end, stepper=st, extra_times=tuple(check_times))
            try:
                traj = rollout(ic, np.zeros(0), rc, model)
                errs = [float(relative_error_l1(traj.at(t).data, ref.at(t))) for t in check_times]
                diverged = 0
            except DivergenceError:
                errs, diverged = [float("inf")] * len(check_times), 1
            per_time += [(st, dt, t, e, diverged) for t, e in zip(check_times, errs)]
            final.append((st, dt, errs[-1], diverged))
    return per_time, final


def _epoch_cost(model, params: ParamSet, ds: SnapshotDataset, rc: RolloutConfig, spec: LossSpec):
    meter = MemoryMeter()
    tape = Tape(meter)
    t0 = time.perf_counter()
    flat = tape.leaf(params.flat.copy())
    traj = rollout(ds.states[0], flat, rc, model)
    loss = total_loss(traj, ds, spec, flat, params.nn_mask)
    tape.backward(loss)
    return meter.peak_scalars, meter.peak_nodes, time.perf_counter() - t0, traj


def bench_cost(cfg: ExperimentConfig, n_ics: int = 2):
    """Peak stored scalars / nodes and seconds per epoch for each gradient strategy.

    Rows: ``(label, stepper, dt, K, checkpoint_every, peak_scalars, peak_nodes,
    epoch_seconds, final_l1_error)``.
    """
    bcfg = cfg.override(case="advdiff-steady", snapshot_times=[0.0, cfg.cost_t_end],
                        eval_times=[0.0, cfg.cost_t_end], n_ics=max(n_ics, 2), n_train=n_ics)
    data = generate(bcfg)["main"].select(range(n_ics))
    model = build_model(bcfg)
    params = model.init_params(cfg.seed)
    spec = LossSpec(reg_weight=0.0, times=(cfg.cost_t_end,))
    t_end = cfg.cost_t_end
    runs = [("Ex", "explicit-euler", cfg.cost_dt_ex, 0, 0),
            ("Im", "implicit-cn", cfg.cost_dt_im, 0, 0),
            ("Im-Cp", "implicit-cn", cfg.cost_dt_im, 0, 5)]
    runs += [(f"Naive-K{K}", "naive-unrolled", cfg.cost_dt_im, K, 0) for K in cfg.K_sweep]
    rows = []
    for label, st, dt, K, ce in runs:
        rc = RolloutConfig(dt=dt, t_end=t_end, stepper=st, K_fixed=max(K, 1), checkpoint_every=ce)
        scal, nodes, secs, traj = _epoch_cost(model, params, data, rc, spec)
        err = float(relative_error_l1(traj.at(t_end).data, data.at(t_end)))
        rows.append((label, st, dt, K, ce, scal, nodes, secs, err))
    return rows
