"""Rollouts, snapshot loss, Adam and the training loop."""
from __future__ import annotations

import csv
import logging
import os
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .data import SnapshotDataset
from .implicit import AdjointSolveError, AdjointWarmStart, StepFailure, implicit_step, naive_unrolled_step
from .params import ParamSet
from .rootfind import RootStats
from .tensor import MemoryMeter, Tape, Tensor

__all__ = ["RolloutConfig", "LossSpec", "Trajectory", "DivergenceError", "rollout",
           "total_loss", "AdamState", "adam_step", "relative_error_l1", "L1Error",
           "gradient_sign_agreement",
           "MemoryReport", "memory_report", "METRIC_COLUMNS", "MetricLog", "TrainConfig",
           "TrainResult", "TrainingAborted", "train", "evaluate"]

log = logging.getLogger(__name__)

STEPPERS = ("implicit-cn", "naive-unrolled", "explicit-euler", "explicit-rk4")


class DivergenceError(RuntimeError):
    def __init__(self, step_index: int, max_abs: float):
        super().__init__(f"state diverged at step {step_index} (max |phi| = {max_abs:.3e})")
        self.step_index = step_index
        self.max_abs = max_abs


@dataclass
class RolloutConfig:
    dt: float = 1e-2
    t_end: float = 0.05
    checkpoint_every: int = 0
    stepper: str = "implicit-cn"
    extra_times: tuple = ()
    root_method: str = "newton"
    tol: float = 1e-10
    max_iter: int = 50
    linear_tol: float = 1e-8
    adjoint_tol: float = 1e-8
    K_fixed: int = 8
    diverge_at: float = 1e6

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        m = self.t_end / self.dt
        if abs(m - round(m)) > 1e-9:
            raise ValueError(f"t_end={self.t_end} is not an integer multiple of dt={self.dt}")
        if self.stepper not in STEPPERS:
            raise ValueError(f"unknown stepper {self.stepper!r}; expected one of {STEPPERS}")
        if self.checkpoint_every < 0:
            raise ValueError("checkpoint_every must be >= 0")

    def time_grid(self) -> np.ndarray:
        """Uniform grid of step ``dt`` with ``extra_times`` inserted."""
        base = list(self.dt * np.arange(int(round(self.t_end / self.dt)) + 1))
        base[-1] = float(self.t_end)
        for t in self.extra_times:
            if t < 0 or t > self.t_end + 1e-9:
                raise ValueError(f"extra time {t} outside [0, {self.t_end}]")
            if min(abs(t - s) for s in base) > 1e-9:
                base.append(float(t))
        return np.array(sorted(base))


@dataclass
class Trajectory:
    times: np.ndarray
    states: list
    stats: RootStats = field(default_factory=RootStats)
    adjoint: AdjointWarmStart = field(default_factory=AdjointWarmStart)

    def index_of(self, t: float, tol: float = 1e-9) -> int:
        i = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[i] - t) > tol:
            raise ValueError(f"observation time {t} is not on the rollout grid")
        return i

    def at(self, t: float) -> Tensor:
        return self.states[self.index_of(t)]

    def data(self) -> np.ndarray:
        return np.stack([s.data for s in self.states])


def _flat_tensor(params) -> Tensor:
    if isinstance(params, Tensor):
        return params
    if isinstance(params, ParamSet):
        return Tensor(params.flat.copy())
    return Tensor(np.asarray(params, dtype=np.float64))


def rollout(ic, params, config: RolloutConfig, model, stats: RootStats | None = None) -> Trajectory:
    """Autoregressive rollout of ``model`` from ``ic`` over ``config.time_grid()``.

    ``params`` is the flat parameter tensor (on a live tape to get gradients).
    With ``checkpoint_every > 0`` every block of that many steps is one
    checkpoint node whose interior is recomputed during backward.
    """
    times = config.time_grid()
    layout = model.layout()
    flat = _flat_tensor(params)
    if flat.shape != (layout.size,):
        raise ValueError(f"model expects {layout.size} parameters, got {flat.shape}")
    stats = stats if stats is not None else RootStats()
    warm = AdjointWarmStart()
    custom_step = getattr(model, "step", None)
    steady = model.steady and custom_step is None

    def viewer(P):
        return lambda name: layout.view(P, name)

    phi0 = ic if isinstance(ic, Tensor) else Tensor(np.asarray(ic, dtype=np.float64))
    P0 = model.coefficients(viewer(flat), float(times[0])) if steady else flat

    def run(phi, P, i0, i1):
        """Steps ``i0 -> i1``; returns the list of new states."""
        cache = {}

        def coeff(t):
            if steady:
                return P
            if t not in cache:
                cache[t] = model.coefficients(viewer(P), t)
            return cache[t]

        out = []
        for i in range(i0, i1):
            t0, t1 = float(times[i]), float(times[i + 1])
            phi = _advance(phi, P, t0, t1, i, coeff, config, model, custom_step, viewer,
                           stats, warm, steady)
            m = float(np.max(np.abs(phi.data))) if phi.size else 0.0
            if not np.isfinite(m) or m > config.diverge_at:
                raise DivergenceError(i + 1, m)
            out.append(phi)
        return out

    n_steps = len(times) - 1
    states = [phi0]
    k = config.checkpoint_every
    if k <= 0:
        states += run(phi0, P0, 0, n_steps)
    else:
        phi = phi0
        for i0 in range(0, n_steps, k):
            i1 = min(i0 + k, n_steps)
            seg = T.checkpoint(lambda x, P, i0=i0, i1=i1: run(x, P, i0, i1), phi, P0,
                               name=f"segment[{i0}:{i1}]")
            seg = seg if isinstance(seg, list) else [seg]
            states += seg
            phi = seg[-1]
    return Trajectory(times, states, stats, warm)


def _advance(phi, P, t0, t1, i, coeff, config, model, custom_step, viewer, stats, warm, steady):
    dt = t1 - t0
    if custom_step is not None:
        return custom_step(phi, viewer(P), t0, t1, config, i, warm, stats=stats)
    st = config.stepper
    if st == "explicit-euler":
        return phi + dt * model.rhs(phi, coeff(t0))
    if st == "explicit-rk4":
        cm = coeff(0.5 * (t0 + t1))
        k1 = model.rhs(phi, coeff(t0))
        k2 = model.rhs(phi + (0.5 * dt) * k1, cm)
        k3 = model.rhs(phi + (0.5 * dt) * k2, cm)
        k4 = model.rhs(phi + dt * k3, coeff(t1))
        return phi + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)

    if steady:
        theta = coeff(t0)

        def residual(x, prev, th):
            return x - prev - (0.5 * dt) * (model.rhs(x, th) + model.rhs(prev, th))
    else:
        theta = T.stack([coeff(t1), coeff(t0)])

        def residual(x, prev, th):
            return x - prev - (0.5 * dt) * (model.rhs(x, T.getitem(th, 0))
                                            + model.rhs(prev, T.getitem(th, 1)))

    if st == "naive-unrolled":
        return naive_unrolled_step(residual, phi, theta, config.K_fixed, stats=stats)
    return implicit_step(residual, phi, theta, method=config.root_method, tol=config.tol,
                         max_iter=config.max_iter, linear_tol=config.linear_tol,
                         adjoint_tol=config.adjoint_tol, step_index=i + 1, warm=warm,
                         stats=stats)


@dataclass
class LossSpec:
    data_weight: float = 1.0
    reg_weight: float = 1e-6
    times: tuple | None = None       # observed times; None = every dataset time after 0
    masks: dict | None = None        # time -> boolean mask over cells


def total_loss(traj: Trajectory, dataset: SnapshotDataset, spec: LossSpec,
               params: Tensor | None = None, nn_mask: np.ndarray | None = None) -> Tensor:
    """Sum over observed snapshots of the mean squared mismatch, plus weight decay on NN weights."""
    times = spec.times if spec.times is not None else [t for t in dataset.times if t > 0]
    loss = Tensor(np.array(0.0))
    for t in times:
        i = traj.index_of(t)
        target = dataset.at(t)
        diff = traj.states[i] - target
        if spec.masks is not None and t in spec.masks:
            m = np.broadcast_to(np.asarray(spec.masks[t], dtype=float), diff.shape)
            term = T.sum(T.square(diff) * m) * (1.0 / max(m.sum(), 1.0))
        else:
            term = T.mean(T.square(diff))
        loss = loss + spec.data_weight * term
    if spec.reg_weight and params is not None:
        w = params if nn_mask is None else params * nn_mask.astype(float)
        loss = loss + spec.reg_weight * T.sum(T.square(w))
    return loss


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    skipped: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n))


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState, lr: float = 1e-3,
              betas: tuple = (0.9, 0.999), eps: float = 1e-8):
    """One bias-corrected Adam update; returns ``(new_params, state)``.

    A non-finite gradient skips the update and increments ``state.skipped``.
    """
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape or state.m.shape != params.shape:
        raise ValueError(f"shape mismatch: params {params.shape}, grads {grads.shape},"
                         f" state {state.m.shape}")
    if not np.all(np.isfinite(grads)):
        state.skipped += 1
        log.warning("non-finite gradient, skipping update (%d skipped so far)", state.skipped)
        return params.copy(), state
    b1, b2 = betas
    state.step += 1
    state.m = b1 * state.m + (1 - b1) * grads
    state.v = b2 * state.v + (1 - b2) * grads ** 2
    mhat = state.m / (1 - b1 ** state.step)
    vhat = state.v / (1 - b2 ** state.step)
    return params - lr * mhat / (np.sqrt(vhat) + eps), state


class L1Error(float):
    """Float carrying whether the absolute fallback was used (zero-norm truth)."""
    absolute: bool = False


def relative_error_l1(pred, truth) -> L1Error:
    pred, truth = np.asarray(pred, dtype=float), np.asarray(truth, dtype=float)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {truth.shape}")
    denom = float(np.sum(np.abs(truth)))
    if denom == 0.0:
        out = L1Error(float(np.mean(np.abs(pred - truth))))
        out.absolute = True
        return out
    return L1Error(float(np.sum(np.abs(pred - truth))) / denom)


def gradient_sign_agreement(pred, truth, grid) -> float:
    """Fraction of (cell, axis) pairs where periodic central differences agree in sign."""
    nb = grid.neighbors
    pred, truth = np.asarray(pred, dtype=float), np.asarray(truth, dtype=float)
    agree = []
    for fwd, bwd in ((1, 2), (3, 4)):
        dp = pred[..., nb[fwd]] - pred[..., nb[bwd]]
        dt = truth[..., nb[fwd]] - truth[..., nb[bwd]]
        agree.append(np.sign(dp) == np.sign(dt))
    return float(np.mean(agree))


@dataclass
class MemoryReport:
    peak_nodes: int
    peak_scalars: int
    epoch_seconds: float

    def as_row(self) -> dict:
        return {"peak_nodes": self.peak_nodes, "peak_scalars": self.peak_scalars,
                "epoch_seconds": self.epoch_seconds}


def memory_report(run) -> MemoryReport:
    """Counters from a :class:`MemoryMeter`, a tape, or a ``(meter, seconds)`` pair."""
    seconds = 0.0
    if isinstance(run, tuple):
        run, seconds = run
    meter = run.meter if isinstance(run, Tape) else run
    if not isinstance(meter, MemoryMeter):
        raise TypeError("memory_report needs a MemoryMeter or Tape")
    return MemoryReport(meter.peak_nodes, meter.peak_scalars, float(seconds))


METRIC_COLUMNS = ("epoch", "loss", "state_l1_error", "field_l1_error", "peak_nodes",
                  "peak_scalars", "epoch_seconds")


class MetricLog:
    """Append-only metric rows; optionally streamed to a CSV file, flushed per row."""

    def __init__(self, path: str | os.PathLike | None = None, append: bool = False,
                 columns: Sequence[str] = METRIC_COLUMNS):
        self.columns = tuple(columns)
        self.rows: list[dict] = []
        self.path = path
        self._fh = None
        if path is not None:
            exists = append and os.path.exists(path)
            if exists:
                with open(path, newline="") as fh:
                    reader = csv.DictReader(fh)
                    if tuple(reader.fieldnames or ()) != self.columns:
                        raise ValueError(f"{path}: header {reader.fieldnames} does not match")
                    self.rows = [{k: float(v) for k, v in r.items()} for r in reader]
            self._fh = open(path, "a" if exists else "w", newline="")
            self._writer = csv.DictWriter(self._fh, fieldnames=self.columns, lineterminator="\r\n")
            if not exists:
                self._writer.writeheader()
                self._flush()

    def _flush(self):
        self._fh.flush()
        os.fsync(self._fh.fileno())

    def append(self, row: dict) -> None:
        if set(row) != set(self.columns):
            raise ValueError(f"row keys {sorted(row)} do not match columns {self.columns}")
        if "epoch" in row and self.rows and row["epoch"] <= self.rows[-1]["epoch"]:
            raise ValueError("epoch numbers must increase")
        self.rows.append(dict(row))
        if self._fh is not None:
            self._writer.writerow(row)
            self._flush()

    def close(self):
        if self._fh is not None:
            self._fh.close()
            self._fh = None

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows], dtype=float)

    def __len__(self):
        return len(self.rows)


class TrainingAborted(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 2000
    lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    rollout: RolloutConfig = field(default_factory=RolloutConfig)
    loss: LossSpec = field(default_factory=LossSpec)
    lr_overrides: dict = field(default_factory=dict)   # segment name -> learning rate
    field_truth: Callable | dict | None = None
    start_epoch: int = 0
    adam: AdamState | None = None
    max_bad: int = 5
    callback: Callable | None = None


@dataclass
class TrainResult:
    params: ParamSet
    log: MetricLog
    adam: AdamState
    final: dict
    epoch: int


def _field_error(model, p, field_truth, times) -> float:
    if field_truth is None:
        return float("nan")
    ts = [0.0] if model.steady else list(times)
    preds, truths = [], []
    for t in ts:
        truth = field_truth(t) if callable(field_truth) else field_truth
        pred = model.fields(p, t)
        for name, val in truth.items():
            preds.append(np.asarray(pred[name]).reshape(-1))
            truths.append(np.asarray(val).reshape(-1))
    return float(relative_error_l1(np.concatenate(preds), np.concatenate(truths)))


def evaluate(model, params: ParamSet, dataset: SnapshotDataset, rollout_cfg: RolloutConfig,
             loss_spec: LossSpec, field_truth=None) -> dict:
    """Loss and errors at fixed parameters (no gradient)."""
    flat = Tensor(params.flat.copy())
    traj = rollout(dataset.states[0], flat, rollout_cfg, model)
    loss = total_loss(traj, dataset, loss_spec, flat, params.nn_mask)
    times = loss_spec.times if loss_spec.times is not None else [t for t in dataset.times if t > 0]
    pred = np.stack([traj.at(t).data for t in times])
    truth = np.stack([dataset.at(t) for t in times])
    layout = model.layout()
    p = lambda name: layout.view(flat, name)  # noqa: E731
    return {"loss": float(loss.data), "state_l1_error": float(relative_error_l1(pred, truth)),
            "field_l1_error": _field_error(model, p, field_truth, dataset.times),
            "trajectory": traj}


def train(model, dataset: SnapshotDataset, config: TrainConfig, params: ParamSet | None = None,
          log_path=None, seed: int = 0) -> TrainResult:
    """Epoch loop: rollout, loss, backward through the implicit steps, Adam.

    Each epoch is one pass over all trajectories in ``dataset`` (they are
    batched into a single rollout).  The logged loss and errors are those of
    the parameters before that epoch's update.
    """
    params = params.copy() if params is not None else model.init_params(seed)
    adam = config.adam if config.adam is not None else AdamState.zeros(params.size)
    lr = np.full(params.size, config.lr)
    for name, val in config.lr_overrides.items():
        lr[params.slice(name)] = val
    mlog = MetricLog(log_path, append=config.start_epoch > 0)
    obs_times = config.loss.times if config.loss.times is not None else \
        [t for t in dataset.times if t > 0]
    truth = np.stack([dataset.at(t) for t in obs_times])
    bad = 0
    epoch = config.start_epoch
    try:
        for epoch in range(config.start_epoch, config.start_epoch + config.epochs):
            t_start = time.perf_counter()
            meter = MemoryMeter()
            tape = Tape(meter)
            flat = tape.leaf(params.flat.copy())
            try:
                traj = rollout(dataset.states[0], flat, config.rollout, model)
                loss = total_loss(traj, dataset, config.loss, flat, params.nn_mask)
                loss_val = float(loss.data)
                grads = tape.backward(loss)[flat] if np.isfinite(loss_val) else None
            except (DivergenceError, StepFailure, AdjointSolveError, FloatingPointError) as exc:
                log.warning("epoch %d: %s", epoch, exc)
                loss_val, grads, traj = float("nan"), None, None
            if grads is None or not np.isfinite(loss_val):
                bad += 1
                if bad >= config.max_bad:
                    raise TrainingAborted(f"{bad} consecutive non-finite epochs (last at {epoch})")
                state_err = field_err = float("nan")
            else:
                bad = 0
                pred = np.stack([traj.at(t).data for t in obs_times])
                state_err = float(relative_error_l1(pred, truth))
                p = lambda name, f=flat: model.layout().view(Tensor(f.data), name)  # noqa: E731
                field_err = _field_error(model, p, config.field_truth, dataset.times)
                new, adam = adam_step(params.flat, grads, adam, lr, config.betas, config.eps)
                params.flat = new
            mlog.append({"epoch": epoch, "loss": loss_val, "state_l1_error": state_err,
                         "field_l1_error": field_err, "peak_nodes": meter.peak_nodes,
                         "peak_scalars": meter.peak_scalars,
                         "epoch_seconds": time.perf_counter() - t_start})
            if config.callback is not None:
                config.callback(epoch, mlog.rows[-1], params)
        end_epoch = config.start_epoch + config.epochs
        final = evaluate(model, params, dataset, config.rollout, config.loss, config.field_truth)
        final.pop("trajectory")
    finally:
        mlog.close()
    return TrainResult(params, mlog, adam, final, end_epoch)
