"""Command-line harness: generate, train, eval, bench-stability, bench-cost.

Exit codes: 0 success, 2 configuration or usage error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import io as fio
from .experiments import (ConfigError, ExperimentConfig, bench_cost, bench_stability,
                          build_model, default_config, field_truth_fn, generate,
                          load_checkpoint, rollout_config, save_checkpoint,
                          train_config)
from .implicit import AdjointSolveError, StepFailure
from .rootfind import RootFindError
from .tensor import Tensor
from .training import (DivergenceError, TrainingAborted, gradient_sign_agreement,
                       relative_error_l1, rollout, train)

log = logging.getLogger("imdiff")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
NUMERIC_ERRORS = (DivergenceError, StepFailure, AdjointSolveError, RootFindError,
                  TrainingAborted, FloatingPointError)
# keys whose values must agree between the dataset and a training config
DATA_KEYS = ("case", "seed", "nx", "ny", "lx", "ly", "k", "nw", "nu0", "nu_rel", "ic_amplitude",
             "dt_ref", "n_ics", "length_scales", "ood_length_scales", "cvi_cells", "cvi_dt")


def load_config(args) -> ExperimentConfig:
    if args.config:
        try:
            d = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
    else:
        d = {"case": args.case} if getattr(args, "case", None) else {}
    cfg = ExperimentConfig.from_dict(d) if d else default_config()
    over = {}
    if args.seed is not None:
        over["seed"] = args.seed
    if args.out is not None:
        over["out"] = args.out
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, val = item.split("=", 1)
        try:
            over[key] = json.loads(val)
        except json.JSONDecodeError:
            over[key] = val
    return cfg.override(**over) if over else cfg


def _out(cfg) -> Path:
    p = Path(cfg.out)
    p.mkdir(parents=True, exist_ok=True)
    return p


def cmd_generate(cfg: ExperimentConfig, force: bool = False) -> dict:
    out = _out(cfg)
    if (out / "main_manifest.json").exists() and not force:
        raise ConfigError(f"{out} already holds a dataset; use --force to overwrite")
    sets = generate(cfg)
    manifests = {name: fio.save_dataset(out, ds, name) for name, ds in sets.items()}
    fio.write_json(out / "config.json", cfg.to_dict())
    return manifests


def _check_dataset(cfg, ds):
    stored = ds.meta.get("config", {})
    diffs = []
    for key in DATA_KEYS:
        a, b = stored.get(key), cfg.to_dict().get(key)
        if a != b:
            diffs.append(f"  {key}: dataset={a!r} config={b!r}")
    missing = [t for t in cfg.snapshot_times if not any(abs(t - s) < 1e-9 for s in ds.times)]
    if missing:
        diffs.append(f"  snapshot_times not in dataset: {missing}")
    if diffs:
        raise ConfigError("config does not match dataset:\n" + "\n".join(diffs))


def _load_main(cfg):
    out = Path(cfg.out)
    if not (out / "main_manifest.json").exists():
        raise ConfigError(f"no dataset in {out}; run 'generate' first")
    ds = fio.load_dataset(out, "main")
    _check_dataset(cfg, ds)
    return ds


def cmd_train(cfg: ExperimentConfig, resume: bool = False) -> dict:
    ds = _load_main(cfg)
    out = _out(cfg)
    train_ds = ds.select(range(cfg.n_train)).subset_times(cfg.snapshot_times)
    model = build_model(cfg)
    ckpt = out / "checkpoint"
    params = adam = None
    start = 0
    if resume:
        params, adam, start, _ = load_checkpoint(ckpt)
    tc = train_config(cfg, start_epoch=start, adam=adam)
    res = train(model, train_ds, tc, params=params, log_path=out / "metrics.csv", seed=cfg.seed)
    save_checkpoint(ckpt, res.params, res.adam, res.epoch,
                    {"config": cfg.to_dict(), "final": res.final})
    return res.final


def _images(out: Path, tag: str, grid, pred, truth):
    pred2, truth2 = grid.to_2d(pred), grid.to_2d(truth)
    lo, hi = float(min(pred2.min(), truth2.min())), float(max(pred2.max(), truth2.max()))
    fio.write_png(out / f"{tag}_pred.png", pred2, lo, hi)
    fio.write_png(out / f"{tag}_truth.png", truth2, lo, hi)
    fio.write_png(out / f"{tag}_error.png", np.abs(pred2 - truth2))


def cmd_eval(cfg: ExperimentConfig) -> dict:
    ds = _load_main(cfg)
    out = _out(cfg)
    params, _, epoch, meta = load_checkpoint(out / "checkpoint")
    model = build_model(cfg)
    flat = Tensor(params.flat.copy())
    sets = {"train": ds.select(range(cfg.n_train)),
            "test": ds.select(range(cfg.n_train, cfg.n_ics))}
    if (out / "ood_manifest.json").exists():
        sets["ood"] = fio.load_dataset(out, "ood")
    horizon = ds.times[-1]
    rc = rollout_config(cfg, t_end=horizon)
    rows, summary = [], {"epoch": epoch}
    img_dir = out / "images"
    for name, sub in sets.items():
        if sub.n_ics == 0:
            continue
        traj = rollout(sub.states[0], flat, rc, model)
        eval_ts = [t for t in sub.times if t > 0]
        for b in range(sub.n_ics):
            for t in eval_ts:
                e = float(relative_error_l1(traj.at(t).data[b], sub.at(t)[b]))
                rows.append((name, b, t, e))
        pred = np.stack([traj.at(t).data for t in eval_ts])
        truth = np.stack([sub.at(t) for t in eval_ts])
        summary[f"{name}_l1_error"] = float(relative_error_l1(pred, truth))
        if hasattr(sub.grid, "to_2d"):
            for t in eval_ts:
                _images(img_dir, f"{name}_ic00_t{t:.3f}", sub.grid, traj.at(t).data[0], sub.at(t)[0])
    # training-time metric recomputed at the stored parameters
    tr = sets["train"].subset_times(cfg.snapshot_times)
    obs = [t for t in cfg.snapshot_times if t > 0]
    ttraj = rollout(tr.states[0], flat, rollout_config(cfg), model)
    summary["train_snapshot_l1_error"] = float(relative_error_l1(
        np.stack([ttraj.at(t).data for t in obs]), np.stack([tr.at(t) for t in obs])))
    ft = field_truth_fn(cfg)
    if ft is not None:
        layout = model.layout()
        p = lambda name: layout.view(flat, name)  # noqa: E731
        preds, truths = [], []
        fts = [0.0] if model.steady else list(ds.times)
        for t in fts:
            for key, val in ft(t).items():
                preds.append(model.fields(p, t)[key])
                truths.append(val)
        summary["field_l1_error"] = float(relative_error_l1(np.concatenate(preds),
                                                            np.concatenate(truths)))
        if "nu" in ft(0.0):
            summary["nu_gradient_sign_agreement"] = gradient_sign_agreement(
                model.fields(p, 0.0)["nu"], ft(0.0)["nu"], cfg.grid)
        if hasattr(cfg.grid, "to_2d"):
            for key, val in ft(0.0).items():
                _images(img_dir, f"field_{key}", cfg.grid, model.fields(p, 0.0)[key], val)
    fio.write_csv(out / "eval_errors.csv", ("set", "ic", "time", "l1_error"), rows)
    fio.write_json(out / "eval_report.json", summary)
    return summary


def cmd_bench_stability(cfg: ExperimentConfig) -> list:
    out = _out(cfg)
    per_time, final = bench_stability(cfg)
    fio.write_csv(out / "stability_error_vs_time.csv",
                  ("stepper", "dt", "time", "l1_error", "diverged"), per_time)
    fio.write_csv(out / "stability_error_vs_dt.csv",
                  ("stepper", "dt", "final_l1_error", "diverged"), final)
    return final


def cmd_bench_cost(cfg: ExperimentConfig) -> list:
    out = _out(cfg)
    rows = bench_cost(cfg)
    header = ("label", "stepper", "dt", "K", "checkpoint_every", "peak_scalars", "peak_nodes",
              "epoch_seconds", "final_l1_error")
    fio.write_csv(out / "cost.csv", header, rows)
    _bar_chart(out / "cost.png", [r[0] for r in rows], [r[5] for r in rows], [r[7] for r in rows])
    return rows


def _bar_chart(path: Path, labels, scalars, seconds):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    axes[0].bar(labels, scalars)
    axes[0].set_ylabel("peak stored scalars")
    axes[0].set_yscale("log")
    axes[1].bar(labels, seconds)
    axes[1].set_ylabel("seconds per epoch")
    for ax in axes:
        ax.tick_params(axis="x", rotation=45)
    fig.tight_layout()
    import io
    buf = io.BytesIO()
    fig.savefig(buf, format="png", dpi=100)
    plt.close(fig)
    fio.atomic_write(path, buf.getvalue())


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="imdiff", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("generate", "train", "eval", "bench-stability", "bench-cost"):
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON experiment config")
        p.add_argument("--case", help="default config for this case when --config is absent")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")
        p.add_argument("--force", action="store_true", help="overwrite existing outputs")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a top-level config key (JSON value)")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "train":
            p.add_argument("--resume", action="store_true", help="continue from checkpoint")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
        if args.command == "generate":
            result = cmd_generate(cfg, args.force)
            print(f"wrote {sum(len(m['files']) for m in result.values())} snapshot files to {cfg.out}")
        elif args.command == "train":
            print(json.dumps(cmd_train(cfg, args.resume), indent=2))
        elif args.command == "eval":
            print(json.dumps(cmd_eval(cfg), indent=2))
        elif args.command == "bench-stability":
            for st, dt, err, div in cmd_bench_stability(cfg):
                print(f"{st:16s} dt={dt:<8g} final L1 error={err:.4g}{'  (diverged)' if div else ''}")
        else:
            for row in cmd_bench_cost(cfg):
                print(f"{row[0]:12s} peak scalars={row[5]:>10d} nodes={row[6]:>7d} s/epoch={row[7]:.3f}")
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NUMERIC_ERRORS as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
