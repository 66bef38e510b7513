import json

import numpy as np
import pytest
from PIL import Image

from imdiff import io as fio
from imdiff.cli import EXIT_CONFIG, EXIT_NUMERIC, EXIT_OK, main
from imdiff.experiments import ConfigError, ExperimentConfig, default_config

TINY = {"nx": 8, "ny": 8, "n_ics": 3, "n_train": 2, "epochs": 3, "hyper_hidden": [8],
        "siren_hidden": [8], "latent_dim": 4, "eval_times": [0.0, 0.05, 0.1]}


def write_cfg(tmp_path, **kw):
    d = dict(TINY, out=str(tmp_path / "run"), **kw)
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(d))
    return str(path), tmp_path / "run"


def digests(run, prefix):
    return {p.name: fio.sha256_file(p) for p in sorted(run.glob(f"{prefix}*.imdf"))}


def test_generate_deterministic_and_times(tmp_path):
    cfg, run = write_cfg(tmp_path)
    assert main(["generate", "--config", cfg]) == EXIT_OK
    first = digests(run, "main")
    man = fio.read_json(run / "main_manifest.json")
    assert man["times"] == [0.0, 0.05, 0.1]
    assert main(["generate", "--config", cfg]) == EXIT_CONFIG
    assert main(["generate", "--config", cfg, "--force"]) == EXIT_OK
    assert digests(run, "main") == first
    assert len(first) == 3 * 3


def test_dataset_times_default_cases():
    steady = default_config("advdiff-steady")
    assert set(steady.snapshot_times) == {0.0, 0.05}
    dyn = default_config("advdiff-dynamic")
    assert list(dyn.snapshot_times) == [0.0, 0.05, 0.102, 0.15, 0.201, 0.25, 0.298, 0.35]
    assert len(default_config("burgers").snapshot_times) == 4


def test_config_validation():
    with pytest.raises(ConfigError, match="unknown config keys"):
        ExperimentConfig.from_dict({"bogus": 1})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"nx": 2.5})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"case": "heat"})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"snapshot_times": [0.05, 0.1]})
    cfg = default_config().override(seed=3)
    assert ExperimentConfig.from_dict(cfg.to_dict()) == cfg


def test_usage_errors_exit_2(tmp_path, capsys):
    assert main([]) == EXIT_CONFIG
    assert main(["train", "--out", str(tmp_path / "nothing")]) == EXIT_CONFIG
    assert "generate" in capsys.readouterr().err
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["generate", "--config", str(bad)]) == EXIT_CONFIG
    assert main(["generate", "--out", str(tmp_path / "x"), "--set", "epochs"]) == EXIT_CONFIG


def test_config_dataset_mismatch_reports_diff(tmp_path, capsys):
    cfg, run = write_cfg(tmp_path)
    assert main(["generate", "--config", cfg]) == EXIT_OK
    capsys.readouterr()
    assert main(["train", "--config", cfg, "--set", "k=0.2"]) == EXIT_CONFIG
    err = capsys.readouterr().err
    assert "k: dataset=0.1 config=0.2" in err


def test_numerical_failure_exit_3(tmp_path, capsys):
    cfg, run = write_cfg(tmp_path, k=500.0)
    with np.errstate(all="ignore"):
        assert main(["generate", "--config", cfg]) == EXIT_NUMERIC
    assert "non-finite values at step" in capsys.readouterr().err


def test_train_resume_eval(tmp_path):
    cfg, run = write_cfg(tmp_path)
    assert main(["generate", "--config", cfg]) == EXIT_OK
    assert main(["train", "--config", cfg]) == EXIT_OK
    header, rows = fio.read_csv(run / "metrics.csv")
    assert header == ["epoch", "loss", "state_l1_error", "field_l1_error", "peak_nodes",
                      "peak_scalars", "epoch_seconds"]
    assert [int(r[0]) for r in rows] == [0, 1, 2]
    assert (run / "metrics.csv").read_bytes().count(b"\r\n") == 4
    ck = fio.read_json(run / "checkpoint.json")
    assert ck["epoch"] == 3

    assert main(["train", "--config", cfg, "--resume"]) == EXIT_OK
    _, rows = fio.read_csv(run / "metrics.csv")
    assert [int(r[0]) for r in rows] == [0, 1, 2, 3, 4, 5]
    final = fio.read_json(run / "checkpoint.json")["final"]

    assert main(["eval", "--config", cfg]) == EXIT_OK
    rep = fio.read_json(run / "eval_report.json")
    assert rep["epoch"] == 6
    assert abs(rep["train_snapshot_l1_error"] - final["state_l1_error"]) <= 1e-12
    for key in ("train_l1_error", "test_l1_error", "ood_l1_error", "field_l1_error"):
        assert np.isfinite(rep[key])
    header, rows = fio.read_csv(run / "eval_errors.csv")
    assert header == ["set", "ic", "time", "l1_error"]
    keys = [(r[0], r[1], r[2]) for r in rows]
    assert len(keys) == len(set(keys))
    n_ood = fio.read_json(run / "ood_manifest.json")["n_ics"]
    assert sum(r[0] == "ood" for r in rows) == n_ood * 2
    assert sum(r[0] == "train" for r in rows) == 2 * 2

    png = run / "images" / "test_ic00_t0.100_pred.png"
    img = np.asarray(Image.open(png))
    assert img.dtype == np.uint8 and img.shape == (8, 8)
    side = fio.read_json(str(png) + ".json")
    assert side["min"] <= side["max"]
    for kind in ("truth", "error"):
        assert (run / "images" / f"test_ic00_t0.100_{kind}.png").exists()


def test_eval_without_checkpoint(tmp_path):
    cfg, run = write_cfg(tmp_path)
    assert main(["generate", "--config", cfg]) == EXIT_OK
    assert main(["eval", "--config", cfg]) == EXIT_CONFIG


def test_bench_stability_outputs(tmp_path):
    cfg, run = write_cfg(tmp_path, dt_sweep=[1e-3, 5e-2], bench_t_end=0.5, ref_refine=1, k=1.0)
    assert main(["bench-stability", "--config", cfg]) == EXIT_OK
    header, rows = fio.read_csv(run / "stability_error_vs_dt.csv")
    assert header == ["stepper", "dt", "final_l1_error", "diverged"]
    assert len(rows) == 4
    diverged = [r for r in rows if r[3] == "1"]
    assert all(r[2] == "inf" for r in diverged)
    assert any(r[0] == "explicit-euler" and float(r[1]) == 5e-2 for r in diverged)
    # Ex and Im agree below the explicit stability limit
    small = {r[0]: float(r[2]) for r in rows if float(r[1]) == 1e-3}
    assert abs(small["explicit-euler"] - small["implicit-cn"]) < 0.01
    body = (run / "stability_error_vs_time.csv").read_bytes()
    assert main(["bench-stability", "--config", cfg]) == EXIT_OK
    assert (run / "stability_error_vs_time.csv").read_bytes() == body


def test_bench_cost_outputs(tmp_path):
    cfg, run = write_cfg(tmp_path, K_sweep=[2, 4, 8], cost_t_end=0.05, cost_dt_ex=1e-3,
                         cost_dt_im=5e-3)
    assert main(["bench-cost", "--config", cfg]) == EXIT_OK
    header, rows = fio.read_csv(run / "cost.csv")
    assert header[:7] == ["label", "stepper", "dt", "K", "checkpoint_every", "peak_scalars",
                          "peak_nodes"]
    by = {r[0]: r for r in rows}
    naive = [int(r[5]) for r in rows if r[1] == "naive-unrolled"]
    assert len(naive) == 3 and all(b > a for a, b in zip(naive, naive[1:]))
    im = [r for r in rows if r[1] == "implicit-cn" and r[4] == "0"]
    cp = [r for r in rows if r[1] == "implicit-cn" and r[4] != "0"]
    assert im and cp and int(cp[0][5]) < int(im[0][5])
    assert len(by) == len(rows)
    assert Image.open(run / "cost.png").format == "PNG"


def test_imdf_roundtrip_and_errors(tmp_path):
    v = np.arange(12.0)
    buf = fio.encode_field(v, 4, 3, 0.25)
    assert buf[:4] == b"IMDF" and len(buf) == 4 + 4 + 4 + 4 + 8 + 96
    out, nx, ny, t = fio.decode_field(buf)
    np.testing.assert_array_equal(out, v)
    assert (nx, ny, t) == (4, 3, 0.25)
    with pytest.raises(ValueError):
        fio.decode_field(b"XXXX" + buf[4:])
    with pytest.raises(ValueError):
        fio.decode_field(buf[:-8])
    with pytest.raises(ValueError):
        fio.encode_field(v, 5, 3, 0.0)


def test_atomic_write_leaves_no_temp(tmp_path):
    p = tmp_path / "a.bin"
    fio.atomic_write(p, b"one")
    fio.atomic_write(p, b"two")
    assert p.read_bytes() == b"two"
    assert [q.name for q in tmp_path.iterdir()] == ["a.bin"]


def test_csv_rfc4180(tmp_path):
    p = tmp_path / "x.csv"
    fio.write_csv(p, ("a", "b"), [("x,y", 'q"z'), (1, 2.5)])
    assert p.read_bytes() == b'a,b\r\n"x,y","q""z"\r\n1,2.5\r\n'
    assert fio.read_csv(p) == (["a", "b"], [["x,y", 'q"z'], ["1", "2.5"]])


def test_bench_cost_default_trends():
    from imdiff.experiments import bench_cost
    rows = {r[0]: r for r in bench_cost(default_config())}
    assert rows["Ex"][2] == 1e-4 and rows["Im"][2] == 2e-3
    # equal accuracy against the data, far less stored state
    assert abs(rows["Ex"][8] - rows["Im"][8]) <= 0.01 * rows["Im"][8]
    assert rows["Ex"][5] >= 5 * rows["Im"][5]
    assert rows["Im-Cp"][5] < rows["Im"][5]
    naive = [rows[f"Naive-K{K}"][5] for K in (4, 8, 16, 32)]
    assert all(b > a for a, b in zip(naive, naive[1:]))
