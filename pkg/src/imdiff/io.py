"""On-disk formats: IMDF field snapshots, dataset manifests, CSV metrics, PNG images.

Every writer goes through :func:`atomic_write`: data is written to a temporary
file in the target directory and renamed over the destination.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

__all__ = ["IMDF_MAGIC", "IMDF_VERSION", "atomic_write", "write_json", "read_json",
           "encode_field", "decode_field", "write_field", "read_field", "write_csv",
           "read_csv", "write_png", "save_dataset", "load_dataset", "sha256_file"]

IMDF_MAGIC = b"IMDF"
IMDF_VERSION = 1
_HEADER = struct.Struct("<4sIIId")


def atomic_write(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json(path, obj) -> None:
    atomic_write(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode())


def read_json(path):
    with open(path) as fh:
        return json.load(fh)


def encode_field(values, nx: int, ny: int, time: float) -> bytes:
    v = np.asarray(values, dtype="<f8").reshape(-1)
    if v.size != nx * ny:
        raise ValueError(f"{v.size} values do not fill a {nx}x{ny} grid")
    return _HEADER.pack(IMDF_MAGIC, IMDF_VERSION, nx, ny, float(time)) + v.tobytes()


def decode_field(buf: bytes):
    """Returns ``(values, nx, ny, time)``."""
    if len(buf) < _HEADER.size:
        raise ValueError("truncated IMDF header")
    magic, version, nx, ny, t = _HEADER.unpack_from(buf)
    if magic != IMDF_MAGIC:
        raise ValueError(f"bad magic {magic!r}")
    if version != IMDF_VERSION:
        raise ValueError(f"unsupported IMDF version {version}")
    body = buf[_HEADER.size:]
    if len(body) != 8 * nx * ny:
        raise ValueError(f"IMDF body has {len(body)} bytes, expected {8 * nx * ny}")
    return np.frombuffer(body, dtype="<f8").astype(np.float64), nx, ny, t


def write_field(path, values, nx: int, ny: int, time: float) -> None:
    atomic_write(path, encode_field(values, nx, ny, time))


def read_field(path):
    with open(path, "rb") as fh:
        return decode_field(fh.read())


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(header)
    for r in rows:
        w.writerow(r)
    atomic_write(path, buf.getvalue().encode())


def read_csv(path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def write_png(path, image2d, vmin: float | None = None, vmax: float | None = None) -> dict:
    """8-bit grayscale PNG with a ``.json`` sidecar holding the value range.

    Row 0 of ``image2d`` (the lowest y) is drawn at the bottom.
    """
    from PIL import Image

    a = np.asarray(image2d, dtype=np.float64)
    lo = float(np.min(a)) if vmin is None else float(vmin)
    hi = float(np.max(a)) if vmax is None else float(vmax)
    scale = (a - lo) / (hi - lo) if hi > lo else np.zeros_like(a)
    pix = np.clip(np.round(scale * 255.0), 0, 255).astype(np.uint8)[::-1]
    buf = io.BytesIO()
    Image.fromarray(pix, mode="L").save(buf, format="PNG")
    atomic_write(path, buf.getvalue())
    meta = {"min": lo, "max": hi, "shape": list(a.shape)}
    write_json(str(path) + ".json", meta)
    return meta


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def save_dataset(out_dir, dataset, name: str = "data") -> dict:
    """Write one IMDF file per (IC, time) plus ``<name>_manifest.json``."""
    out_dir = Path(out_dir)
    grid = dataset.grid
    nx, ny = getattr(grid, "nx", grid.n), getattr(grid, "ny", 1)
    files = []
    for b in range(dataset.n_ics):
        for i, t in enumerate(dataset.times):
            fname = f"{name}_ic{b:02d}_t{i:02d}.imdf"
            write_field(out_dir / fname, dataset.states[i, b], nx, ny, t)
            files.append({"ic": b, "time": t, "file": fname, "sha256": sha256_file(out_dir / fname)})
    manifest = {"format": "IMDF", "version": IMDF_VERSION, "name": name, "nx": nx, "ny": ny,
                "times": list(dataset.times), "n_ics": dataset.n_ics, "files": files,
                "meta": dataset.meta}
    write_json(out_dir / f"{name}_manifest.json", manifest)
    return manifest


def load_dataset(out_dir, name: str = "data", grid=None):
    from .data import SnapshotDataset
    from .pde import Grid1D, Grid2D

    out_dir = Path(out_dir)
    man = read_json(out_dir / f"{name}_manifest.json")
    times = man["times"]
    states = np.zeros((len(times), man["n_ics"], man["nx"] * man["ny"]))
    for f in man["files"]:
        vals, nx, ny, t = read_field(out_dir / f["file"])
        i = times.index(f["time"])
        if abs(t - f["time"]) > 0:
            raise ValueError(f"{f['file']}: header time {t} does not match manifest")
        states[i, f["ic"]] = vals
    if grid is None:
        g = man["meta"].get("grid", {})
        if man["ny"] == 1:
            grid = Grid1D(man["nx"], g.get("length", 1.0))
        else:
            grid = Grid2D(man["nx"], man["ny"], g.get("lx", 2.0), g.get("ly", 1.0))
    return SnapshotDataset(times, states, grid, man["meta"])
