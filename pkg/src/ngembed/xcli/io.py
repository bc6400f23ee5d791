"""File formats: trajectories, metrics CSV and JSON manifests.

Trajectory CSV (canonical)::

    # ngembed trajectory
    # p=<p>,m=<m>,d=<d>,n_times=<n>
    time,theta_0,...,theta_<p-1>
    <one row per stored time>

Trajectory binary: the 8 bytes ``NGTRAJ01``, then four little-endian int64
values (p, m, d, n_times), then n_times records of p + 1 little-endian
float64 values ``(t, theta_0, ..., theta_<p-1>)``.

All floats are written with ``%.17g`` so files round-trip exactly.  Every
write goes to a temporary file in the target directory that is renamed into
place.
"""
from __future__ import annotations

import io
import json
import os
import tempfile
from pathlib import Path

import numpy as np

MAGIC = b"NGTRAJ01"
FLOAT_FMT = "%.17g"


def atomic_write(path, data) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "wb" if isinstance(data, (bytes, bytearray)) else "w"
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, mode) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def _fmt(x) -> str:
    return FLOAT_FMT % x


def write_trajectory_csv(path, times, thetas, m: int, d: int) -> Path:
    thetas = np.asarray(thetas, dtype=float)
    n, p = thetas.shape
    buf = io.StringIO()
    buf.write("# ngembed trajectory\n")
    buf.write(f"# p={p},m={m},d={d},n_times={n}\n")
    buf.write(",".join(["time"] + [f"theta_{i}" for i in range(p)]) + "\n")
    for t, th in zip(times, thetas):
        buf.write(",".join([_fmt(t)] + [_fmt(v) for v in th]) + "\n")
    return atomic_write(path, buf.getvalue())


def write_trajectory_binary(path, times, thetas, m: int, d: int) -> Path:
    thetas = np.asarray(thetas, dtype=float)
    n, p = thetas.shape
    header = np.array([p, m, d, n], dtype="<i8").tobytes()
    body = np.column_stack([np.asarray(times, dtype=float), thetas]).astype("<f8").tobytes()
    return atomic_write(path, MAGIC + header + body)


def read_trajectory(path):
    """Read either layout; returns ``(times, thetas, header_dict)``."""
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(len(MAGIC))
    if head == MAGIC:
        raw = path.read_bytes()
        p, m, d, n = np.frombuffer(raw, dtype="<i8", count=4, offset=len(MAGIC)).tolist()
        body = np.frombuffer(raw, dtype="<f8", offset=len(MAGIC) + 32)
        if body.size != n * (p + 1):
            raise ValueError(f"{path}: expected {n * (p + 1)} values, found {body.size}")
        rec = body.reshape(n, p + 1)
        return rec[:, 0].copy(), rec[:, 1:].copy(), dict(p=p, m=m, d=d, n_times=n)
    lines = path.read_text().splitlines()
    if len(lines) < 3 or not lines[1].startswith("# "):
        raise ValueError(f"{path}: not an ngembed trajectory")
    header = {k: int(v) for k, v in (item.split("=") for item in lines[1][2:].split(","))}
    rows = np.array([[float(v) for v in line.split(",")] for line in lines[3:]]).reshape(-1, header["p"] + 1)
    if len(rows) != header["n_times"]:
        raise ValueError(f"{path}: header says {header['n_times']} rows, found {len(rows)}")
    return rows[:, 0], rows[:, 1:], header


def write_metrics_csv(path, columns: dict) -> Path:
    """Columns given as name -> sequence; integer columns are written as integers."""
    names = list(columns)
    cols = [np.asarray(columns[k]) for k in names]
    n = len(cols[0])
    if any(len(c) != n for c in cols):
        raise ValueError("metric columns differ in length")
    buf = io.StringIO()
    buf.write(",".join(names) + "\n")
    for i in range(n):
        buf.write(",".join(str(int(c[i])) if np.issubdtype(c.dtype, np.integer) else _fmt(c[i]) for c in cols) + "\n")
    return atomic_write(path, buf.getvalue())


def read_metrics_csv(path) -> dict:
    lines = Path(path).read_text().splitlines()
    names = lines[0].split(",")
    data = np.array([[float(v) for v in line.split(",")] for line in lines[1:]]).reshape(-1, len(names))
    return {k: data[:, i] for i, k in enumerate(names)}


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, Path):
        return str(obj)
    return obj


def write_json(path, obj) -> Path:
    return atomic_write(path, json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n")
