"""Plain-text snapshot files, observation directories and CSV reports.

A snapshot is a commented header followed by ``ny`` comma-separated rows of
``nx`` values, highest ``y`` first, written with 17 significant digits.
Cells outside the walkable region are written as ``nan``.
"""

from __future__ import annotations

import csv
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, GridMismatchError

FORMAT = "kincrowd-snapshot 1"
FIELDS = ("density", "stress")
INDEX_NAME = "index.csv"


@dataclass
class Snapshot:
    values: np.ndarray  # (ny, nx), row 0 at the lowest y
    time_s: float
    field: str
    scenario: str
    nx: int
    ny: int
    dx: float
    dy: float


def snapshot_text(values, *, time_s: float, field: str, scenario: str, dx: float, dy: float,
                  mask=None) -> str:
    if field not in FIELDS:
        raise ConfigurationError(f"snapshot field must be one of {FIELDS}")
    values = np.array(values, dtype=float)
    if values.ndim != 2:
        raise GridMismatchError("snapshot values must be two-dimensional")
    if mask is not None:
        values[~np.asarray(mask, dtype=bool)] = np.nan
    ny, nx = values.shape
    header = [
        f"format: {FORMAT}",
        f"scenario: {scenario}",
        f"time_s: {time_s!r}",
        f"nx: {nx}",
        f"ny: {ny}",
        f"dx: {dx!r}",
        f"dy: {dy!r}",
        f"field: {field}",
    ]
    lines = ["# " + h for h in header]
    for row in values[::-1]:
        lines.append(",".join("nan" if np.isnan(v) else format(v, ".17g") for v in row))
    return "\n".join(lines) + "\n"


def write_text_atomic(path, text: str):
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-", suffix=path.suffix)
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_snapshot(path, values, **meta):
    write_text_atomic(path, snapshot_text(values, **meta))


def read_header(path) -> dict:
    meta = {}
    with open(path) as fh:
        for line in fh:
            if not line.startswith("#"):
                break
            key, _, val = line[1:].strip().partition(":")
            meta[key.strip()] = val.strip()
    return meta


def is_snapshot(path) -> bool:
    try:
        return read_header(path).get("format") == FORMAT
    except (OSError, UnicodeDecodeError):
        return False


def read_snapshot(path) -> Snapshot:
    meta = read_header(path)
    if meta.get("format") != FORMAT:
        raise ConfigurationError(f"{path}: not a snapshot file")
    try:
        nx, ny = int(meta["nx"]), int(meta["ny"])
        snap_meta = dict(time_s=float(meta["time_s"]), field=meta["field"],
                         scenario=meta.get("scenario", ""), nx=nx, ny=ny,
                         dx=float(meta["dx"]), dy=float(meta["dy"]))
    except (KeyError, ValueError) as exc:
        raise ConfigurationError(f"{path}: malformed header ({exc})") from exc
    data = np.loadtxt(path, delimiter=",", comments="#", ndmin=2)
    if data.shape != (ny, nx):
        raise GridMismatchError(f"{path}: {data.shape[0]}x{data.shape[1]} values, header says "
                                f"{ny}x{nx}")
    return Snapshot(values=data[::-1].copy(), **snap_meta)


def check_snapshot_grid(snap: Snapshot, spec, label: str):
    """Raise GridMismatchError unless ``snap`` lives on the grid of ``spec``."""
    if (snap.ny, snap.nx) != spec.shape:
        raise GridMismatchError(f"{label}: grid {snap.ny}x{snap.nx} does not match "
                                f"{spec.ny}x{spec.nx}")
    if not (np.isclose(snap.dx, spec.dx, rtol=1e-12) and np.isclose(snap.dy, spec.dy, rtol=1e-12)):
        raise GridMismatchError(f"{label}: cell size ({snap.dx}, {snap.dy}) does not match "
                                f"({spec.dx}, {spec.dy})")


def write_csv_atomic(path, header, rows):
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-", suffix=".csv")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for r in rows:
                w.writerow([format(v, ".17g") if isinstance(v, float) else v for v in r])
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_csv(path) -> tuple[list, list]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ConfigurationError(f"{path}: empty CSV")
    return rows[0], rows[1:]


def frame_name(k: int) -> str:
    return f"frame_{k:04d}.csv"


def write_observations(directory, series, *, scenario: str, spec, reference_time_s: float,
                       mask=None):
    """One snapshot per frame plus an index of (frame, time_s, file)."""
    directory = Path(directory)
    rows = []
    for k, (t, fr) in enumerate(zip(series.times, series.frames), start=1):
        name = frame_name(k)
        t_s = float(t * reference_time_s)
        write_snapshot(directory / name, fr, time_s=t_s, field="density", scenario=scenario,
                       dx=spec.dx, dy=spec.dy, mask=mask)
        rows.append((k, t_s, name))
    write_csv_atomic(directory / INDEX_NAME, ["frame", "time_s", "file"], rows)


def read_observations(directory, spec, reference_time_s: float, dt: float, stride: int = 1):
    """Load an observation directory written by :func:`write_observations`.

    Frames are checked against the grid of ``spec``; ``nan`` entries (cells
    outside the walkable region) are read back as 0.
    """
    from .inverse import ObservationSeries

    directory = Path(directory)
    index = directory / INDEX_NAME
    if not index.is_file():
        raise ConfigurationError(f"{directory}: missing {INDEX_NAME}")
    header, rows = read_csv(index)
    if header[:3] != ["frame", "time_s", "file"]:
        raise ConfigurationError(f"{index}: unexpected header {header}")
    times, frames = [], []
    for row in rows:
        snap = read_snapshot(directory / row[2])
        check_snapshot_grid(snap, spec, f"frame {row[2]}")
        if snap.field != "density":
            raise ConfigurationError(f"frame {row[2]} holds {snap.field}, not density")
        times.append(float(row[1]) / reference_time_s)
        frames.append(np.nan_to_num(snap.values, nan=0.0))
    times = np.array(times)
    # times pass through seconds; snap them back onto the solver's step grid
    steps = np.round(times / dt)
    if np.any(np.abs(steps * dt - times) > 1e-9 * np.maximum(1.0, times)):
        raise ConfigurationError("observation times are not multiples of the time step")
    return ObservationSeries(times=steps * dt, frames=frames, stride=stride, dt=dt)


def list_snapshots(directory, field: str = "density") -> dict:
    """Map snapshot time (seconds) to path for every ``field`` snapshot in ``directory``."""
    out = {}
    for p in sorted(Path(directory).glob("*.csv")):
        if p.name == INDEX_NAME or not is_snapshot(p):
            continue
        meta = read_header(p)
        if meta.get("field") == field:
            out[round(float(meta["time_s"]), 9)] = p
    return out
