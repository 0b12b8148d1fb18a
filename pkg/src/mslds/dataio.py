"""Trajectory file formats and dataset directories.

Two interchangeable on-disk forms:

* CSV: header ``t,x0,x1,...``, one frame per row, floats written with 17
  significant digits so values round-trip exactly.
* Binary (``.msld``): magic bytes ``MSLD``, u16 format version, u32 frame
  count T, u32 dimension d, then T*d little-endian float64 values row-major.

A dataset is a directory of trajectory files. An optional ``manifest.json``
({"files": [{"path": ..., "weight": ...}, ...]}) fixes the file list and
order; without one, every ``*.csv`` and ``*.msld`` file is loaded in sorted
name order. All writes go through a temp-file-and-rename so readers never
observe a partial file.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError
from .model import Trajectory

_MAGIC = b"MSLD"
_VERSION = 1
_HEADER = struct.Struct("<4sHII")


@dataclass(frozen=True)
class Dataset:
    """Ordered trajectories with per-file weights from the manifest.

    Weights ride along for external tooling; estimation treats weight 0 as
    "exclude" and anything else as include-once.
    """

    trajectories: tuple[Trajectory, ...]
    weights: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        trajs = tuple(self.trajectories)
        if self.weights is None:
            weights = np.ones(len(trajs))
        else:
            weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        if weights.shape[0] != len(trajs):
            raise DataError("one weight per trajectory required")
        if np.any(weights < 0.0) or not np.all(np.isfinite(weights)):
            raise DataError("weights must be finite and non-negative")
        object.__setattr__(self, "trajectories", trajs)
        object.__setattr__(self, "weights", weights)


def atomic_write_bytes(path: Path, payload: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or Path("."), prefix=path.name + ".")
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(payload)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def _as_frames(data: np.ndarray | Trajectory) -> np.ndarray:
    if isinstance(data, Trajectory):
        data = data.data
    frames = np.asarray(data, dtype=np.float64)
    if frames.ndim != 2:
        raise DataError("trajectory data must be a T x d matrix")
    return frames


def write_trajectory_csv(path: str | Path, data: np.ndarray | Trajectory) -> None:
    frames = _as_frames(data)
    header = "t," + ",".join(f"x{i}" for i in range(frames.shape[1]))
    lines = [header]
    for t, row in enumerate(frames):
        lines.append(str(t) + "," + ",".join(format(v, ".17g") for v in row))
    atomic_write_bytes(Path(path), ("\n".join(lines) + "\n").encode("utf-8"))


def read_trajectory_csv(path: str | Path) -> Trajectory:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise DataError(f"{path}: empty trajectory file")
    cols = lines[0].split(",")
    if cols[0].strip() != "t" or any(
        c.strip() != f"x{i}" for i, c in enumerate(cols[1:])
    ):
        raise DataError(f"{path}: header must be t,x0,x1,...")
    d = len(cols) - 1
    if d < 1:
        raise DataError(f"{path}: no observation columns")
    frames = np.empty((len(lines) - 1, d))
    last_t = -np.inf
    for i, line in enumerate(lines[1:]):
        parts = line.split(",")
        if len(parts) != d + 1:
            raise DataError(f"{path}: row {i} has {len(parts) - 1} columns, expected {d}")
        try:
            t_val = float(parts[0])
            frames[i] = [float(p) for p in parts[1:]]
        except ValueError as exc:
            raise DataError(f"{path}: row {i}: {exc}") from exc
        if t_val <= last_t:
            raise DataError(f"{path}: time column must be strictly increasing")
        last_t = t_val
    try:
        return Trajectory(data=frames, source_id=str(path))
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from exc


def write_trajectory_bin(path: str | Path, data: np.ndarray | Trajectory) -> None:
    frames = _as_frames(data)
    t_frames, d = frames.shape
    header = _HEADER.pack(_MAGIC, _VERSION, t_frames, d)
    payload = np.ascontiguousarray(frames, dtype="<f8").tobytes()
    atomic_write_bytes(Path(path), header + payload)


def read_trajectory_bin(path: str | Path) -> Trajectory:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    if len(raw) < _HEADER.size:
        raise DataError(f"{path}: truncated header")
    magic, version, t_frames, d = _HEADER.unpack_from(raw)
    if magic != _MAGIC:
        raise DataError(f"{path}: bad magic bytes")
    if version != _VERSION:
        raise DataError(f"{path}: unsupported format version {version}")
    expected = _HEADER.size + 8 * t_frames * d
    if len(raw) != expected:
        raise DataError(f"{path}: size {len(raw)} does not match header ({expected})")
    frames = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size).reshape(t_frames, d)
    try:
        return Trajectory(data=frames.astype(np.float64), source_id=str(path))
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from exc


def write_trajectory(path: str | Path, data: np.ndarray | Trajectory) -> None:
    """Dispatch on suffix: .msld is binary, anything else CSV."""
    if Path(path).suffix == ".msld":
        write_trajectory_bin(path, data)
    else:
        write_trajectory_csv(path, data)


def read_trajectory(path: str | Path) -> Trajectory:
    if Path(path).suffix == ".msld":
        return read_trajectory_bin(path)
    return read_trajectory_csv(path)


def write_states_csv(path: str | Path, states: np.ndarray) -> None:
    """State-sequence companion file: header ``t,state``, one row per frame."""
    states = np.asarray(states)
    lines = ["t,state"] + [f"{t},{int(s)}" for t, s in enumerate(states)]
    atomic_write_bytes(Path(path), ("\n".join(lines) + "\n").encode("utf-8"))


def load_dataset(root: str | Path) -> Dataset:
    """Load a dataset directory, honoring manifest.json when present."""
    root = Path(root)
    if root.is_file():
        return Dataset(trajectories=(read_trajectory(root),))
    if not root.is_dir():
        raise DataError(f"{root}: not a file or directory")
    manifest = root / "manifest.json"
    if manifest.exists():
        try:
            doc = json.loads(manifest.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"{manifest}: {exc}") from exc
        entries = doc.get("files")
        if not isinstance(entries, list) or not entries:
            raise DataError(f"{manifest}: needs a non-empty 'files' list")
        paths, weights = [], []
        for entry in entries:
            if isinstance(entry, str):
                entry = {"path": entry}
            if not isinstance(entry, dict) or "path" not in entry:
                raise DataError(f"{manifest}: each entry needs a 'path'")
            paths.append(root / entry["path"])
            weights.append(float(entry.get("weight", 1.0)))
    else:
        paths = sorted(
            p for p in root.iterdir() if p.suffix in (".csv", ".msld") and p.is_file()
        )
        weights = [1.0] * len(paths)
    if not paths:
        raise DataError(f"{root}: no trajectory files found")
    trajectories = tuple(read_trajectory(p) for p in paths)
    dims = {t.dim for t in trajectories}
    if len(dims) > 1:
        raise DataError(f"{root}: inconsistent dimensions {sorted(dims)}")
    return Dataset(trajectories=trajectories, weights=np.asarray(weights))
