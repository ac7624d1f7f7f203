"""On-disk formats: the ``CPD1`` matrix file and per-run snapshot archives.

A ``CPD1`` file is the 4 magic bytes ``b"CPD1"``, a little-endian u32 row
count, a u32 column count and then ``rows * cols`` little-endian float64
values in column-major order.

A snapshot archive is one directory per run::

    geometry.json   L, R_n, delta, theta, dL, X_max, Y_max
    grid.bin        J x 2
    <var>.bin       J x T, one file per field variable
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .grid import GeometryParams, Grid

MAGIC = b"CPD1"
_HEADER = struct.Struct("<4sII")


def encode_matrix(a) -> bytes:
    a = np.asarray(a, dtype="<f8")
    if a.ndim == 1:
        a = a[:, None]
    if a.ndim != 2:
        raise ValidationError(f"CPD1 stores 2-D arrays, got {a.ndim}-D")
    return _HEADER.pack(MAGIC, a.shape[0], a.shape[1]) + a.tobytes(order="F")


def decode_matrix(buf: bytes, name: str = "<buffer>") -> np.ndarray:
    if len(buf) < _HEADER.size:
        raise ValidationError(f"{name}: truncated header")
    magic, rows, cols = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise ValidationError(f"{name}: bad magic {magic!r}")
    expected = _HEADER.size + 8 * rows * cols
    if len(buf) != expected:
        raise ValidationError(f"{name}: expected {expected} bytes for {rows}x{cols}, got {len(buf)}")
    data = np.frombuffer(buf, dtype="<f8", offset=_HEADER.size, count=rows * cols)
    return data.reshape((rows, cols), order="F").astype(float)


def write_matrix(path, a) -> None:
    Path(path).write_bytes(encode_matrix(a))


def read_matrix(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"missing file {path}")
    return decode_matrix(path.read_bytes(), str(path))


def dump_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n")


def load_json(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"missing file {path}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON ({exc})") from exc


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@dataclass
class SnapshotEnsemble:
    """One run: its geometry, grid and ``J x T`` field per variable."""

    geometry: GeometryParams
    grid: Grid
    fields: dict

    def __post_init__(self):
        self.geometry = self.geometry.with_extent(self.grid)
        shapes = {np.shape(v) for v in self.fields.values()}
        if len(shapes) > 1:
            raise ValidationError(f"field variables disagree in shape: {shapes}")
        for name, v in self.fields.items():
            v = np.asarray(v, dtype=float)
            if v.ndim != 2 or v.shape[0] != self.grid.J:
                raise ValidationError(f"field {name!r} must be J x T with J={self.grid.J}, got {v.shape}")
            self.fields[name] = v

    @property
    def variables(self) -> list:
        return list(self.fields)

    @property
    def T(self) -> int:
        return next(iter(self.fields.values())).shape[1] if self.fields else 0


def write_archive(directory, run: SnapshotEnsemble) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    dump_json(d / "geometry.json", run.geometry.to_dict())
    write_matrix(d / "grid.bin", run.grid.points)
    for name, values in run.fields.items():
        write_matrix(d / f"{name}.bin", values)
    return d


def read_archive(directory, variables=None) -> SnapshotEnsemble:
    d = Path(directory)
    if not d.is_dir():
        raise ValidationError(f"snapshot archive {d} does not exist")
    geom = GeometryParams.from_dict(load_json(d / "geometry.json"))
    pts = read_matrix(d / "grid.bin")
    if pts.shape[1] != 2:
        raise ValidationError(f"{d / 'grid.bin'} must have 2 columns, has {pts.shape[1]}")
    if variables is None:
        variables = sorted(p.stem for p in d.glob("*.bin") if p.name != "grid.bin")
    fields = {v: read_matrix(d / f"{v}.bin") for v in variables}
    return SnapshotEnsemble(geom, Grid(pts), fields)
