"""Binary field snapshots, CSV logs, flat key-value documents and run manifests.

Snapshot layout (little-endian throughout):

    magic      b"NSVD1" for states, b"NSVD1-ADJ" for costates
    n          int64
    L          float64
    time       float64
    ncomp      int64, always 3
    payload    float64, component by component, each n^3 block x-fastest
"""

from __future__ import annotations

import csv
import hashlib
import math
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .fields import PeriodicGrid, PhysicalVelocityField, SpectralVelocityField, to_physical

__all__ = [
    "STATE_MAGIC",
    "ADJOINT_MAGIC",
    "Snapshot",
    "write_snapshot",
    "read_snapshot",
    "write_csv",
    "read_csv",
    "write_kv",
    "read_kv",
    "write_manifest",
    "read_manifest",
    "verify_manifest",
    "energy_rows",
    "parse_value",
    "ENERGY_COLUMNS",
    "ITERATION_COLUMNS",
]

STATE_MAGIC = b"NSVD1"
ADJOINT_MAGIC = b"NSVD1-ADJ"
_HEADER = struct.Struct("<qddq")

ENERGY_COLUMNS = ("step", "time", "l2", "v_norm", "lr1_norm", "energy", "residual")
ITERATION_COLUMNS = ("iter", "cost", "grad_norm", "vi_residual", "step_size", "line_search_evals")


@dataclass(frozen=True)
class Snapshot:
    magic: bytes
    n: int
    period_length: float
    time: float
    values: np.ndarray

    def field(self, grid: PeriodicGrid | None = None) -> PhysicalVelocityField:
        if grid is None:
            grid = PeriodicGrid(self.n, self.period_length)
        elif grid.n != self.n or grid.period_length != self.period_length:
            raise ValueError(f"snapshot is for n={self.n}, L={self.period_length}; grid differs")
        return PhysicalVelocityField(grid, self.values)


def write_snapshot(path, field, time: float, magic: bytes = STATE_MAGIC) -> None:
    """Write a spectral or physical velocity field."""
    if magic not in (STATE_MAGIC, ADJOINT_MAGIC):
        raise ValueError(f"unknown snapshot magic {magic!r}")
    if isinstance(field, SpectralVelocityField):
        field = to_physical(field)
    grid = field.grid
    payload = np.concatenate([np.ravel(field.values[c], order="F") for c in range(3)])
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(_HEADER.pack(grid.n, grid.period_length, float(time), 3))
        fh.write(payload.astype("<f8").tobytes())


def read_snapshot(path) -> Snapshot:
    data = Path(path).read_bytes()
    if data.startswith(ADJOINT_MAGIC):
        magic = ADJOINT_MAGIC
    elif data.startswith(STATE_MAGIC):
        magic = STATE_MAGIC
    else:
        raise ValueError(f"{path}: not an NSVD snapshot")
    offset = len(magic)
    n, L, t, ncomp = _HEADER.unpack_from(data, offset)
    offset += _HEADER.size
    if ncomp != 3 or n <= 0:
        raise ValueError(f"{path}: bad header n={n}, components={ncomp}")
    expected = 3 * n**3 * 8
    if len(data) - offset != expected:
        raise ValueError(f"{path}: payload has {len(data) - offset} bytes, expected {expected}")
    flat = np.frombuffer(data, dtype="<f8", offset=offset).astype(np.float64)
    values = np.stack([np.reshape(flat[c * n**3 : (c + 1) * n**3], (n, n, n), order="F") for c in range(3)])
    return Snapshot(magic, int(n), float(L), float(t), values)


def _fmt(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def write_csv(path, columns, rows) -> None:
    """Rows are sequences in column order; floats are written with round-trip precision."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            if len(row) != len(columns):
                raise ValueError(f"row has {len(row)} entries, expected {len(columns)}")
            writer.writerow([_fmt(v) for v in row])


def _parse_number(text: str):
    try:
        return int(text)
    except ValueError:
        return float(text)


def read_csv(path) -> tuple[list[str], list[list]]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        columns = next(reader)
        rows = [[_parse_number(v) for v in row] for row in reader]
    return columns, rows


def write_kv(path, items: dict) -> None:
    """One ``key = value`` line per entry, in insertion order."""
    lines = []
    for key, value in items.items():
        key = str(key)
        if "=" in key or "\n" in key or key != key.strip() or not key:
            raise ValueError(f"invalid key {key!r}")
        text = _fmt(value)
        if "\n" in text:
            raise ValueError(f"value for {key!r} spans lines")
        lines.append(f"{key} = {text}\n")
    Path(path).write_text("".join(lines))


def parse_value(text: str):
    """Inverse of the key-value formatting: bool, int, float or string."""
    if text in ("true", "false"):
        return text == "true"
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        return text


def read_kv(path) -> dict:
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        if " = " not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value'")
        key, text = line.split(" = ", 1)
        out[key] = parse_value(text)
    return out


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(run_dir, name: str = "manifest.txt") -> Path:
    """List every file under run_dir (except the manifest) with its sha256."""
    root = Path(run_dir)
    entries = []
    for dirpath, _, files in os.walk(root):
        for f in files:
            p = Path(dirpath) / f
            rel = p.relative_to(root).as_posix()
            if rel != name:
                entries.append((rel, _sha256(p)))
    entries.sort()
    out = root / name
    out.write_text("".join(f"{h}  {rel}\n" for rel, h in entries))
    return out


def read_manifest(path) -> dict:
    out = {}
    for line in Path(path).read_text().splitlines():
        h, rel = line.split("  ", 1)
        out[rel] = h
    return out


def verify_manifest(run_dir, name: str = "manifest.txt") -> list[str]:
    """Paths whose current hash differs from the manifest (empty when intact)."""
    root = Path(run_dir)
    return [rel for rel, h in read_manifest(root / name).items() if not (root / rel).exists() or _sha256(root / rel) != h]


def energy_rows(balance, time_grid, r: float) -> list[tuple]:
    """Energy CSV rows for nodes 0..N; the residual on row n is that of step n-1 -> n (NaN on row 0)."""
    rows = []
    for n in range(time_grid.steps + 1):
        res = balance.continuous[n - 1] if n > 0 else math.nan
        rows.append(
            (
                n,
                float(time_grid.times[n]),
                math.sqrt(balance.l2_sq[n]),
                math.sqrt(balance.v_sq[n]),
                float(balance.lr_power[n]) ** (1.0 / (r + 1.0)),
                float(balance.energy[n]),
                float(res),
            )
        )
    return rows
