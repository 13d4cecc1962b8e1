"""Dataset manifests, raw volumes, phantoms and result files.

A dataset is a JSON manifest plus a flat little-endian binary volume in C
order with shape ``(X, Y, Z, V)``. Each of the ``V`` volumes is described by
one manifest row::

    {"Delta_ms": 19, "delta_ms": 8, "b": 800, "direction": [0.0, 0.6, 0.8]}

Rows with ``b <= b0_max`` (default 0) are baseline measurements. Optional
``labels`` (int32) and ``mask`` (uint8) volumes have shape ``(X, Y, Z)``.
Relative paths are resolved against the manifest's directory. The nominal
``b`` of each row is authoritative; q follows from ``b = q^2 dbar``.
"""

from __future__ import annotations

import csv
import json
import math
import platform
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import jsonschema
import numpy as np

from . import __version__
from .model import (
    CONNECTOME_B,
    CONNECTOME_DELTAS,
    CONNECTOME_SMALL_DELTA,
    AcquisitionScheme,
    ModelDomainError,
    SubDiffusionParams,
)
from .simulate import NoiseSpec, noiseless_signals, standard_normals

MANIFEST_FORMAT = "subdki-dataset"

_FILE = {
    "type": "object",
    "properties": {"path": {"type": "string"}, "dtype": {"type": "string"}},
    "required": ["path"],
}

MANIFEST_SCHEMA = {
    "type": "object",
    "properties": {
        "format": {"const": MANIFEST_FORMAT},
        "version": {"const": 1},
        "volume": {
            "type": "object",
            "properties": {
                "path": {"type": "string"},
                "dtype": {"enum": ["<f4"]},
                "shape": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 4, "maxItems": 4},
            },
            "required": ["path", "shape"],
        },
        "rows": {
            "type": "array",
            "items": {
                "type": "object",
                "properties": {
                    "Delta_ms": {"type": "number", "exclusiveMinimum": 0},
                    "delta_ms": {"type": "number", "exclusiveMinimum": 0},
                    "b": {"type": "number", "minimum": 0},
                    "direction": {"type": "array", "items": {"type": "number"}, "minItems": 3, "maxItems": 3},
                },
                "required": ["Delta_ms", "delta_ms", "b", "direction"],
            },
            "minItems": 1,
        },
        "b0_max": {"type": "number", "minimum": 0},
        "labels": _FILE,
        "mask": _FILE,
        "subject": {"type": "string"},
        "session": {"type": "string"},
    },
    "required": ["format", "version", "volume", "rows"],
}


class DatasetError(ValueError):
    """The manifest or its files do not describe a valid dataset."""


@dataclass(frozen=True)
class Row:
    Delta: float  # s
    delta: float  # s
    b: float
    direction: tuple

    @property
    def dbar(self) -> float:
        return self.Delta - self.delta / 3.0


@dataclass
class Dataset:
    volume: np.ndarray  # (X, Y, Z, V) float32
    rows: list
    scheme: AcquisitionScheme
    shell_rows: list  # index arrays aligned with scheme.shells
    b0_rows: np.ndarray
    labels: Optional[np.ndarray] = None
    mask: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)

    @property
    def spatial_shape(self) -> tuple:
        return self.volume.shape[:3]


def _read_raw(path: Path, dtype: str, shape: Sequence[int]) -> np.ndarray:
    dt = np.dtype(dtype)
    expected = int(np.prod(shape)) * dt.itemsize
    try:
        size = path.stat().st_size
    except OSError as exc:
        raise DatasetError(f"cannot read {path}: {exc}") from exc
    if size != expected:
        raise DatasetError(f"{path} holds {size} bytes, expected {expected} for shape {tuple(shape)} {dt}")
    return np.fromfile(path, dtype=dt).reshape(shape)


def _rows_from_manifest(raw_rows, b0_max: float) -> list:
    rows, seen = [], {}
    for i, r in enumerate(raw_rows):
        direction = tuple(float(x) for x in r["direction"])
        row = Row(r["Delta_ms"] * 1e-3, r["delta_ms"] * 1e-3, float(r["b"]), direction)
        if row.delta > row.Delta:
            raise DatasetError(f"row {i}: delta_ms exceeds Delta_ms")
        if row.b > b0_max and abs(math.sqrt(sum(x * x for x in direction)) - 1.0) > 1e-6:
            raise DatasetError(f"row {i}: direction {list(direction)} is not unit norm")
        if row in seen:
            raise DatasetError(f"row {i} duplicates row {seen[row]}")
        seen[row] = i
        rows.append(row)
    return rows


def group_shells(rows: Sequence[Row], b0_max: float = 0.0):
    """Return ``(scheme, shell_rows, b0_rows)`` for a row table."""
    b0 = np.array([i for i, r in enumerate(rows) if r.b <= b0_max], dtype=int)
    if b0.size == 0:
        raise DatasetError("no b = 0 rows")
    groups = {}
    for i, r in enumerate(rows):
        if r.b > b0_max:
            groups.setdefault((r.dbar, r.b), []).append(i)
    if not groups:
        raise DatasetError("no diffusion-weighted rows")
    keys = sorted(groups)
    try:
        scheme = AcquisitionScheme.from_b(
            [k[0] for k in keys], [k[1] for k in keys], [len(groups[k]) for k in keys], int(b0.size)
        )
    except ModelDomainError as exc:
        raise DatasetError(f"rows do not form a valid acquisition scheme: {exc}") from exc
    return scheme, [np.array(groups[k], dtype=int) for k in keys], b0


def load_dataset(manifest_path) -> Dataset:
    manifest_path = Path(manifest_path)
    try:
        manifest = json.loads(manifest_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DatasetError(f"cannot read manifest {manifest_path}: {exc}") from exc
    try:
        jsonschema.validate(manifest, MANIFEST_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise DatasetError(f"manifest invalid at {where}: {exc.message}") from exc

    base = manifest_path.parent
    shape = manifest["volume"]["shape"]
    n_vol = shape[3]
    n_rows = len(manifest["rows"])
    if n_rows != n_vol:
        missing = f"volume index {n_rows} has no row" if n_rows < n_vol else f"row {n_vol} has no volume"
        raise DatasetError(f"volume has {n_vol} volumes but manifest lists {n_rows} rows; {missing}")
    b0_max = float(manifest.get("b0_max", 0.0))
    rows = _rows_from_manifest(manifest["rows"], b0_max)
    scheme, shell_rows, b0_rows = group_shells(rows, b0_max)

    volume = _read_raw(base / manifest["volume"]["path"], manifest["volume"].get("dtype", "<f4"), shape)
    labels = mask = None
    if "labels" in manifest:
        labels = _read_raw(base / manifest["labels"]["path"], manifest["labels"].get("dtype", "<i4"), shape[:3])
    if "mask" in manifest:
        mask = _read_raw(base / manifest["mask"]["path"], manifest["mask"].get("dtype", "|u1"), shape[:3]).astype(bool)
    meta = {k: manifest[k] for k in ("subject", "session") if k in manifest}
    return Dataset(volume, rows, scheme, shell_rows, b0_rows, labels, mask, meta)


def save_dataset(out_dir, volume, rows: Sequence[Row], labels=None, mask=None, meta=None,
                 name: str = "dataset") -> Path:
    """Write volume, optional label/mask volumes and the manifest; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    volume = np.ascontiguousarray(volume, dtype="<f4")
    if volume.ndim != 4 or volume.shape[3] != len(rows):
        raise DatasetError("volume must be (X, Y, Z, V) with one row per volume")
    volume.tofile(out / f"{name}.f32")
    manifest = {
        "format": MANIFEST_FORMAT,
        "version": 1,
        "volume": {"path": f"{name}.f32", "dtype": "<f4", "shape": list(volume.shape)},
        "rows": [
            {"Delta_ms": r.Delta * 1e3, "delta_ms": r.delta * 1e3, "b": r.b, "direction": list(r.direction)}
            for r in rows
        ],
    }
    if labels is not None:
        np.ascontiguousarray(labels, dtype="<i4").tofile(out / f"{name}_labels.i32")
        manifest["labels"] = {"path": f"{name}_labels.i32", "dtype": "<i4"}
    if mask is not None:
        np.ascontiguousarray(mask, dtype="|u1").tofile(out / f"{name}_mask.u8")
        manifest["mask"] = {"path": f"{name}_mask.u8", "dtype": "|u1"}
    manifest.update(meta or {})
    path = out / f"{name}.json"
    path.write_text(json.dumps(manifest, indent=1) + "\n")
    return path


def connectome_rows(Deltas=CONNECTOME_DELTAS, b_lists=CONNECTOME_B, delta=CONNECTOME_SMALL_DELTA) -> list:
    """One b = 0 row and one row per nominal shell (a powder-averaged layout)."""
    rows = [Row(Deltas[0], delta, 0.0, (0.0, 0.0, 0.0))]
    for Delta, bs in zip(Deltas, b_lists):
        rows += [Row(Delta, delta, float(b), (1.0, 0.0, 0.0)) for b in bs]
    return rows


# label ids of the phantom regions: cerebral white matter and a cortical parcel
PHANTOM_WM_LABEL = 2
PHANTOM_GM_LABEL = 1007
PHANTOM_WM = (3e-4, 0.75)
PHANTOM_GM = (5e-4, 0.85)


def two_region_phantom(shape=(64, 64, 8), wm=PHANTOM_WM, gm=PHANTOM_GM):
    """(D_beta, beta, labels) maps: white matter in the left half, grey in the right."""
    D = np.empty(shape)
    beta = np.empty(shape)
    labels = np.empty(shape, dtype=np.int32)
    half = shape[0] // 2
    for sl, (d, bt), lab in ((np.s_[:half], wm, PHANTOM_WM_LABEL), (np.s_[half:], gm, PHANTOM_GM_LABEL)):
        D[sl], beta[sl], labels[sl] = d, bt, lab
    return D, beta, labels


def save_phantom(out_dir, D_beta, beta, rows: Sequence[Row] = None, noise: NoiseSpec = None,
                 seed: int = 0, labels=None, mask=None, s0: float = 1000.0, name: str = "phantom") -> Path:
    """Simulate a dataset from parameter maps and write it.

    Each voxel uses the noise stream of its flat index, so voxel ``i`` equals
    ``simulate_signal`` with trial index ``i`` (scaled by ``s0``).
    """
    D_beta = np.asarray(D_beta, dtype=float)
    beta = np.asarray(beta, dtype=float)
    if D_beta.shape != beta.shape or D_beta.ndim != 3:
        raise DatasetError("D_beta and beta maps must share one 3-D shape")
    for d, bt in ((D_beta.min(), beta.min()), (D_beta.max(), beta.max())):
        SubDiffusionParams(float(d), float(bt))
    rows = list(rows) if rows is not None else connectome_rows()
    noise = noise or NoiseSpec(20.0)
    b = np.array([r.b for r in rows])
    dbar = np.array([r.dbar for r in rows])
    n_vox = D_beta.size
    signal = noiseless_signals(D_beta.ravel(), beta.ravel(), b, dbar)
    if noise.sigma > 0:
        signal = signal + noise.sigma * standard_normals(seed, np.arange(n_vox), b.size)
    volume = (s0 * signal).reshape(D_beta.shape + (b.size,))
    meta = {"subject": "phantom", "session": f"seed{seed}"}
    return save_dataset(out_dir, volume, rows, labels, mask, meta, name)


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return v


def write_csv(path, rows: Sequence[dict]) -> Path:
    """Rows of dicts to CSV; floats at 17 significant digits."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fields = list(rows[0].keys()) if rows else []
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(v) for k, v in r.items()})
    return path


def read_csv(path) -> list:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))


def to_jsonable(v):
    """Plain JSON types; numpy values unwrapped, non-finite floats to None."""
    if isinstance(v, dict):
        return {str(k): to_jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [to_jsonable(x) for x in v]
    if isinstance(v, np.ndarray):
        return to_jsonable(v.tolist())
    if isinstance(v, (np.floating, float)):
        f = float(v)
        return f if math.isfinite(f) else None
    if isinstance(v, np.integer):
        return int(v)
    if isinstance(v, np.bool_):
        return bool(v)
    return v


def write_json(path, obj) -> Path:
    """Deterministic JSON (sorted keys, NaN/inf as null, shortest round-trip floats)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(to_jsonable(obj), indent=1, sort_keys=True, allow_nan=False) + "\n")
    return path


def write_run_record(out_dir, command: str, config: dict, seed: Optional[int] = None) -> Path:
    """``run.json``: command, full configuration, seed and software versions.

    No timestamps or thread counts, so reruns write identical bytes.
    """
    record = {
        "command": command,
        "config": config,
        "seed": seed,
        "version": __version__,
        "numpy": np.__version__,
        "python": platform.python_version(),
    }
    return write_json(Path(out_dir) / "run.json", record)


def save_maps(out_dir, maps: dict, name: str = "maps") -> Path:
    """Each map as a little-endian float64 raw file plus an index JSON."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    index = {"format": "subdki-maps", "maps": {}}
    for key, m in sorted(maps.items()):
        arr = np.ascontiguousarray(m, dtype="<f8")
        fname = f"{name}_{key}.f64"
        arr.tofile(out / fname)
        index["maps"][key] = {"path": fname, "shape": list(arr.shape)}
    return write_json(out / f"{name}.json", index)


def load_maps(index_path) -> dict:
    index_path = Path(index_path)
    try:
        index = json.loads(index_path.read_text())
        entries = index["maps"]
    except (OSError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise DatasetError(f"cannot read map index {index_path}: {exc}") from exc
    return {k: _read_raw(index_path.parent / v["path"], "<f8", v["shape"]) for k, v in entries.items()}
