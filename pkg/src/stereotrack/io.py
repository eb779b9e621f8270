"""On-disk formats: raw float grids with JSON sidecars, polyline tables, CSV and PGM."""

from __future__ import annotations

import csv
import hashlib
import json
from pathlib import Path

import numpy as np

from .grid import Polyline3

__all__ = [
    "save_grid",
    "load_grid",
    "save_polylines",
    "load_polylines",
    "save_csv",
    "load_csv",
    "save_pgm",
    "load_pgm",
    "sha256_file",
    "write_json",
    "read_json",
]

DTYPE_TAG = "f32le"
ORDER_TAG = "x-fastest"


def _stem(path) -> Path:
    p = Path(path)
    return p.with_suffix("") if p.suffix in (".json", ".raw") else p


def save_grid(path, arr, pitch: float = 1.0, components: bool = False) -> tuple:
    """Write ``arr`` as ``<path>.raw`` (little-endian float32, x fastest) plus
    ``<path>.json`` metadata. Returns the two paths.

    ``arr`` is an image ``(H, W)``, a volume ``(nz, ny, nx)`` or, with
    ``components=True``, a field with its components on the first axis.
    """
    arr = np.asarray(arr)
    if not np.all(np.isfinite(arr)):
        raise ValueError("grid values must be finite")
    spatial = arr.shape[1:] if components else arr.shape
    if len(spatial) not in (2, 3):
        raise ValueError(f"cannot store a grid of shape {arr.shape}")
    stem = _stem(path)
    stem.parent.mkdir(parents=True, exist_ok=True)
    meta = {
        "dims": list(spatial[::-1]),  # (width, height[, depth]) fastest first
        "components": int(arr.shape[0]) if components else 0,
        "pitch": float(pitch),
        "dtype": DTYPE_TAG,
        "order": ORDER_TAG,
    }
    raw = stem.with_suffix(".raw")
    raw.write_bytes(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    side = stem.with_suffix(".json")
    write_json(side, meta)
    return side, raw


def load_grid(path):
    """Read a grid written by :func:`save_grid`; returns ``(array, metadata)``."""
    stem = _stem(path)
    meta = read_json(stem.with_suffix(".json"))
    if meta.get("dtype") != DTYPE_TAG or meta.get("order") != ORDER_TAG:
        raise ValueError(f"unsupported grid encoding {meta.get('dtype')!r}/{meta.get('order')!r}")
    shape = tuple(meta["dims"][::-1])
    if meta.get("components"):
        shape = (meta["components"],) + shape
    data = np.frombuffer(stem.with_suffix(".raw").read_bytes(), dtype="<f4")
    if data.size != int(np.prod(shape)):
        raise ValueError(f"payload holds {data.size} values, metadata expects {int(np.prod(shape))}")
    return data.reshape(shape).astype(np.float64), meta


def save_polylines(path, lines) -> Path:
    """One row per point: ``line_id,x,y,z``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["line_id", "x", "y", "z"])
        for i, line in enumerate(lines):
            for x, y, z in np.asarray(line.points, dtype=np.float64):
                w.writerow([i, repr(float(x)), repr(float(y)), repr(float(z))])
    return path


def load_polylines(path, radius: float = 1.0) -> list:
    with Path(path).open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    if rows and set(rows[0]) != {"line_id", "x", "y", "z"}:
        raise ValueError("polyline table needs the header line_id,x,y,z")
    groups: dict = {}
    for r in rows:
        groups.setdefault(int(r["line_id"]), []).append((float(r["x"]), float(r["y"]), float(r["z"])))
    return [Polyline3(np.array(groups[k]), radius=radius) for k in sorted(groups)]


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return "" if v is None else str(v)


def save_csv(path, rows, columns=None) -> Path:
    """Write dict rows; ``columns`` fixes the order (default: first row's keys)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = list(rows)
    if columns is None:
        columns = list(rows[0]) if rows else []
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r.get(c)) for c in columns])
    return path


def load_csv(path) -> list:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))


def save_pgm(path, img, lo: float | None = None, hi: float | None = None) -> Path:
    """8-bit binary PGM of ``img`` scaled linearly from ``[lo, hi]`` (default: its range)."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError("PGM export takes a 2D image")
    lo = float(img.min()) if lo is None else lo
    hi = float(img.max()) if hi is None else hi
    scaled = np.zeros(img.shape) if hi <= lo else (img - lo) / (hi - lo)
    data = np.clip(np.round(scaled * 255.0), 0, 255).astype(np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    h, w = data.shape
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode() + data.tobytes())
    return path


def load_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM file")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval > 255:
        raise ValueError("only 8-bit PGM is supported")
    return np.frombuffer(parts[4][: w * h], dtype=np.uint8).reshape(h, w)


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_json(path, obj) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


def read_json(path):
    return json.loads(Path(path).read_text())
