"""Native field file, ASCII PLY point clouds, PNG montages and tabular logs.

The field file is a small binary container (primitives are not a raster, so
NIfTI is the wrong vessel): magic ``GSVR``, format version u32, count N u64,
then the contiguous little-endian float32 arrays means (N,3), log_scales
(N,3), quaternions (N,4) and intensities (N,). All writers in this module are
deterministic byte-for-byte for identical inputs.
"""

from __future__ import annotations

import csv
import json
import struct
from pathlib import Path
from typing import Dict, List, Sequence, Union

import numpy as np
from PIL import Image

from .errors import InvalidParameterError, UnsupportedFormatError
from .field import GaussianField
from .motion import SliceStates
from .volume import VolumeGrid

FIELD_MAGIC = b"GSVR"
FIELD_VERSION = 1
_WINDOW_PERCENTILES = (0.5, 99.5)

_PLY_PROPERTIES = ("x", "y", "z", "len0", "len1", "len2",
                   "qw", "qx", "qy", "qz", "intensity")


# --------------------------------------------------------------------------
# Field file

def write_field(field: GaussianField, path: Union[str, Path]) -> None:
    """Serialize a field to the native binary container (float32)."""
    n = field.count
    with open(path, "wb") as f:
        f.write(FIELD_MAGIC)
        f.write(struct.pack("<I", FIELD_VERSION))
        f.write(struct.pack("<Q", n))
        for arr in (field.means, field.log_scales,
                    field.quaternions, field.intensities):
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_field(path: Union[str, Path]) -> GaussianField:
    """Load a field written by `write_field`; arrays come back float32."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 16:
        raise UnsupportedFormatError(f"{path}: too short for a field file")
    if raw[:4] != FIELD_MAGIC:
        raise UnsupportedFormatError(f"{path}: magic {raw[:4]!r} is not {FIELD_MAGIC!r}")
    version = struct.unpack_from("<I", raw, 4)[0]
    if version != FIELD_VERSION:
        raise UnsupportedFormatError(f"{path}: unsupported field file version {version}")
    n = struct.unpack_from("<Q", raw, 8)[0]
    expected = 16 + 4 * n * (3 + 3 + 4 + 1)
    if len(raw) != expected:
        raise UnsupportedFormatError(
            f"{path}: expected {expected} bytes for N={n}, file has {len(raw)}")
    offset = 16
    arrays = []
    for count in (3 * n, 3 * n, 4 * n, n):
        arrays.append(np.frombuffer(raw, dtype="<f4", count=int(count),
                                    offset=offset).copy())
        offset += 4 * count
    return GaussianField(means=arrays[0].reshape(-1, 3),
                         log_scales=arrays[1].reshape(-1, 3),
                         quaternions=arrays[2].reshape(-1, 4),
                         intensities=arrays[3])


# --------------------------------------------------------------------------
# ASCII PLY point cloud

def export_pointcloud(field: GaussianField, gamma: float,
                      path: Union[str, Path]) -> None:
    """ASCII PLY: position, gamma-scaled principal-axis lengths, orientation
    quaternion and intensity per primitive. Shrinking the ellipsoids (gamma < 1)
    declutters dense clouds for inspection."""
    if not (0.0 < gamma <= 1.0):
        raise InvalidParameterError(f"gamma must be in (0, 1], got {gamma}")
    lengths = gamma * field.scales()
    rows = np.column_stack([field.means, lengths, field.quaternions,
                            field.intensities])
    lines = ["ply", "format ascii 1.0",
             "comment axis lengths are gamma-scaled standard deviations in mm",
             f"element vertex {field.count}"]
    lines += [f"property float {name}" for name in _PLY_PROPERTIES]
    lines.append("end_header")
    body = "\n".join(" ".join(f"{v:.9g}" for v in row) for row in rows)
    text = "\n".join(lines) + "\n" + (body + "\n" if field.count else "")
    Path(path).write_text(text)


def read_pointcloud(path: Union[str, Path]) -> Dict[str, np.ndarray]:
    """Parse an ASCII PLY written by `export_pointcloud`.

    Returns arrays: positions (N,3), axis_lengths (N,3), quaternions (N,4),
    intensities (N,).
    """
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines or lines[0] != "ply":
        raise UnsupportedFormatError(f"{path}: not a PLY file")
    try:
        header_end = lines.index("end_header")
    except ValueError:
        raise UnsupportedFormatError(f"{path}: missing end_header") from None
    count = 0
    for line in lines[:header_end]:
        if line.startswith("element vertex"):
            count = int(line.split()[-1])
    body = lines[header_end + 1: header_end + 1 + count]
    if len(body) != count:
        raise UnsupportedFormatError(f"{path}: expected {count} vertex rows")
    data = np.array([[float(tok) for tok in line.split()] for line in body],
                    dtype=np.float64).reshape(count, len(_PLY_PROPERTIES))
    return {"positions": data[:, 0:3], "axis_lengths": data[:, 3:6],
            "quaternions": data[:, 6:10], "intensities": data[:, 10]}


# --------------------------------------------------------------------------
# PNG slice montage

def montage_tiling(n_slices: int) -> tuple:
    """(rows, cols) of the near-square montage: cols = ceil(sqrt(n)),
    rows = ceil(n / cols)."""
    cols = int(np.ceil(np.sqrt(n_slices)))
    rows = int(np.ceil(n_slices / cols))
    return rows, cols


def export_slices(grid: VolumeGrid, axis: Union[str, int],
                  path: Union[str, Path]) -> None:
    """8-bit grayscale PNG montage of all slices along one axis.

    Slices are laid out row-major in the tiling from `montage_tiling`. The
    intensity window is the 0.5-99.5 percentile range over the grid's mask
    (whole volume when no mask is set).
    """
    axis_map = {"x": 0, "y": 1, "z": 2, 0: 0, 1: 1, 2: 2}
    if axis not in axis_map:
        raise InvalidParameterError(f"axis must be one of x, y, z; got {axis!r}")
    ax = axis_map[axis]
    data = np.asarray(grid.data, dtype=np.float64)
    sel = data[grid.mask] if grid.mask is not None and grid.mask.any() else data
    lo, hi = np.percentile(sel, _WINDOW_PERCENTILES)
    if hi <= lo:
        hi = lo + 1.0
    windowed = np.clip((data - lo) / (hi - lo), 0.0, 1.0)

    slices = np.moveaxis(windowed, ax, 0)
    n, h, w = slices.shape
    rows, cols = montage_tiling(n)
    canvas = np.zeros((rows * h, cols * w), dtype=np.uint8)
    quantized = np.round(slices * 255.0).astype(np.uint8)
    for i in range(n):
        r, c = divmod(i, cols)
        canvas[r * h:(r + 1) * h, c * w:(c + 1) * w] = quantized[i]
    Image.fromarray(canvas, mode="L").save(Path(path), format="PNG")


# --------------------------------------------------------------------------
# Run history and slice-state tables

_HISTORY_COLUMNS = ("epoch", "loss", "data", "reg", "outlier", "lr_scale",
                    "reseeded", "seconds", "psnr", "ssim")


def write_history_csv(history: Sequence[dict], path: Union[str, Path]) -> None:
    """One CSV row per epoch; empty cells for metrics not recorded that epoch."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(_HISTORY_COLUMNS)
        for record in history:
            writer.writerow(["" if record.get(col) is None else record.get(col)
                             for col in _HISTORY_COLUMNS])


def write_history_json(history: Sequence[dict], path: Union[str, Path]) -> None:
    with open(path, "w") as f:
        json.dump(list(history), f, indent=1)
        f.write("\n")


def read_history(path: Union[str, Path]) -> List[dict]:
    with open(path) as f:
        history = json.load(f)
    if not isinstance(history, list):
        raise UnsupportedFormatError(f"{path}: history must be a JSON array")
    return history


def write_states_json(states_per_stack: Sequence[SliceStates],
                      path: Union[str, Path]) -> None:
    """Per-stack rigid corrections (e.g. simulation truth) as JSON."""
    doc = [{"quaternions": s.quaternions.tolist(),
            "translations": s.translations.tolist(),
            "log_sigma": s.log_sigma.tolist(),
            "eta": s.eta.tolist()} for s in states_per_stack]
    with open(path, "w") as f:
        json.dump(doc, f, indent=1)
        f.write("\n")


def read_states_json(path: Union[str, Path]) -> List[SliceStates]:
    with open(path) as f:
        doc = json.load(f)
    return [SliceStates(entry["quaternions"], entry["translations"],
                        entry["log_sigma"], entry["eta"]) for entry in doc]
