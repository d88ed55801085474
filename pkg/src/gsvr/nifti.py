"""NIfTI-1 reader/writer for a documented subset of the format.

Supported on read: little-endian NIfTI-1 files, magic ``n+1\\0`` (single-file,
data at ``vox_offset``) or ``ni1\\0`` (header/data pair, data in the sibling
``.img``), data types uint8/int16/float32/float64, 3-D shapes (higher ``dim[0]``
accepted when the trailing dimensions are all 1). The affine comes from the
sform when ``sform_code > 0``, else the qform, else spacings on the diagonal.
Raw values are rescaled by ``scl_slope``/``scl_inter`` (slope 0 means 1) and,
unless disabled, mapped to [0, 1] by the volume's 0.5-99.5 percentile window;
the window is returned so callers can invert it.

Writing always produces a single-file little-endian float32 NIfTI-1 with an
sform affine and ``vox_offset = 352`` (348-byte header plus a 4-byte zero
extension flag), so the file size is exactly ``352 + 4 * nx * ny * nz`` bytes
and the output is deterministic for identical inputs.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Tuple, Union

import numpy as np

from .errors import InvalidParameterError, UnsupportedFormatError
from .geometry import quat_to_rotation
from .motion import SliceStack
from .volume import VolumeGrid

HEADER_SIZE = 348
SINGLE_FILE_OFFSET = 352  # header + 4-byte extension flag
_DTYPES = {2: np.dtype("<u1"), 4: np.dtype("<i2"),
           16: np.dtype("<f4"), 64: np.dtype("<f8")}
_PERCENTILES = (0.5, 99.5)


@dataclass(frozen=True)
class IntensityNormalization:
    """Affine intensity window mapping raw values to [0, 1] and back."""

    lo: float
    hi: float

    @staticmethod
    def identity() -> "IntensityNormalization":
        return IntensityNormalization(0.0, 1.0)

    def normalize(self, values: np.ndarray) -> np.ndarray:
        v = (np.asarray(values, dtype=np.float64) - self.lo) / (self.hi - self.lo)
        return np.clip(v, 0.0, 1.0)

    def denormalize(self, values: np.ndarray) -> np.ndarray:
        return np.asarray(values, dtype=np.float64) * (self.hi - self.lo) + self.lo


def _unpack_header(raw: bytes, path: Path) -> dict:
    if len(raw) < HEADER_SIZE:
        raise UnsupportedFormatError(f"{path}: file shorter than a NIfTI-1 header")
    sizeof_hdr = struct.unpack_from("<i", raw, 0)[0]
    if sizeof_hdr != HEADER_SIZE:
        if struct.unpack_from(">i", raw, 0)[0] == HEADER_SIZE:
            raise UnsupportedFormatError(
                f"{path}: big-endian NIfTI (sizeof_hdr) is outside the supported subset")
        raise UnsupportedFormatError(f"{path}: sizeof_hdr is {sizeof_hdr}, not 348")
    magic = raw[344:348]
    if magic not in (b"n+1\x00", b"ni1\x00"):
        raise UnsupportedFormatError(f"{path}: magic {magic!r} is not n+1\\0 or ni1\\0")
    hdr = {
        "magic": magic,
        "dim": struct.unpack_from("<8h", raw, 40),
        "datatype": struct.unpack_from("<h", raw, 70)[0],
        "bitpix": struct.unpack_from("<h", raw, 72)[0],
        "pixdim": struct.unpack_from("<8f", raw, 76),
        "vox_offset": struct.unpack_from("<f", raw, 108)[0],
        "scl_slope": struct.unpack_from("<f", raw, 112)[0],
        "scl_inter": struct.unpack_from("<f", raw, 116)[0],
        "qform_code": struct.unpack_from("<h", raw, 252)[0],
        "sform_code": struct.unpack_from("<h", raw, 254)[0],
        "quatern": struct.unpack_from("<3f", raw, 256),
        "qoffset": struct.unpack_from("<3f", raw, 268),
        "srow_x": struct.unpack_from("<4f", raw, 280),
        "srow_y": struct.unpack_from("<4f", raw, 296),
        "srow_z": struct.unpack_from("<4f", raw, 312),
    }
    return hdr


def _header_shape(hdr: dict, path: Path) -> Tuple[int, int, int]:
    dim = hdr["dim"]
    ndim = dim[0]
    if not 1 <= ndim <= 7:
        raise UnsupportedFormatError(f"{path}: dim[0] = {ndim} is not a valid rank")
    if ndim < 3 or any(d > 1 for d in dim[4:1 + ndim]):
        raise UnsupportedFormatError(
            f"{path}: dim {dim[:1 + ndim]} is not a 3-D volume (header field dim)")
    shape = tuple(int(d) for d in dim[1:4])
    if any(d < 1 for d in shape):
        raise UnsupportedFormatError(f"{path}: non-positive size in dim {shape}")
    return shape


def _header_affine(hdr: dict) -> np.ndarray:
    affine = np.eye(4)
    if hdr["sform_code"] > 0:
        affine[0, :] = hdr["srow_x"]
        affine[1, :] = hdr["srow_y"]
        affine[2, :] = hdr["srow_z"]
        return affine
    pixdim = hdr["pixdim"]
    spacing = np.array([max(p, 0.0) or 1.0 for p in pixdim[1:4]])
    if hdr["qform_code"] > 0:
        b, c, d = hdr["quatern"]
        a = math.sqrt(max(0.0, 1.0 - b * b - c * c - d * d))
        R = quat_to_rotation(np.array([a, b, c, d]))
        qfac = -1.0 if pixdim[0] < 0 else 1.0
        affine[:3, :3] = R * spacing * np.array([1.0, 1.0, qfac])
        affine[:3, 3] = hdr["qoffset"]
        return affine
    affine[:3, :3] = np.diag(spacing)
    return affine


def _read_raw(path: Union[str, Path], normalize: bool):
    path = Path(path)
    raw = path.read_bytes()
    hdr = _unpack_header(raw, path)
    shape = _header_shape(hdr, path)
    if hdr["datatype"] not in _DTYPES:
        raise UnsupportedFormatError(
            f"{path}: datatype code {hdr['datatype']} is outside the supported "
            "subset (header field datatype)")
    dtype = _DTYPES[hdr["datatype"]]

    if hdr["magic"] == b"ni1\x00":
        img_path = path.with_suffix(".img")
        if not img_path.exists():
            raise UnsupportedFormatError(f"{path}: paired data file {img_path} is missing")
        payload = img_path.read_bytes()
        offset = int(hdr["vox_offset"])
    else:
        payload = raw
        offset = int(hdr["vox_offset"]) or SINGLE_FILE_OFFSET
    nbytes = int(np.prod(shape)) * dtype.itemsize
    if len(payload) < offset + nbytes:
        raise UnsupportedFormatError(
            f"{path}: expected {offset + nbytes} bytes of data, file has {len(payload)}")
    data = np.frombuffer(payload, dtype=dtype, count=int(np.prod(shape)),
                         offset=offset).reshape(shape, order="F")

    slope = hdr["scl_slope"] if hdr["scl_slope"] != 0 else 1.0
    inter = hdr["scl_inter"]
    if slope != 1.0 or inter != 0.0:
        values = data.astype(np.float64) * slope + inter
    else:
        values = data.copy()

    if normalize:
        lo, hi = np.percentile(values.astype(np.float64), _PERCENTILES)
        if hi <= lo:
            hi = lo + 1.0  # constant volume: window degenerates, keep it invertible
        norm = IntensityNormalization(float(lo), float(hi))
        values = norm.normalize(values)
    else:
        norm = IntensityNormalization.identity()
    return values, _header_affine(hdr), hdr, norm


def read_nifti(path: Union[str, Path], normalize: bool = True
               ) -> Tuple[VolumeGrid, IntensityNormalization]:
    """Read a NIfTI-1 volume; returns the grid and the intensity window used."""
    values, affine, _, norm = _read_raw(path, normalize)
    return VolumeGrid(data=values, affine=affine), norm


def read_stack(path: Union[str, Path], normalize: bool = True
               ) -> Tuple[SliceStack, IntensityNormalization]:
    """Read a NIfTI-1 file as an acquired stack.

    The first two voxel axes are taken as in-plane, the third as the slice
    axis; slice thickness is the third-axis spacing (contiguous slices).
    """
    values, affine, _, norm = _read_raw(path, normalize)
    spacing = np.linalg.norm(affine[:3, :3], axis=0)
    return SliceStack(data=values, affine=affine,
                      inplane_spacing=spacing[:2],
                      thickness=float(spacing[2])), norm


def write_nifti(grid: VolumeGrid, path: Union[str, Path],
                norm: IntensityNormalization = None) -> None:
    """Write a float32 single-file NIfTI-1 with an sform affine.

    When `norm` is given the data is mapped back through it (inverse of the
    read-side normalization) before writing.
    """
    data = np.asarray(grid.data)
    if norm is not None:
        data = norm.denormalize(data)
    affine = np.asarray(grid.affine, dtype=np.float64)
    spacing = np.linalg.norm(affine[:3, :3], axis=0)
    nx, ny, nz = data.shape

    hdr = bytearray(HEADER_SIZE)
    struct.pack_into("<i", hdr, 0, HEADER_SIZE)
    struct.pack_into("c", hdr, 38, b"r")
    struct.pack_into("<8h", hdr, 40, 3, nx, ny, nz, 1, 1, 1, 1)
    struct.pack_into("<2h", hdr, 70, 16, 32)          # float32, 32 bits
    struct.pack_into("<8f", hdr, 76, 1.0, *spacing, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<f", hdr, 108, float(SINGLE_FILE_OFFSET))
    struct.pack_into("<2f", hdr, 112, 1.0, 0.0)       # scl_slope, scl_inter
    struct.pack_into("B", hdr, 123, 2)                # spatial units: mm
    descrip = b"gaussian slice-to-volume reconstruction"
    struct.pack_into("80s", hdr, 148, descrip)
    struct.pack_into("<2h", hdr, 252, 0, 1)           # qform off, sform on
    struct.pack_into("<4f", hdr, 280, *affine[0, :])
    struct.pack_into("<4f", hdr, 296, *affine[1, :])
    struct.pack_into("<4f", hdr, 312, *affine[2, :])
    struct.pack_into("4s", hdr, 344, b"n+1\x00")

    path = Path(path)
    with open(path, "wb") as f:
        f.write(bytes(hdr))
        f.write(b"\x00\x00\x00\x00")                  # no header extensions
        f.write(np.ascontiguousarray(data, dtype="<f4").tobytes(order="F"))
