"""The Gaussian primitive cloud and its PSF-free evaluation.

A field is N anisotropic Gaussians, each carrying 11 learnable scalars:
3 mean coordinates (mm), 3 log standard deviations (log mm), 4 quaternion
components and one intensity. Evaluation is the normalized weighted sum

    V(x) = sum_j c_j w_j / (sum_j w_j + delta),   w_j = exp(-0.5 v^T Sigma_j^-1 v)

restricted to a caller-provided neighbor set per query point.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidParameterError
from .geometry import EXPONENT_CLAMP, build_covariance, invert_spd3, pack_sym6
from .volume import VolumeGrid

# Stabilizer added to the weight sum so empty neighborhoods evaluate to 0
# instead of 0/0.
DELTA = 1e-8

_EVAL_CHUNK = 16384


@dataclass
class GaussianField:
    """Learnable cloud of anisotropic Gaussian primitives."""

    means: np.ndarray        # (N, 3) world mm
    log_scales: np.ndarray   # (N, 3) log of per-axis std dev in mm
    quaternions: np.ndarray  # (N, 4) scalar-first, not necessarily unit
    intensities: np.ndarray  # (N,) normalized image units

    def __post_init__(self):
        self.means = np.atleast_2d(np.asarray(self.means))
        self.log_scales = np.atleast_2d(np.asarray(self.log_scales))
        self.quaternions = np.atleast_2d(np.asarray(self.quaternions))
        self.intensities = np.atleast_1d(np.asarray(self.intensities))
        n = self.means.shape[0]
        if self.means.shape != (n, 3) or self.log_scales.shape != (n, 3) \
                or self.quaternions.shape != (n, 4) or self.intensities.shape != (n,):
            raise InvalidParameterError("inconsistent field array shapes")
        if not np.all(np.isfinite(self.log_scales)):
            raise InvalidParameterError("non-finite log-scales")

    @property
    def count(self) -> int:
        return self.means.shape[0]

    @property
    def dtype(self) -> np.dtype:
        return self.means.dtype

    def scales(self) -> np.ndarray:
        """Per-axis standard deviations in mm, shape (N, 3)."""
        return np.exp(self.log_scales)

    def covariances(self) -> np.ndarray:
        """Full 3x3 covariance per primitive, shape (N, 3, 3)."""
        return build_covariance(self.log_scales, self.quaternions)

    def covariances6(self) -> np.ndarray:
        """Packed symmetric covariances, shape (N, 6)."""
        return pack_sym6(self.covariances())

    def astype(self, dtype) -> "GaussianField":
        return GaussianField(
            means=self.means.astype(dtype),
            log_scales=self.log_scales.astype(dtype),
            quaternions=self.quaternions.astype(dtype),
            intensities=self.intensities.astype(dtype),
        )

    def copy(self) -> "GaussianField":
        return GaussianField(self.means.copy(), self.log_scales.copy(),
                             self.quaternions.copy(), self.intensities.copy())


def shrink_for_viz(field: GaussianField, gamma: float) -> GaussianField:
    """Copy of the field with every scale multiplied by gamma in (0, 1]."""
    if not (0.0 < gamma <= 1.0):
        raise InvalidParameterError(f"shrink factor must be in (0, 1], got {gamma}")
    out = field.copy()
    out.log_scales = out.log_scales + np.asarray(math.log(gamma), dtype=out.log_scales.dtype)
    return out


def evaluate_field(points: np.ndarray, field: GaussianField, neighbor_ids: np.ndarray,
                   delta: float = DELTA) -> np.ndarray:
    """Evaluate the normalized Gaussian mixture at M points over given neighbors.

    Args:
        points: (M, 3) world coordinates in mm.
        field: the primitive cloud.
        neighbor_ids: (M, K) integer indices into the field, K >= 1.
        delta: stabilizer added to the weight sum.

    Returns:
        (M,) intensities in the dtype of the field.
    """
    points = np.atleast_2d(np.asarray(points))
    neighbor_ids = np.atleast_2d(np.asarray(neighbor_ids))
    if neighbor_ids.ndim != 2 or neighbor_ids.shape[0] != points.shape[0]:
        raise InvalidParameterError("neighbor_ids must be (M, K) matching points")
    if neighbor_ids.size and (neighbor_ids.min() < 0 or neighbor_ids.max() >= field.count):
        raise InvalidParameterError("neighbor id out of range")

    # Floor check happens here; error names the offending primitive.
    inv6 = pack_sym6(invert_spd3(field.covariances(), check_floor=True))
    inv6 = inv6.astype(field.dtype)
    c = field.intensities
    mu = field.means

    out = np.empty(points.shape[0], dtype=field.dtype)
    for lo in range(0, points.shape[0], _EVAL_CHUNK):
        hi = min(lo + _EVAL_CHUNK, points.shape[0])
        nbr = neighbor_ids[lo:hi]
        v = points[lo:hi, None, :].astype(field.dtype) - mu[nbr]          # (m, K, 3)
        m6 = inv6[nbr]                                                    # (m, K, 6)
        quad = (m6[..., 0] * v[..., 0] * v[..., 0]
                + m6[..., 3] * v[..., 1] * v[..., 1]
                + m6[..., 5] * v[..., 2] * v[..., 2]
                + 2.0 * (m6[..., 1] * v[..., 0] * v[..., 1]
                         + m6[..., 2] * v[..., 0] * v[..., 2]
                         + m6[..., 4] * v[..., 1] * v[..., 2]))
        w = np.exp(np.maximum(-0.5 * quad, EXPONENT_CLAMP))
        num = np.sum(c[nbr] * w, axis=1)
        den = np.sum(w, axis=1) + delta
        out[lo:hi] = num / den
    return out


def rasterize(field: GaussianField, grid: VolumeGrid, K: int,
              delta: float = DELTA, transform=None) -> VolumeGrid:
    """Fill a raster grid with PSF-free field values at voxel centers.

    Voxels outside the grid mask (when one is present) are left at zero.
    ``transform``, an optional ``(R, t)`` rigid map, evaluates the field at
    ``R @ center + t`` instead of the raw voxel center — used to compare a
    reconstruction with a reference despite the global pose ambiguity.
    """
    from .knn import build_index, query  # local import, knn sits above field

    K = min(int(K), field.count)
    if K < 1:
        raise InvalidParameterError("K must be at least 1")
    out = grid.copy()
    out.data = np.zeros(grid.sizes, dtype=field.dtype)

    centers = grid.voxel_centers()
    if grid.mask is not None:
        keep = grid.mask.reshape(-1)
        centers = centers[keep]
    if transform is not None:
        R, t = transform
        centers = centers @ np.asarray(R).T + np.asarray(t)
    if centers.shape[0] == 0:
        return out

    index = build_index(field.means)
    nbr = query(index, centers, K)
    values = evaluate_field(centers, field, nbr, delta=delta)

    flat = out.data.reshape(-1)
    if grid.mask is not None:
        flat[keep] = values
    else:
        flat[:] = values
    out.data = flat.reshape(grid.sizes)
    return out
