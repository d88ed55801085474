"""Raster volume container (index-to-mm affine plus voxel data)."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import InvalidParameterError


@dataclass
class VolumeGrid:
    """A 3D raster: `data[i, j, k]` sits at world point `affine @ (i, j, k, 1)`."""

    data: np.ndarray
    affine: np.ndarray
    mask: Optional[np.ndarray] = None

    def __post_init__(self):
        self.data = np.asarray(self.data)
        self.affine = np.asarray(self.affine, dtype=np.float64)
        if self.data.ndim != 3:
            raise InvalidParameterError(f"volume data must be 3D, got shape {self.data.shape}")
        if self.affine.shape != (4, 4):
            raise InvalidParameterError("affine must be 4x4")
        if abs(np.linalg.det(self.affine[:3, :3])) < 1e-12:
            raise InvalidParameterError("affine is not invertible")
        if self.mask is not None:
            self.mask = np.asarray(self.mask).astype(bool)
            if self.mask.shape != self.data.shape:
                raise InvalidParameterError("mask shape does not match data shape")

    @property
    def sizes(self) -> tuple:
        return self.data.shape

    @property
    def spacing(self) -> np.ndarray:
        """Per-axis voxel spacing in mm (column norms of the affine)."""
        return np.linalg.norm(self.affine[:3, :3], axis=0)

    def index_to_world(self, idx: np.ndarray) -> np.ndarray:
        """Map (..., 3) voxel indices (may be fractional) to world mm."""
        idx = np.asarray(idx, dtype=np.float64)
        return idx @ self.affine[:3, :3].T + self.affine[:3, 3]

    def world_to_index(self, xyz: np.ndarray) -> np.ndarray:
        """Map (..., 3) world mm coordinates to continuous voxel indices."""
        xyz = np.asarray(xyz, dtype=np.float64)
        inv = np.linalg.inv(self.affine)
        return xyz @ inv[:3, :3].T + inv[:3, 3]

    def voxel_centers(self) -> np.ndarray:
        """World coordinates of every voxel center, shape (nx*ny*nz, 3), C order."""
        nx, ny, nz = self.data.shape
        ii, jj, kk = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij")
        idx = np.stack([ii, jj, kk], axis=-1).reshape(-1, 3)
        return self.index_to_world(idx)

    def copy(self) -> "VolumeGrid":
        return VolumeGrid(
            data=self.data.copy(),
            affine=self.affine.copy(),
            mask=None if self.mask is None else self.mask.copy(),
        )
