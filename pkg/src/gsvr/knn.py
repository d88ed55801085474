"""Exact top-K nearest-primitive queries against a frozen snapshot of means.

The index answers queries exactly (it is an accelerator, not an
approximation); the only approximation in the pipeline is the refresh
cadence, which freezes neighbor sets between rebuilds while means move.
Ties are broken by lower primitive index so results are reproducible even
with duplicated means.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import InvalidParameterError


@dataclass
class NeighborIndex:
    """KD-tree over a snapshot of primitive means."""

    means: np.ndarray
    tree: cKDTree = field(repr=False)
    epoch: int = 0

    @property
    def count(self) -> int:
        return self.means.shape[0]


def build_index(means: np.ndarray, epoch: int = 0) -> NeighborIndex:
    """Snapshot the means and build the acceleration structure."""
    means = np.ascontiguousarray(np.atleast_2d(means), dtype=np.float64)
    if means.ndim != 2 or means.shape[1] != 3 or means.shape[0] < 1:
        raise InvalidParameterError("means must be a non-empty (N, 3) array")
    if not np.all(np.isfinite(means)):
        raise InvalidParameterError("non-finite means")
    return NeighborIndex(means=means.copy(), tree=cKDTree(means), epoch=epoch)


def query(index: NeighborIndex, points: np.ndarray, K: int) -> np.ndarray:
    """Indices of the K nearest snapshot means per point, shape (M, K).

    Rows are sorted ascending by Euclidean distance, ties by primitive index.
    """
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    n = index.count
    if K < 1 or K > n:
        raise InvalidParameterError(f"K must be in [1, {n}], got {K}")

    # Query one extra neighbor so ties straddling the K boundary are visible.
    k_eff = min(K + 1, n)
    dist, idx = index.tree.query(points, k=k_eff)
    dist = np.atleast_2d(dist)
    idx = np.atleast_2d(idx)

    has_ties = bool(np.any(dist[:, 1:] == dist[:, :-1]))
    if has_ties:
        # Stable (distance, index) order within each row.
        rows = np.repeat(np.arange(points.shape[0]), k_eff)
        order = np.lexsort((idx.ravel(), dist.ravel(), rows))
        dist = dist.ravel()[order].reshape(points.shape[0], k_eff)
        idx = idx.ravel()[order].reshape(points.shape[0], k_eff)

        if k_eff > K:
            # A tie across the boundary means the kept set depends on tree
            # traversal order; re-resolve those rows by brute force.
            boundary = dist[:, K] == dist[:, K - 1]
            for r in np.flatnonzero(boundary):
                d2 = np.sum((index.means - points[r]) ** 2, axis=1)
                take = np.lexsort((np.arange(n), d2))[:K]
                idx[r, :K] = take
    return np.ascontiguousarray(idx[:, :K].astype(np.int64))
