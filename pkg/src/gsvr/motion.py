"""Slice-stack geometry, pixel lifting and per-slice rigid corrections.

A stack's affine maps pixel indices (u, v, slice) to world mm and encodes
the native acquisition geometry. Motion is parameterized as a learnable
correction composed with that geometry: x = R(q_i) @ lift(u) + t_i, starting
from identity. The effective rotation that orients the PSF is
R(q_i) @ R_stack so the through-plane axis follows the slice.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field
from typing import List, Optional, Sequence

import numpy as np

from .errors import InvalidParameterError
from .geometry import quat_to_rotation, rotation_part


@dataclass
class SliceStack:
    """One anisotropic acquisition: (nx, ny, n_slices) pixels plus geometry."""

    data: np.ndarray            # (nx, ny, n_slices) normalized intensities
    affine: np.ndarray          # (4, 4) pixel index -> mm
    inplane_spacing: np.ndarray  # (2,) mm
    thickness: float            # mm
    mask: Optional[np.ndarray] = None  # (nx, ny, n_slices) bool

    def __post_init__(self):
        self.data = np.asarray(self.data)
        self.affine = np.asarray(self.affine, dtype=np.float64)
        self.inplane_spacing = np.atleast_1d(np.asarray(self.inplane_spacing, dtype=np.float64))
        if self.inplane_spacing.size == 1:
            self.inplane_spacing = np.repeat(self.inplane_spacing, 2)
        if self.data.ndim != 3:
            raise InvalidParameterError("stack data must be (nx, ny, n_slices)")
        if self.affine.shape != (4, 4) or abs(np.linalg.det(self.affine[:3, :3])) < 1e-12:
            raise InvalidParameterError("stack affine must be an invertible 4x4")
        if np.any(self.inplane_spacing <= 0) or self.thickness <= 0:
            raise InvalidParameterError("spacing and thickness must be positive")
        if self.mask is None:
            self.mask = np.ones(self.data.shape, dtype=bool)
        else:
            self.mask = np.asarray(self.mask).astype(bool)
            if self.mask.shape != self.data.shape:
                raise InvalidParameterError("mask shape does not match stack data")

    @property
    def n_slices(self) -> int:
        return self.data.shape[2]

    @property
    def rotation(self) -> np.ndarray:
        """Direction cosines of the stack axes (rotational part of the affine)."""
        return rotation_part(self.affine[:3, :3])


@dataclass
class SliceState:
    """Learnable rigid correction and intensity parameters of one slice."""

    quaternion: np.ndarray = dc_field(default_factory=lambda: np.array([1.0, 0, 0, 0]))
    translation: np.ndarray = dc_field(default_factory=lambda: np.zeros(3))
    log_sigma: float = 0.0
    eta: float = 0.0

    def __post_init__(self):
        self.quaternion = np.asarray(self.quaternion, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)
        if self.quaternion.shape != (4,) or self.translation.shape != (3,):
            raise InvalidParameterError("bad slice state shapes")

    @property
    def sigma(self) -> float:
        return float(np.exp(self.log_sigma))

    @property
    def outlier_weight(self) -> float:
        return float(np.exp(-self.eta))


class SliceStates:
    """Struct-of-arrays view over the per-slice states of a reconstruction."""

    def __init__(self, quaternions, translations, log_sigma, eta):
        self.quaternions = np.asarray(quaternions, dtype=np.float64).reshape(-1, 4)
        self.translations = np.asarray(translations, dtype=np.float64).reshape(-1, 3)
        self.log_sigma = np.asarray(log_sigma, dtype=np.float64).reshape(-1)
        self.eta = np.asarray(eta, dtype=np.float64).reshape(-1)
        n = len(self.quaternions)
        if not (len(self.translations) == len(self.log_sigma) == len(self.eta) == n):
            raise InvalidParameterError("inconsistent slice state array lengths")

    @classmethod
    def identity(cls, n_slices: int) -> "SliceStates":
        q = np.zeros((n_slices, 4))
        q[:, 0] = 1.0
        return cls(q, np.zeros((n_slices, 3)), np.zeros(n_slices), np.zeros(n_slices))

    @classmethod
    def from_states(cls, states: Sequence[SliceState]) -> "SliceStates":
        return cls(np.stack([s.quaternion for s in states]),
                   np.stack([s.translation for s in states]),
                   np.array([s.log_sigma for s in states]),
                   np.array([s.eta for s in states]))

    @classmethod
    def concatenate(cls, parts: Sequence["SliceStates"]) -> "SliceStates":
        """Join per-stack state blocks into one batch-ordered collection."""
        if len(parts) == 0:
            raise InvalidParameterError("nothing to concatenate")
        return cls(np.concatenate([p.quaternions for p in parts]),
                   np.concatenate([p.translations for p in parts]),
                   np.concatenate([p.log_sigma for p in parts]),
                   np.concatenate([p.eta for p in parts]))

    def subset(self, keep: np.ndarray) -> "SliceStates":
        """Restrict to the selected slices (boolean mask or index array)."""
        return SliceStates(self.quaternions[keep], self.translations[keep],
                           self.log_sigma[keep], self.eta[keep])

    def __len__(self) -> int:
        return len(self.log_sigma)

    def __getitem__(self, i: int) -> SliceState:
        return SliceState(self.quaternions[i].copy(), self.translations[i].copy(),
                          float(self.log_sigma[i]), float(self.eta[i]))

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def rotations(self) -> np.ndarray:
        """(S, 3, 3) correction rotations from the (renormalized) quaternions."""
        return quat_to_rotation(self.quaternions)

    def copy(self) -> "SliceStates":
        return SliceStates(self.quaternions.copy(), self.translations.copy(),
                           self.log_sigma.copy(), self.eta.copy())


def lift_pixel(stack: SliceStack, slice_idx: int, u: np.ndarray) -> np.ndarray:
    """World coordinates (mm) of pixel coordinates `u` on one slice.

    `u` is (..., 2) in pixel units; fractional coordinates are allowed within
    the pixel grid bounds.
    """
    nx, ny, ns = stack.data.shape
    if not (0 <= slice_idx < ns):
        raise IndexError(f"slice index {slice_idx} out of range [0, {ns})")
    u = np.asarray(u, dtype=np.float64)
    if u.shape[-1] != 2:
        raise InvalidParameterError("pixel coordinates must be (..., 2)")
    if np.any(u[..., 0] < 0) or np.any(u[..., 0] > nx - 1) \
            or np.any(u[..., 1] < 0) or np.any(u[..., 1] > ny - 1):
        raise IndexError("pixel coordinate out of bounds")
    idx = np.concatenate([u, np.full(u.shape[:-1] + (1,), float(slice_idx))], axis=-1)
    return idx @ stack.affine[:3, :3].T + stack.affine[:3, 3]


def apply_correction(state: SliceState, points: np.ndarray,
                     stack_rotation: Optional[np.ndarray] = None):
    """Apply a slice's rigid correction to lifted points.

    Returns (corrected points, effective rotation R(q) @ R_stack). The
    effective rotation is what orients the PSF covariance for this slice.
    """
    R = quat_to_rotation(state.quaternion)
    pts = np.asarray(points, dtype=np.float64)
    moved = pts @ R.T + state.translation
    if stack_rotation is None:
        stack_rotation = np.eye(3)
    return moved, R @ np.asarray(stack_rotation, dtype=np.float64)


def init_states(stacks: Sequence[SliceStack]) -> SliceStates:
    """Identity corrections for every slice of every stack, in stack order."""
    total = sum(s.n_slices for s in stacks)
    return SliceStates.identity(total)


@dataclass
class PointBatch:
    """Flattened masked pixels of a stack collection, ready for rendering.

    `lifted` holds nominal (uncorrected) world positions; `slice_ids` are
    global slice indices counted across stacks in order.
    """

    lifted: np.ndarray          # (P, 3) float64 world mm
    slice_ids: np.ndarray       # (P,) int32 global slice index
    stack_ids: np.ndarray       # (P,) int32
    intensities: np.ndarray     # (P,) observed values
    slice_to_stack: np.ndarray  # (S,) int32
    stack_rotations: np.ndarray  # (n_stacks, 3, 3)

    @property
    def n_points(self) -> int:
        return self.lifted.shape[0]

    @property
    def n_slices(self) -> int:
        return len(self.slice_to_stack)

    def slice_counts(self) -> np.ndarray:
        return np.bincount(self.slice_ids, minlength=self.n_slices)


def build_point_batch(stacks: Sequence[SliceStack]) -> PointBatch:
    """Lift every masked pixel of every stack into one flat batch."""
    lifted, sids, tids, vals, s2t = [], [], [], [], []
    slice_base = 0
    for t, stack in enumerate(stacks):
        nx, ny, ns = stack.data.shape
        for k in range(ns):
            m = stack.mask[:, :, k]
            if m.any():
                uu, vv = np.nonzero(m)
                u = np.stack([uu, vv], axis=-1).astype(np.float64)
                lifted.append(lift_pixel(stack, k, u))
                count = len(uu)
                sids.append(np.full(count, slice_base + k, dtype=np.int32))
                tids.append(np.full(count, t, dtype=np.int32))
                vals.append(stack.data[uu, vv, k].astype(np.float64))
            s2t.append(t)
        slice_base += ns
    if not lifted:
        raise InvalidParameterError("no masked pixels in any stack")
    return PointBatch(
        lifted=np.concatenate(lifted),
        slice_ids=np.concatenate(sids),
        stack_ids=np.concatenate(tids),
        intensities=np.concatenate(vals),
        slice_to_stack=np.asarray(s2t, dtype=np.int32),
        stack_rotations=np.stack([s.rotation for s in stacks]),
    )
