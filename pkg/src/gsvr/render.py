"""Observed-slice forward pass: analytic path and Monte-Carlo oracle.

`render_observed` is the closed-form path (covariance addition, one
exponential per neighbor). `mc_oracle_render` approximates the acquisition
integral by averaging PSF-free field evaluations over stratified samples of
the slice profile; it shares no code with the analytic path beyond the field
definition itself, so the two can check each other.
"""

from __future__ import annotations

import numpy as np
from scipy.special import ndtri

from . import kernels
from .errors import InvalidParameterError
from .field import DELTA, GaussianField, evaluate_field
from .geometry import pack_sym6
from .psf import PsfModel, rotated_psf_cov6


def render_observed(points_world: np.ndarray, slice_rotations: np.ndarray,
                    field: GaussianField, psf: PsfModel, neighbor_ids: np.ndarray,
                    sigma_slice=1.0, delta: float = DELTA) -> np.ndarray:
    """Analytic observed intensities at motion-corrected points.

    Args:
        points_world: (M, 3) corrected sample positions in mm.
        slice_rotations: (M, 3, 3) or (3, 3) effective slice rotation(s) used
            to orient the PSF.
        field: the primitive cloud.
        psf: slice-profile model.
        neighbor_ids: (M, K) primitive indices per point.
        sigma_slice: per-point intensity scalar, broadcastable to (M,).

    Returns:
        (M,) intensities in the field dtype.
    """
    dtype = field.dtype
    points = np.ascontiguousarray(np.atleast_2d(points_world), dtype=dtype)
    M = points.shape[0]
    nbr = np.ascontiguousarray(np.atleast_2d(neighbor_ids), dtype=np.int64)
    if nbr.shape[0] != M:
        raise InvalidParameterError("neighbor_ids rows must match points")
    if nbr.size and (nbr.min() < 0 or nbr.max() >= field.count):
        raise InvalidParameterError("neighbor id out of range")

    R = np.asarray(slice_rotations)
    if R.shape == (3, 3):
        psf6 = np.broadcast_to(rotated_psf_cov6(R, psf), (M, 6))
    elif R.shape == (M, 3, 3):
        psf6 = rotated_psf_cov6(R, psf)
    else:
        raise InvalidParameterError("slice_rotations must be (3,3) or (M,3,3)")
    psf6 = np.ascontiguousarray(psf6, dtype=dtype)

    sigma = np.ascontiguousarray(np.broadcast_to(np.asarray(sigma_slice, dtype=dtype), (M,)))
    out = np.empty(M, dtype=dtype)
    kernels.render_forward(
        points, psf6, sigma, nbr,
        np.ascontiguousarray(field.means, dtype=dtype),
        np.ascontiguousarray(field.covariances6(), dtype=dtype),
        np.ascontiguousarray(field.intensities, dtype=dtype),
        dtype.type(delta), out)
    return out


def stratified_psf_samples(point_world: np.ndarray, slice_rotation: np.ndarray,
                           psf: PsfModel, n_samples: int, seed: int) -> np.ndarray:
    """Latin-hypercube samples of the oriented PSF around a point.

    One stratum per sample and axis, independently permuted, mapped through
    the normal inverse CDF along the PSF's principal axes.
    """
    if n_samples < 1:
        raise InvalidParameterError("n_samples must be >= 1")
    rng = np.random.Generator(np.random.PCG64(seed))
    strata = np.empty((n_samples, 3))
    for axis in range(3):
        perm = rng.permutation(n_samples)
        strata[:, axis] = (perm + rng.uniform(size=n_samples)) / n_samples
    z = ndtri(strata)
    offsets = (z * psf.sigmas) @ np.asarray(slice_rotation).T
    return np.asarray(point_world, dtype=np.float64) + offsets


def mc_oracle_render(point_world: np.ndarray, slice_rotation: np.ndarray,
                     field: GaussianField, psf: PsfModel, n_samples: int,
                     seed: int, delta: float = DELTA) -> float:
    """Monte-Carlo estimate of the acquisition integral at one point.

    Averages PSF-free field evaluations over stratified samples drawn from
    the oriented slice profile. Uses the dense (all-primitive) neighbor set,
    so the estimate is independent of any top-K approximation.
    """
    samples = stratified_psf_samples(point_world, slice_rotation, psf, n_samples, seed)
    dense = np.broadcast_to(np.arange(field.count, dtype=np.int64),
                            (n_samples, field.count))
    values = evaluate_field(samples.astype(field.dtype), field, dense, delta=delta)
    return float(np.mean(values.astype(np.float64)))
