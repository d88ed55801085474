"""Anisotropic Gaussian slice-profile model and its closed-form convolution.

The PSF lives in slice coordinates: two in-plane axes and the slice normal
as the third axis. Convolving a Gaussian primitive with the slice-oriented
PSF is exact covariance addition, which is what makes the forward model
closed-form.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidParameterError

# FWHM = 2 sqrt(2 ln 2) * sigma for a Gaussian profile.
FWHM_TO_SIGMA = 1.0 / (2.0 * math.sqrt(2.0 * math.log(2.0)))

# Conventional in-plane blur: FWHM of 1.2x the pixel size; through-plane FWHM
# equal to the slice thickness.
INPLANE_FWHM_FACTOR = 1.2


@dataclass(frozen=True)
class PsfModel:
    """Diagonal PSF covariance in slice coordinates (x, y in-plane; z through)."""

    sigma_inplane: tuple          # (sigma_x, sigma_y) in mm
    sigma_through: float          # mm

    @property
    def covariance(self) -> np.ndarray:
        sx, sy = self.sigma_inplane
        return np.diag([sx * sx, sy * sy, self.sigma_through * self.sigma_through])

    @property
    def sigmas(self) -> np.ndarray:
        """(sigma_x, sigma_y, sigma_z) in mm."""
        return np.array([self.sigma_inplane[0], self.sigma_inplane[1], self.sigma_through])

    @property
    def enabled(self) -> bool:
        return bool(np.any(self.sigmas > 0))

    @staticmethod
    def disabled() -> "PsfModel":
        """Zero-covariance stand-in used by ablations and degenerate tests."""
        return PsfModel(sigma_inplane=(0.0, 0.0), sigma_through=0.0)


def build_psf(inplane_res, thickness: float,
              inplane_fwhm_factor: float = INPLANE_FWHM_FACTOR) -> PsfModel:
    """PSF from acquisition geometry: in-plane pixel size(s) and slice thickness.

    `inplane_res` may be a scalar or a pair of mm pixel sizes.
    """
    inplane = np.atleast_1d(np.asarray(inplane_res, dtype=np.float64))
    if inplane.size == 1:
        inplane = np.repeat(inplane, 2)
    if inplane.size != 2:
        raise InvalidParameterError("inplane_res must be a scalar or a pair")
    if np.any(inplane <= 0) or thickness <= 0:
        raise InvalidParameterError("PSF spacings must be positive")
    sx, sy = inplane * inplane_fwhm_factor * FWHM_TO_SIGMA
    sz = thickness * FWHM_TO_SIGMA
    return PsfModel(sigma_inplane=(float(sx), float(sy)), sigma_through=float(sz))


def convolve_covariance(cov_hr: np.ndarray, slice_rotation: np.ndarray,
                        psf: PsfModel) -> np.ndarray:
    """Observed covariance: primitive covariance plus the rotated PSF covariance.

    Batched over leading dimensions of either argument.
    """
    R = np.asarray(slice_rotation)
    rotated = np.einsum("...ik,kl,...jl->...ij", R, psf.covariance, R)
    return np.asarray(cov_hr) + rotated


def rotated_psf_cov6(slice_rotation: np.ndarray, psf: PsfModel) -> np.ndarray:
    """Packed (..., 6) rotated PSF covariance, the per-slice kernel input."""
    from .geometry import pack_sym6

    R = np.asarray(slice_rotation)
    return pack_sym6(np.einsum("...ik,kl,...jl->...ij", R, psf.covariance, R))
