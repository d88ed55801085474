"""Volume quality metrics (PSNR, SSIM, NCC) and motion-recovery error.

All image metrics operate on raw arrays plus an optional boolean mask and are
deterministic. PSNR and SSIM take their data range from the reference inside
the mask, so values are comparable across runs that share a reference.
"""

from __future__ import annotations

from typing import Optional, Tuple

import numpy as np
from scipy.ndimage import correlate1d

from .errors import InvalidParameterError, UndefinedMetricError
from .geometry import rotation_angle
from .motion import SliceStates

PSNR_CAP_DB = 99.0
SSIM_WINDOW = 7
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _masked_pair(pred: np.ndarray, ref: np.ndarray, mask):
    pred = np.asarray(pred, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if pred.shape != ref.shape:
        raise InvalidParameterError("volume shapes do not match")
    if mask is None:
        mask = np.ones(ref.shape, dtype=bool)
    else:
        mask = np.asarray(mask).astype(bool)
        if mask.shape != ref.shape:
            raise InvalidParameterError("mask shape does not match volumes")
    if not mask.any():
        raise InvalidParameterError("empty mask")
    return pred, ref, mask


def psnr(pred: np.ndarray, ref: np.ndarray, mask: Optional[np.ndarray] = None) -> float:
    """10 log10(range^2 / MSE) over the mask; identical inputs cap at 99 dB."""
    pred, ref, mask = _masked_pair(pred, ref, mask)
    rv = ref[mask]
    data_range = float(rv.max() - rv.min())
    if data_range == 0.0:
        raise UndefinedMetricError("reference has zero intensity range in mask")
    mse = float(np.mean((pred[mask] - rv) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * np.log10(data_range * data_range / mse))


def _ssim_blur(vol: np.ndarray) -> np.ndarray:
    half = SSIM_WINDOW // 2
    x = np.arange(-half, half + 1, dtype=np.float64)
    w = np.exp(-0.5 * (x / SSIM_SIGMA) ** 2)
    w /= w.sum()
    out = vol
    for axis in range(vol.ndim):
        out = correlate1d(out, w, axis=axis, mode="reflect")
    return out


def ssim(pred: np.ndarray, ref: np.ndarray, mask: Optional[np.ndarray] = None,
         data_range: Optional[float] = None) -> float:
    """Mean local SSIM (7^3 Gaussian window, sigma 1.5) over masked voxels."""
    pred, ref, mask = _masked_pair(pred, ref, mask)
    if data_range is None:
        rv = ref[mask]
        data_range = float(rv.max() - rv.min())
    if data_range <= 0.0:
        raise UndefinedMetricError("reference has zero intensity range in mask")
    C1 = (SSIM_K1 * data_range) ** 2
    C2 = (SSIM_K2 * data_range) ** 2

    mu_p = _ssim_blur(pred)
    mu_r = _ssim_blur(ref)
    var_p = np.maximum(_ssim_blur(pred * pred) - mu_p * mu_p, 0.0)
    var_r = np.maximum(_ssim_blur(ref * ref) - mu_r * mu_r, 0.0)
    cov = _ssim_blur(pred * ref) - mu_p * mu_r

    ssim_map = ((2 * mu_p * mu_r + C1) * (2 * cov + C2)
                / ((mu_p * mu_p + mu_r * mu_r + C1) * (var_p + var_r + C2)))
    return float(ssim_map[mask].mean())


def ncc(pred: np.ndarray, ref: np.ndarray, mask: Optional[np.ndarray] = None) -> float:
    """Pearson correlation of the two volumes over the mask."""
    pred, ref, mask = _masked_pair(pred, ref, mask)
    a = pred[mask] - pred[mask].mean()
    b = ref[mask] - ref[mask].mean()
    na = float(np.sqrt(np.sum(a * a)))
    nb = float(np.sqrt(np.sum(b * b)))
    if na == 0.0 or nb == 0.0:
        raise UndefinedMetricError("zero intensity variance in mask")
    return float(np.dot(a, b) / (na * nb))


def _weighted_gauge(R_est, t_est, R_true, t_true, w):
    """Best-fit global rigid transform g: est_i ~ g o true_i (weighted)."""
    M = np.einsum("s,sij,skj->ik", w, R_est, R_true)
    U, _, Vt = np.linalg.svd(M)
    d = np.sign(np.linalg.det(U @ Vt))
    Rg = U @ np.diag([1.0, 1.0, d]) @ Vt
    tg = np.average(t_est - t_true @ Rg.T, axis=0, weights=w)
    return Rg, tg


def _gauge_irls(estimated: SliceStates, truth: SliceStates, trans_scale_mm: float):
    """Iteratively reweighted gauge fit; returns (Rg, tg, rot_err_rad, trans_err)."""
    if len(estimated) != len(truth):
        raise InvalidParameterError("slice state counts do not match")
    R_est = estimated.rotations()
    t_est = estimated.translations
    R_true = truth.rotations()
    t_true = truth.translations

    w = np.ones(len(estimated))
    Rg, tg = np.eye(3), np.zeros(3)
    rot_err = np.zeros(len(estimated))
    trans_err = np.zeros(len(estimated))
    for _ in range(30):
        Rg, tg = _weighted_gauge(R_est, t_est, R_true, t_true, w)
        R_fit = np.einsum("ij,sjk->sik", Rg, R_true)
        t_fit = t_true @ Rg.T + tg
        rot_err = rotation_angle(np.einsum("sij,skj->sik", R_est, R_fit))
        trans_err = np.linalg.norm(t_est - t_fit, axis=1)
        combined = rot_err + trans_err / trans_scale_mm
        if combined.max() < 1e-12:
            break
        w_new = 1.0 / (combined + 1e-9)
        w_new /= w_new.sum()
        if np.max(np.abs(w_new - w / w.sum())) < 1e-12:
            w = w_new
            break
        w = w_new
    return Rg, tg, rot_err, trans_err


def motion_error(estimated: SliceStates, truth: SliceStates,
                 trans_scale_mm: float = 10.0) -> Tuple[np.ndarray, np.ndarray]:
    """Per-slice pose error (degrees, mm) after removing the global gauge.

    A reconstruction is only defined up to one rigid transform applied to the
    field and every slice state together, so the common transform best
    aligning the estimated states to the truth is removed first. The fit is
    reweighted iteratively (weights ~ 1/error) so well-recovered slices pin
    the gauge and a single corrupted slice reports its own full error rather
    than dragging the alignment.
    """
    _, _, rot_err, trans_err = _gauge_irls(estimated, truth, trans_scale_mm)
    return np.rad2deg(rot_err), trans_err


def motion_gauge(estimated: SliceStates, truth: SliceStates,
                 trans_scale_mm: float = 10.0) -> Tuple[np.ndarray, np.ndarray]:
    """Global rigid transform (R, t) relating reconstruction and truth frames.

    Returns the rigid map such that a point y in the truth frame corresponds
    to ``R @ y + t`` in the reconstruction's frame: estimated states are best
    explained as this transform composed with the true states. Evaluating the
    reconstruction at transformed coordinates therefore compares it to the
    reference free of the global pose ambiguity. Uses the same iterative
    reweighting as :func:`motion_error`.
    """
    Rg, tg, _, _ = _gauge_irls(estimated, truth, trans_scale_mm)
    return Rg, tg
