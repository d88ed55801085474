"""Quaternion and covariance math used throughout the reconstruction engine.

All rotations use scalar-first unit quaternions (w, x, y, z). Functions are
batched: a quaternion argument of shape (..., 4) yields matrices of shape
(..., 3, 3). Covariances are symmetric 3x3 matrices in mm^2; where a compact
layout is needed they are packed as 6-vectors in the order
(00, 01, 02, 11, 12, 22).
"""

from __future__ import annotations

import numpy as np

from .errors import InvalidParameterError, NumericalDegeneracyError

# Smallest admissible covariance eigenvalue (mm^2). Inversion below this is
# refused rather than silently regularized.
EIGENVALUE_FLOOR = 1e-6

# Exponents are clamped here before exp() so far-away queries underflow to a
# harmless constant instead of propagating NaN through gradients.
EXPONENT_CLAMP = -80.0

SYM6_ROWS = np.array([0, 0, 0, 1, 1, 2])
SYM6_COLS = np.array([0, 1, 2, 1, 2, 2])


def quat_normalize(q: np.ndarray) -> np.ndarray:
    """Return unit quaternions, raising on (near-)zero norm."""
    q = np.asarray(q, dtype=np.float64) if np.asarray(q).dtype.kind != "f" else np.asarray(q)
    norm = np.sqrt(np.sum(q * q, axis=-1, keepdims=True))
    if np.any(norm <= 1e-30) or not np.all(np.isfinite(norm)):
        raise InvalidParameterError("quaternion with zero or non-finite norm")
    return q / norm


def quat_to_rotation(q: np.ndarray) -> np.ndarray:
    """Convert quaternions (..., 4) to rotation matrices (..., 3, 3).

    The input is normalized first, so q and -q (and any positive rescaling)
    map to the same matrix.
    """
    q = quat_normalize(q)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3), dtype=q.dtype)
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def quat_rotation_vjp(q: np.ndarray, grad_R: np.ndarray) -> np.ndarray:
    """Backpropagate d(loss)/dR through quat_to_rotation to the raw quaternion.

    `q` is the unnormalized parameter; the chain includes the normalization
    performed inside quat_to_rotation, so the returned gradient is orthogonal
    to q (the representation's scale direction carries no signal).
    """
    q = np.asarray(q)
    norm = np.sqrt(np.sum(q * q, axis=-1, keepdims=True))
    qh = q / norm
    w, x, y, z = qh[..., 0], qh[..., 1], qh[..., 2], qh[..., 3]
    G = np.asarray(grad_R)
    g00, g01, g02 = G[..., 0, 0], G[..., 0, 1], G[..., 0, 2]
    g10, g11, g12 = G[..., 1, 0], G[..., 1, 1], G[..., 1, 2]
    g20, g21, g22 = G[..., 2, 0], G[..., 2, 1], G[..., 2, 2]

    dw = 2 * (-z * g01 + y * g02 + z * g10 - x * g12 - y * g20 + x * g21)
    dx = 2 * (y * g01 + z * g02 + y * g10 - 2 * x * g11 - w * g12
              + z * g20 + w * g21 - 2 * x * g22)
    dy = 2 * (-2 * y * g00 + x * g01 + w * g02 + x * g10 + z * g12
              - w * g20 + z * g21 - 2 * y * g22)
    dz = 2 * (-2 * z * g00 - w * g01 + x * g02 + w * g10 - 2 * z * g11
              + y * g12 + x * g20 + y * g21)
    grad_qh = np.stack([dw, dx, dy, dz], axis=-1)

    # Through the normalization: remove the radial component, divide by norm.
    radial = np.sum(grad_qh * qh, axis=-1, keepdims=True)
    return (grad_qh - qh * radial) / norm


def quat_from_axis_angle(axis: np.ndarray, angle_rad: float) -> np.ndarray:
    """Unit quaternion for a rotation of `angle_rad` about `axis`."""
    axis = np.asarray(axis, dtype=np.float64)
    n = np.linalg.norm(axis)
    if n == 0:
        raise InvalidParameterError("rotation axis must be nonzero")
    half = 0.5 * angle_rad
    return np.concatenate([[np.cos(half)], np.sin(half) * axis / n])


def rotation_to_quat(R: np.ndarray) -> np.ndarray:
    """Recover a scalar-first unit quaternion (w >= 0) from a rotation matrix."""
    R = np.asarray(R, dtype=np.float64)
    t = np.trace(R)
    if t > 0:
        s = np.sqrt(t + 1.0) * 2
        q = np.array([0.25 * s,
                      (R[2, 1] - R[1, 2]) / s,
                      (R[0, 2] - R[2, 0]) / s,
                      (R[1, 0] - R[0, 1]) / s])
    else:
        i = int(np.argmax(np.diag(R)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = np.sqrt(max(R[i, i] - R[j, j] - R[k, k] + 1.0, 0.0)) * 2
        q = np.empty(4)
        q[0] = (R[k, j] - R[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (R[j, i] + R[i, j]) / s
        q[1 + k] = (R[k, i] + R[i, k]) / s
    if q[0] < 0:
        q = -q
    return q / np.linalg.norm(q)


def rotation_angle(R: np.ndarray) -> np.ndarray:
    """Geodesic rotation angle in radians, batched over leading dims."""
    R = np.asarray(R)
    t = np.trace(R, axis1=-2, axis2=-1)
    c = np.clip((t - 1.0) / 2.0, -1.0, 1.0)
    return np.arccos(c)


def rotation_part(linear: np.ndarray) -> np.ndarray:
    """Direction-cosine matrix of an affine's 3x3 block (columns normalized).

    Valid for grid affines of the form rotation x diagonal spacing (possibly
    with axis flips); flips are irrelevant for rotating symmetric matrices.
    """
    linear = np.asarray(linear, dtype=np.float64)
    norms = np.linalg.norm(linear, axis=0)
    if np.any(norms <= 0):
        raise InvalidParameterError("affine has a zero column")
    return linear / norms


def build_covariance(log_s: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Assemble covariance(s) R diag(exp(2 log_s)) R^T from log-scales and quats."""
    log_s = np.asarray(log_s)
    if not np.all(np.isfinite(log_s)):
        raise InvalidParameterError("non-finite log-scales")
    R = quat_to_rotation(q)
    d = np.exp(2.0 * log_s)
    return np.einsum("...ik,...k,...jk->...ij", R, d, R)


def pack_sym6(A: np.ndarray) -> np.ndarray:
    """Pack symmetric (..., 3, 3) matrices into (..., 6) upper-triangle vectors."""
    A = np.asarray(A)
    return A[..., SYM6_ROWS, SYM6_COLS]


def unpack_sym6(v: np.ndarray) -> np.ndarray:
    """Expand (..., 6) packed vectors back to full symmetric matrices."""
    v = np.asarray(v)
    A = np.empty(v.shape[:-1] + (3, 3), dtype=v.dtype)
    A[..., SYM6_ROWS, SYM6_COLS] = v
    A[..., SYM6_COLS, SYM6_ROWS] = v
    return A


def invert_spd3(A: np.ndarray, check_floor: bool = True) -> np.ndarray:
    """Invert symmetric positive-definite 3x3 matrices in closed form.

    With `check_floor`, raises NumericalDegeneracyError naming the first
    offending batch index whose smallest eigenvalue is below EIGENVALUE_FLOOR.
    """
    A = np.asarray(A)
    if check_floor:
        eigvals = np.linalg.eigvalsh(A)
        bad = eigvals[..., 0] < EIGENVALUE_FLOOR
        if np.any(bad):
            idx = int(np.flatnonzero(np.atleast_1d(bad))[0])
            raise NumericalDegeneracyError(
                f"covariance {idx} has eigenvalue {float(np.atleast_2d(eigvals)[idx, 0]):.3e} "
                f"below floor {EIGENVALUE_FLOOR:.1e}"
            )
    a00, a01, a02 = A[..., 0, 0], A[..., 0, 1], A[..., 0, 2]
    a11, a12, a22 = A[..., 1, 1], A[..., 1, 2], A[..., 2, 2]
    c00 = a11 * a22 - a12 * a12
    c01 = a02 * a12 - a01 * a22
    c02 = a01 * a12 - a02 * a11
    c11 = a00 * a22 - a02 * a02
    c12 = a01 * a02 - a00 * a12
    c22 = a00 * a11 - a01 * a01
    det = a00 * c00 + a01 * c01 + a02 * c02
    inv = np.empty_like(A)
    inv[..., 0, 0] = c00
    inv[..., 0, 1] = inv[..., 1, 0] = c01
    inv[..., 0, 2] = inv[..., 2, 0] = c02
    inv[..., 1, 1] = c11
    inv[..., 1, 2] = inv[..., 2, 1] = c12
    inv[..., 2, 2] = c22
    inv /= det[..., None, None]
    return inv
