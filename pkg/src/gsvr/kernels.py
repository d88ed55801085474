"""Fused numba kernels for the observed-slice forward pass and its gradients.

The hot path fuses, per (point, neighbor) pair: covariance addition with the
rotated PSF, closed-form 3x3 inversion, the Mahalanobis quadratic form and
the exponential, so per-pair memory stays O(1) and nothing is cached across
pairs. The backward kernel recomputes the forward quantities and accumulates
gradients into per-block buffers; blocks are a fixed partition of the point
range, so summing them in order gives a deterministic reduction regardless
of thread count.

Gradient conventions: packed symmetric gradients (d00, d01, d02, d11, d12,
d22) store the full-matrix gradient entry for each position, i.e. unpacking
with geometry.unpack_sym6 yields dL/dA for the unconstrained 3x3 matrix A.
"""

from __future__ import annotations

import numba
import numpy as np
from numba import njit, prange

# Keep the threading layer deterministic and dependency-free.
numba.config.THREADING_LAYER = "workqueue"

EXP_CLAMP = -80.0


@njit(inline="always")
def _inv_sym3(a00, a01, a02, a11, a12, a22):
    c00 = a11 * a22 - a12 * a12
    c01 = a02 * a12 - a01 * a22
    c02 = a01 * a12 - a02 * a11
    c11 = a00 * a22 - a02 * a02
    c12 = a01 * a02 - a00 * a12
    c22 = a00 * a11 - a01 * a01
    det = a00 * c00 + a01 * c01 + a02 * c02
    idet = 1.0 / det
    return c00 * idet, c01 * idet, c02 * idet, c11 * idet, c12 * idet, c22 * idet


@njit(cache=True, parallel=True)
def render_forward(points, psf6, sigma, nbr, mu, cov6, cvals, delta, out):
    """Observed intensity at M points: sigma * sum(c w) / (sum(w) + delta).

    points: (M, 3) motion-corrected world coordinates.
    psf6:   (M, 6) packed rotated PSF covariance per point.
    sigma:  (M,) per-point slice intensity scalar.
    nbr:    (M, K) primitive indices.
    mu, cov6, cvals: field means, packed covariances, intensities.
    """
    M, K = nbr.shape
    for p in prange(M):
        x0, x1, x2 = points[p, 0], points[p, 1], points[p, 2]
        p0, p1, p2, p3, p4, p5 = (psf6[p, 0], psf6[p, 1], psf6[p, 2],
                                  psf6[p, 3], psf6[p, 4], psf6[p, 5])
        num = 0.0
        den = delta
        for k in range(K):
            j = nbr[p, k]
            m0, m1, m2, m3, m4, m5 = _inv_sym3(
                cov6[j, 0] + p0, cov6[j, 1] + p1, cov6[j, 2] + p2,
                cov6[j, 3] + p3, cov6[j, 4] + p4, cov6[j, 5] + p5)
            v0 = x0 - mu[j, 0]
            v1 = x1 - mu[j, 1]
            v2 = x2 - mu[j, 2]
            w0 = m0 * v0 + m1 * v1 + m2 * v2
            w1 = m1 * v0 + m3 * v1 + m4 * v2
            w2 = m2 * v0 + m4 * v1 + m5 * v2
            u = -0.5 * (v0 * w0 + v1 * w1 + v2 * w2)
            if u < EXP_CLAMP:
                u = EXP_CLAMP
            e = np.exp(u)
            num += cvals[j] * e
            den += e
        out[p] = sigma[p] * num / den


@njit(cache=True, parallel=True)
def train_step_backward(x0pts, sid, Rc, tvec, psf6s, sigma_s, wdata_s, I_obs,
                        nbr, mu, cov6, cvals, delta, n_blocks,
                        I_hat, absres,
                        dmu, dcov6, dc, dt, dRc, dpsf6, dsigraw):
    """Forward pass plus analytic gradients of the L1 data term.

    Motion correction x = Rc[s] @ x0 + t[s] is fused in, so slice gradients
    (translation, rotation matrix, rotated-PSF covariance, intensity scalar)
    come out alongside the per-primitive ones. Gradient buffers have a
    leading block axis of size n_blocks; callers sum over it in order.

    Outputs written in place: I_hat, absres (per point) and the gradient
    buffers dmu (B,N,3), dcov6 (B,N,6), dc (B,N), dt (B,S,3), dRc (B,S,3,3),
    dpsf6 (B,S,6), dsigraw (B,S) where dsigraw is dL/d(sigma_s) before the
    log-space chain.
    """
    P, K = nbr.shape
    for b in prange(n_blocks):
        lo = b * P // n_blocks
        hi = (b + 1) * P // n_blocks
        e_buf = np.empty(K, dtype=np.float64)
        w_buf = np.empty((K, 3), dtype=np.float64)
        for p in range(lo, hi):
            s = sid[p]
            a0, a1, a2 = x0pts[p, 0], x0pts[p, 1], x0pts[p, 2]
            x0 = Rc[s, 0, 0] * a0 + Rc[s, 0, 1] * a1 + Rc[s, 0, 2] * a2 + tvec[s, 0]
            x1 = Rc[s, 1, 0] * a0 + Rc[s, 1, 1] * a1 + Rc[s, 1, 2] * a2 + tvec[s, 1]
            x2 = Rc[s, 2, 0] * a0 + Rc[s, 2, 1] * a1 + Rc[s, 2, 2] * a2 + tvec[s, 2]
            p0, p1, p2, p3, p4, p5 = (psf6s[s, 0], psf6s[s, 1], psf6s[s, 2],
                                      psf6s[s, 3], psf6s[s, 4], psf6s[s, 5])
            num = 0.0
            den = delta
            for k in range(K):
                j = nbr[p, k]
                m0, m1, m2, m3, m4, m5 = _inv_sym3(
                    cov6[j, 0] + p0, cov6[j, 1] + p1, cov6[j, 2] + p2,
                    cov6[j, 3] + p3, cov6[j, 4] + p4, cov6[j, 5] + p5)
                v0 = x0 - mu[j, 0]
                v1 = x1 - mu[j, 1]
                v2 = x2 - mu[j, 2]
                w0 = m0 * v0 + m1 * v1 + m2 * v2
                w1 = m1 * v0 + m3 * v1 + m4 * v2
                w2 = m2 * v0 + m4 * v1 + m5 * v2
                u = -0.5 * (v0 * w0 + v1 * w1 + v2 * w2)
                if u < EXP_CLAMP:
                    e = 0.0  # clamped tail: drop from value and gradient
                else:
                    e = np.exp(u)
                e_buf[k] = e
                w_buf[k, 0] = w0
                w_buf[k, 1] = w1
                w_buf[k, 2] = w2
                num += cvals[j] * e
                den += e
            ratio = num / den
            ihat = sigma_s[s] * ratio
            I_hat[p] = ihat
            r = ihat - I_obs[p]
            absres[p] = abs(r)
            if r > 0.0:
                g = wdata_s[s]
            elif r < 0.0:
                g = -wdata_s[s]
            else:
                g = 0.0

            dsigraw[b, s] += g * ratio
            gout = g * sigma_s[s]
            gnum = gout / den
            gden = -gout * ratio / den
            gx0 = 0.0
            gx1 = 0.0
            gx2 = 0.0
            for k in range(K):
                e = e_buf[k]
                if e == 0.0:
                    continue
                j = nbr[p, k]
                dc[b, j] += gnum * e
                a = (gnum * cvals[j] + gden) * e
                w0 = w_buf[k, 0]
                w1 = w_buf[k, 1]
                w2 = w_buf[k, 2]
                dmu[b, j, 0] += a * w0
                dmu[b, j, 1] += a * w1
                dmu[b, j, 2] += a * w2
                gx0 -= a * w0
                gx1 -= a * w1
                gx2 -= a * w2
                ha = 0.5 * a
                s00 = ha * w0 * w0
                s01 = ha * w0 * w1
                s02 = ha * w0 * w2
                s11 = ha * w1 * w1
                s12 = ha * w1 * w2
                s22 = ha * w2 * w2
                dcov6[b, j, 0] += s00
                dcov6[b, j, 1] += s01
                dcov6[b, j, 2] += s02
                dcov6[b, j, 3] += s11
                dcov6[b, j, 4] += s12
                dcov6[b, j, 5] += s22
                dpsf6[b, s, 0] += s00
                dpsf6[b, s, 1] += s01
                dpsf6[b, s, 2] += s02
                dpsf6[b, s, 3] += s11
                dpsf6[b, s, 4] += s12
                dpsf6[b, s, 5] += s22
            dt[b, s, 0] += gx0
            dt[b, s, 1] += gx1
            dt[b, s, 2] += gx2
            dRc[b, s, 0, 0] += gx0 * a0
            dRc[b, s, 0, 1] += gx0 * a1
            dRc[b, s, 0, 2] += gx0 * a2
            dRc[b, s, 1, 0] += gx1 * a0
            dRc[b, s, 1, 1] += gx1 * a1
            dRc[b, s, 1, 2] += gx1 * a2
            dRc[b, s, 2, 0] += gx2 * a0
            dRc[b, s, 2, 1] += gx2 * a1
            dRc[b, s, 2, 2] += gx2 * a2


def default_block_count(n_points: int) -> int:
    """Fixed-size block partition: deterministic independent of thread count."""
    return max(1, min(16, n_points))
