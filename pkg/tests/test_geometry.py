"""Quaternion algebra, covariance assembly, and the rotation VJP."""

import numpy as np
import pytest

from gsvr.errors import InvalidParameterError, NumericalDegeneracyError
from gsvr.geometry import (EIGENVALUE_FLOOR, build_covariance, invert_spd3,
                           pack_sym6, quat_from_axis_angle, quat_normalize,
                           quat_rotation_vjp, quat_to_rotation, rotation_angle,
                           rotation_part, rotation_to_quat, unpack_sym6)

# Independently derived (reference quaternion library) for the unnormalized
# scalar-first quaternion (0.9, -0.1, 0.3, 0.2).
Q_ORACLE = np.array([0.9, -0.1, 0.3, 0.2])
R_ORACLE = np.array([
    [0.7263157894736842, -0.4421052631578947, 0.5263157894736842],
    [0.31578947368421056, 0.8947368421052632, 0.3157894736842105],
    [-0.6105263157894737, -0.06315789473684214, 0.7894736842105263],
])
# R diag(exp(2 log s)) R^T for scales (0.5, 1.0, 2.0) and the quaternion above.
COV_ORACLE = np.array([
    [1.4353739612188365, 0.32659279778393346, 1.5791135734072022],
    [0.32659279778393346, 1.224376731301939, 0.8925207756232686],
    [1.5791135734072022, 0.8925207756232686, 2.5902493074792243],
])


def test_quat_to_rotation_matches_reference_oracle():
    R = quat_to_rotation(Q_ORACLE)
    np.testing.assert_allclose(R, R_ORACLE, atol=1e-14)


def test_quat_to_rotation_identity():
    np.testing.assert_allclose(quat_to_rotation(np.array([1.0, 0, 0, 0])),
                               np.eye(3), atol=1e-15)


def test_quat_to_rotation_is_scale_invariant():
    # The map normalizes internally, so q and 3q give the same rotation.
    R1 = quat_to_rotation(Q_ORACLE)
    R2 = quat_to_rotation(3.0 * Q_ORACLE)
    np.testing.assert_allclose(R1, R2, atol=1e-14)


def test_rotation_matrices_are_orthonormal(rng):
    q = rng.normal(size=(50, 4))
    R = quat_to_rotation(q)
    eye = np.einsum("nij,nkj->nik", R, R)
    np.testing.assert_allclose(eye, np.broadcast_to(np.eye(3), (50, 3, 3)), atol=1e-12)
    np.testing.assert_allclose(np.linalg.det(R), 1.0, atol=1e-12)


def test_quat_roundtrip_through_rotation(rng):
    q = quat_normalize(rng.normal(size=(40, 4)))
    for qi in q:
        q_back = rotation_to_quat(quat_to_rotation(qi))
        # Same rotation up to quaternion sign; rotation_to_quat pins w >= 0.
        sign = 1.0 if qi[0] >= 0 else -1.0
        np.testing.assert_allclose(q_back, qi * sign, atol=1e-10)


def test_quat_normalize_rejects_zero():
    with pytest.raises(InvalidParameterError):
        quat_normalize(np.zeros(4))


def test_axis_angle_quaternion():
    q = quat_from_axis_angle(np.array([0.0, 0.0, 1.0]), np.pi / 2)
    R = quat_to_rotation(q)
    np.testing.assert_allclose(R @ [1, 0, 0], [0, 1, 0], atol=1e-14)


def test_rotation_angle_known_value():
    R = quat_to_rotation(quat_from_axis_angle(np.array([1.0, 2, -1]), np.deg2rad(3)))
    assert abs(np.rad2deg(rotation_angle(R)) - 3.0) < 1e-10
    assert rotation_angle(np.eye(3)) == 0.0


def test_rotation_part_strips_scaling():
    R = quat_to_rotation(Q_ORACLE)
    scaled = R * np.array([0.5, 0.5, 3.0])  # column-wise spacing
    np.testing.assert_allclose(rotation_part(scaled), R, atol=1e-12)


def test_build_covariance_matches_oracle():
    cov = build_covariance(np.log([0.5, 1.0, 2.0]), Q_ORACLE)
    np.testing.assert_allclose(cov, COV_ORACLE, atol=1e-12)


def test_covariance_eigenvalues_are_squared_scales(rng):
    ls = np.log(rng.uniform(0.4, 2.0, size=(10, 3)))
    q = rng.normal(size=(10, 4))
    cov = build_covariance(ls, q)
    eig = np.sort(np.linalg.eigvalsh(cov), axis=1)
    np.testing.assert_allclose(eig, np.sort(np.exp(2 * ls), axis=1), rtol=1e-10)


def test_pack_unpack_sym6_roundtrip(rng):
    A = rng.normal(size=(7, 3, 3))
    A = A + np.swapaxes(A, -1, -2)
    np.testing.assert_array_equal(unpack_sym6(pack_sym6(A)), A)


def test_invert_spd3_matches_numpy(rng):
    cov = build_covariance(np.log(rng.uniform(0.4, 2.0, size=(20, 3))),
                           rng.normal(size=(20, 4)))
    inv = invert_spd3(cov)
    np.testing.assert_allclose(inv, np.linalg.inv(cov), rtol=1e-9, atol=1e-12)


def test_invert_spd3_enforces_eigenvalue_floor():
    tiny = np.diag([EIGENVALUE_FLOOR / 10.0, 1.0, 1.0])
    with pytest.raises(NumericalDegeneracyError):
        invert_spd3(tiny)
    ok = np.diag([EIGENVALUE_FLOOR * 10.0, 1.0, 1.0])
    invert_spd3(ok)  # above the floor: must not raise


def test_quat_rotation_vjp_matches_finite_differences(rng):
    # <grad_R, dR/dq_k> via central differences on each raw component.
    for _ in range(5):
        q = rng.normal(size=4)
        grad_R = rng.normal(size=(3, 3))
        got = quat_rotation_vjp(q, grad_R)
        eps = 1e-6
        want = np.zeros(4)
        for k in range(4):
            qp, qm = q.copy(), q.copy()
            qp[k] += eps
            qm[k] -= eps
            want[k] = np.sum(grad_R * (quat_to_rotation(qp) - quat_to_rotation(qm))) / (2 * eps)
        np.testing.assert_allclose(got, want, rtol=1e-6, atol=1e-9)
