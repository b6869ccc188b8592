import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from surfel_odometry.lie import (
    RigidTransform,
    exp_so3,
    is_rotation,
    log_so3,
    quaternion_from_rotation,
    right_jacobian,
    right_jacobian_inv,
    rotation_from_quaternion,
    skew,
)

from conftest import random_rotation

finite = st.floats(-10, 10, allow_nan=False)
vec3 = st.tuples(finite, finite, finite).map(np.array)


def quat_mul(a, b):
    ax, ay, az, aw = a
    bx, by, bz, bw = b
    return np.array(
        [
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
            aw * bw - ax * bx - ay * by - az * bz,
        ]
    )


def test_exp_zero_is_identity():
    assert np.array_equal(exp_so3([0, 0, 0]), np.eye(3))


def test_exp_quarter_turn_about_x():
    R = exp_so3([math.pi / 2, 0, 0])
    assert np.allclose(R @ [0, 1, 0], [0, 0, 1], atol=1e-15)


def test_exp_small_angle_matches_taylor():
    w = np.array([3.0, -4.0, 12.0]) / 13.0 * 1e-10
    R = exp_so3(w)
    assert np.max(np.abs(R - (np.eye(3) + skew(w)))) <= 1e-18


def test_exp_rotates_perpendicular_vector_by_norm(rng):
    for _ in range(200):
        w = rng.normal(size=3)
        w *= rng.uniform(0, math.pi - 1e-3) / np.linalg.norm(w)
        v = np.cross(w, rng.normal(size=3))
        r = exp_so3(w) @ v
        ang = math.acos(np.clip(v @ r / (np.linalg.norm(v) * np.linalg.norm(r)), -1, 1))
        assert abs(ang - np.linalg.norm(w)) < 1e-9


def test_log_identity():
    assert np.array_equal(log_so3(np.eye(3)), np.zeros(3))


def test_log_near_pi_matches_quaternion_oracle():
    theta = math.pi - 1e-4
    R = exp_so3(theta * np.array([0, 0, 1.0]))
    # quaternion oracle: axis * 2 atan2(|v|, w)
    q = quaternion_from_rotation(R)
    oracle = q[:3] / np.linalg.norm(q[:3]) * 2 * math.atan2(np.linalg.norm(q[:3]), q[3])
    assert np.allclose(log_so3(R), oracle, atol=1e-6)
    assert np.allclose(log_so3(R), [0, 0, theta], atol=1e-6)


def test_log_at_pi_uses_positive_axis_convention():
    for axis in (np.array([0, 1.0, 0]), np.array([-1.0, 2.0, 2.0]) / 3.0):
        R = exp_so3(math.pi * axis)
        w = log_so3(R)
        assert abs(np.linalg.norm(w) - math.pi) < 1e-9
        first = w[np.flatnonzero(np.abs(w) > 1e-9)[0]]
        assert first > 0
        assert np.allclose(exp_so3(w), R, atol=1e-9)


def test_log_exp_roundtrip_random(rng):
    for _ in range(1000):
        w = rng.normal(size=3)
        w *= rng.uniform(0, math.pi - 1e-3) / np.linalg.norm(w)
        assert np.max(np.abs(log_so3(exp_so3(w)) - w)) < 1e-9


@settings(max_examples=200, deadline=None)
@given(vec3)
def test_exp_is_rotation_and_exp_log_roundtrip(w):
    R = exp_so3(w)
    assert is_rotation(R)
    assert np.allclose(exp_so3(log_so3(R)), R, atol=1e-9)
    assert np.linalg.norm(log_so3(R)) <= math.pi + 1e-12


def test_quaternion_conversions_agree(rng):
    for _ in range(100):
        q = rng.normal(size=4)
        q /= np.linalg.norm(q)
        R = rotation_from_quaternion(q)
        q2 = quaternion_from_rotation(R)
        assert np.allclose(q2, q if q[3] >= 0 else -q, atol=1e-12)
        # rotating a vector via q v q* agrees with the matrix
        v = rng.normal(size=3)
        qv = quat_mul(quat_mul(q, np.r_[v, 0.0]), q * [-1, -1, -1, 1])
        assert np.allclose(qv[:3], R @ v, atol=1e-12)


def test_right_jacobian_first_order(rng):
    for _ in range(20):
        w = rng.normal(size=3)
        dw = 1e-7 * rng.normal(size=3)
        lhs = exp_so3(w + dw)
        rhs = exp_so3(w) @ exp_so3(right_jacobian(w) @ dw)
        assert np.max(np.abs(lhs - rhs)) < 1e-12
        assert np.allclose(right_jacobian(w) @ right_jacobian_inv(w), np.eye(3), atol=1e-10)


def test_rigid_composition_matches_homogeneous_matrices(rng):
    for _ in range(100):
        A = RigidTransform(random_rotation(rng), rng.normal(size=3))
        B = RigidTransform(random_rotation(rng), rng.normal(size=3))
        assert np.max(np.abs((A @ B).as_matrix() - A.as_matrix() @ B.as_matrix())) < 1e-12


def test_rigid_inverse_and_associativity(rng):
    A, B, C = (RigidTransform(random_rotation(rng), rng.normal(size=3)) for _ in range(3))
    assert np.allclose((A @ A.inverse()).as_matrix(), np.eye(4), atol=1e-9)
    assert np.allclose(((A @ B) @ C).as_matrix(), (A @ (B @ C)).as_matrix(), atol=1e-12)
    p = rng.normal(size=(5, 3))
    assert np.allclose(A.apply(p), (A.as_matrix() @ np.c_[p, np.ones(5)].T).T[:, :3])


def test_rigid_transform_is_immutable():
    T = RigidTransform.identity()
    with pytest.raises(ValueError):
        T.translation[0] = 1.0
