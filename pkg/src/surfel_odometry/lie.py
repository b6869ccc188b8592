"""Rotations and rigid transforms.

Rotations are plain 3x3 orthonormal numpy arrays. ``RigidTransform`` pairs one
with a translation. Quaternions use the (x, y, z, w) ordering throughout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# Below this angle exp/log switch to second-order Taylor series.
SMALL_ANGLE = 1e-8
# Within this distance of pi the log axis comes from the symmetric part.
NEAR_PI = 1e-3


def skew(v: np.ndarray) -> np.ndarray:
    """Cross-product matrix, ``skew(a) @ b == np.cross(a, b)``."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def vee(S: np.ndarray) -> np.ndarray:
    return np.array([S[2, 1], S[0, 2], S[1, 0]])


def exp_so3(w) -> np.ndarray:
    """Rotation matrix for the rotation vector ``w`` (Rodrigues)."""
    x, y, z = (float(c) for c in np.asarray(w, dtype=float).reshape(3))
    t2 = x * x + y * y + z * z
    theta = math.sqrt(t2)
    if theta < SMALL_ANGLE:
        a, b = 1.0, 0.5
    else:
        a = math.sin(theta) / theta
        b = (1.0 - math.cos(theta)) / t2
    # I + a K + b K^2 with K^2 = w w^T - |w|^2 I
    return np.array(
        [
            [1.0 - b * (y * y + z * z), b * x * y - a * z, b * x * z + a * y],
            [b * x * y + a * z, 1.0 - b * (x * x + z * z), b * y * z - a * x],
            [b * x * z - a * y, b * y * z + a * x, 1.0 - b * (x * x + y * y)],
        ]
    )


def _canonical_axis_sign(axis: np.ndarray) -> np.ndarray:
    for c in axis:
        if abs(c) > 1e-12:
            return axis if c > 0 else -axis
    return axis


def log_so3(R: np.ndarray) -> np.ndarray:
    """Principal rotation vector of ``R``; its norm lies in [0, pi].

    At exactly pi the axis sign is fixed so its first nonzero component is
    positive.
    """
    R = np.asarray(R, dtype=float)
    s = 0.5 * vee(R - R.T)
    sin_t = math.sqrt(float(s @ s))
    cos_t = 0.5 * (np.trace(R) - 1.0)
    theta = math.atan2(sin_t, cos_t)
    if theta < SMALL_ANGLE:
        # R - R^T = 2 sin(t) K  ->  w = s * t / sin(t) ~ s (1 + t^2 / 6)
        return s * (1.0 + theta * theta / 6.0)
    if math.pi - theta > NEAR_PI:
        return s * (theta / sin_t)
    # Symmetric part is (1 - cos t) a a^T + cos t I; pick its best column.
    B = 0.5 * (R + R.T) - cos_t * np.eye(3)
    j = int(np.argmax(np.diag(B)))
    axis = B[:, j] / math.sqrt(B[j, j] * (1.0 - cos_t))
    axis /= np.linalg.norm(axis)
    if sin_t > 1e-15:
        if axis @ s < 0.0:
            axis = -axis
    else:
        axis = _canonical_axis_sign(axis)
    return axis * theta


def right_jacobian(w: np.ndarray) -> np.ndarray:
    """Right Jacobian of SO(3): ``Exp(w + dw) ~ Exp(w) Exp(Jr(w) dw)``."""
    theta2 = float(w @ w)
    K = skew(w)
    if theta2 < 1e-10:
        return np.eye(3) - 0.5 * K + (K @ K) / 6.0
    theta = math.sqrt(theta2)
    return (
        np.eye(3)
        - (1.0 - math.cos(theta)) / theta2 * K
        + (theta - math.sin(theta)) / (theta2 * theta) * (K @ K)
    )


def right_jacobian_inv(w: np.ndarray) -> np.ndarray:
    theta2 = float(w @ w)
    K = skew(w)
    if theta2 < 1e-10:
        return np.eye(3) + 0.5 * K + (K @ K) / 12.0
    theta = math.sqrt(theta2)
    c = 1.0 / theta2 - (1.0 + math.cos(theta)) / (2.0 * theta * math.sin(theta))
    return np.eye(3) + 0.5 * K + c * (K @ K)


def rotation_from_quaternion(q) -> np.ndarray:
    """3x3 matrix from an (x, y, z, w) quaternion; ``q`` is normalized first."""
    x, y, z, w = np.asarray(q, dtype=float) / np.linalg.norm(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def quaternion_from_rotation(R: np.ndarray) -> np.ndarray:
    """Unit (x, y, z, w) quaternion with w >= 0 (Shepperd's method)."""
    R = np.asarray(R, dtype=float)
    tr = np.trace(R)
    diag = np.diag(R)
    k = int(np.argmax(np.r_[diag, tr]))
    if k == 3:
        w = 0.5 * math.sqrt(max(1.0 + tr, 0.0))
        f = 0.25 / w
        q = np.array([(R[2, 1] - R[1, 2]) * f, (R[0, 2] - R[2, 0]) * f, (R[1, 0] - R[0, 1]) * f, w])
    else:
        i, j, m = k, (k + 1) % 3, (k + 2) % 3
        v = np.empty(3)
        v[i] = 0.5 * math.sqrt(max(1.0 + R[i, i] - R[j, j] - R[m, m], 0.0))
        f = 0.25 / v[i]
        v[j] = (R[j, i] + R[i, j]) * f
        v[m] = (R[m, i] + R[i, m]) * f
        w = (R[m, j] - R[j, m]) * f
        q = np.r_[v, w]
    if q[3] < 0.0:
        q = -q
    return q / np.linalg.norm(q)


def is_rotation(R: np.ndarray, tol: float = 1e-9) -> bool:
    R = np.asarray(R)
    return (
        R.shape == (3, 3)
        and np.allclose(R @ R.T, np.eye(3), atol=tol, rtol=0.0)
        and abs(np.linalg.det(R) - 1.0) < tol
    )


@dataclass(frozen=True)
class RigidTransform:
    """Rotation matrix plus translation; maps ``x`` to ``R x + t``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.array(self.rotation, dtype=float).reshape(3, 3)
        t = np.array(self.translation, dtype=float).reshape(3)
        R.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> RigidTransform:
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, M: np.ndarray) -> RigidTransform:
        M = np.asarray(M, dtype=float)
        return cls(M[:3, :3], M[:3, 3])

    @classmethod
    def from_quaternion(cls, q, t) -> RigidTransform:
        return cls(rotation_from_quaternion(q), t)

    @classmethod
    def from_rotvec(cls, w, t) -> RigidTransform:
        return cls(exp_so3(w), t)

    def as_matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M

    def quaternion(self) -> np.ndarray:
        return quaternion_from_rotation(self.rotation)

    def inverse(self) -> RigidTransform:
        Rt = self.rotation.T
        return RigidTransform(Rt, -Rt @ self.translation)

    def __matmul__(self, other: RigidTransform) -> RigidTransform:
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform a single point or an (N, 3) array of points."""
        points = np.asarray(points, dtype=float)
        return points @ self.rotation.T + self.translation

    def __repr__(self):
        w = log_so3(self.rotation)
        return f"RigidTransform(rotvec={np.round(w, 6).tolist()}, t={np.round(self.translation, 6).tolist()})"
