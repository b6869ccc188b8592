"""Independent reference implementations used as test oracles."""

import numpy as np
from scipy.spatial.transform import Rotation


def cox_de_boor(j: int, k: int, x: float) -> float:
    """Uniform B-spline basis N_{j,k}(x) on integer knots (order k, degree k-1)."""
    if k == 1:
        return 1.0 if j <= x < j + 1 else 0.0
    left = (x - j) / (k - 1) * cox_de_boor(j, k - 1, x)
    right = (j + k - x) / (k - 1) * cox_de_boor(j + 1, k - 1, x)
    return left + right


def blending_oracle(k: int, u: float) -> np.ndarray:
    """Suffix sums of the basis functions active on segment [k-1, k)."""
    x = k - 1 + u
    N = np.array([cox_de_boor(j, k, x) for j in range(k)])
    return np.array([N[j:].sum() for j in range(1, k)])


def naive_spline_pose(rotations, positions, lam):
    """Direct transcription of the cumulative p(u) and R(u) formulas via scipy."""
    k = len(positions)
    p = positions[0].copy()
    R = Rotation.from_matrix(rotations[0])
    for j in range(1, k):
        p = p + lam[j - 1] * (positions[j] - positions[j - 1])
        rel = Rotation.from_matrix(rotations[j - 1].T @ rotations[j]).as_rotvec()
        R = R * Rotation.from_rotvec(lam[j - 1] * rel)
    return R.as_matrix(), p


def mvn_density(x, cov):
    """Multivariate normal density at x (zero mean), computed via eigenvalues."""
    ev, V = np.linalg.eigh(cov)
    y = V.T @ x
    return float(np.exp(-0.5 * np.sum(y**2 / ev)) / np.sqrt(np.prod(2 * np.pi * ev)))


def batch_stats(points):
    pts = np.asarray(points, float)
    mu = pts.mean(axis=0)
    dev = pts - mu
    return mu, dev.T @ dev / len(pts)
