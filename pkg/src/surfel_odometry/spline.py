"""Single-segment cumulative B-spline on SO(3) x R^3.

Position and rotation are separate cumulative splines over the same knots::

    p(u) = p_0 + sum_j lam_j(u) (p_j - p_{j-1})
    R(u) = R_0 prod_j Exp(lam_j(u) Log(R_{j-1}^T R_j))

Control-pose perturbations are ordered ``[phi_0, dp_0, phi_1, dp_1, ...]``
with ``R_i <- Exp(phi_i) R_i`` and ``p_i <- p_i + dp_i``. Pose perturbations
use the same convention (rotation rows first, then translation).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property, lru_cache
from typing import NamedTuple, Sequence

import numpy as np

from .lie import RigidTransform, exp_so3, log_so3, right_jacobian, right_jacobian_inv
from .optim import levenberg_marquardt

SUPPORTED_ORDERS = (2, 3, 4)
# Slack on the closed segment [t0, t0 + dt] for round-off in the caller's times.
_SEGMENT_EPS = 1e-9


class SegmentPhase(NamedTuple):
    index: int
    phase: float


def segment_and_phase(t: float, t0: float, dt: float) -> SegmentPhase:
    if dt <= 0:
        raise ValueError("knot spacing must be positive")
    x = (t - t0) / dt
    i = math.floor(x)
    u = x - i
    if u >= 1.0:  # x just below an integer can round up
        i, u = i + 1, 0.0
    return SegmentPhase(int(i), float(u))


@lru_cache(maxsize=None)
def cumulative_basis_matrix(k: int) -> np.ndarray:
    """(k-1, k) matrix C with ``lam_j(u) = C[j-1] @ [1, u, ..., u^(k-1)]``."""
    if k not in SUPPORTED_ORDERS:
        raise ValueError(f"unsupported spline order {k}")
    M = np.zeros((k, k))
    fact = math.factorial(k - 1)
    for s in range(k):
        for n in range(k):
            acc = 0.0
            for l in range(s, k):
                acc += (-1) ** (l - s) * math.comb(k, l - s) * (k - 1 - l) ** (k - 1 - n)
            M[s, n] = math.comb(k - 1, n) * acc / fact
    # Suffix sums over basis rows give the cumulative form.
    C = np.cumsum(M[::-1], axis=0)[::-1]
    C = C[1:].copy()
    C.flags.writeable = False
    return C


def cumulative_blending(k: int, u: float) -> np.ndarray:
    """Cumulative blending coefficients ``(lam_1, ..., lam_{k-1})`` at phase ``u``."""
    C = cumulative_basis_matrix(k)
    powers = u ** np.arange(k)
    return C @ powers


def _position_weights(lam: np.ndarray) -> np.ndarray:
    """Per-control weights b_i with p(u) = sum_i b_i p_i."""
    ext = np.r_[1.0, lam, 0.0]
    return ext[:-1] - ext[1:]


@dataclass(frozen=True)
class TrajectorySpline:
    order: int
    knot_origin: float
    knot_spacing: float
    rotations: np.ndarray  # (k, 3, 3)
    positions: np.ndarray  # (k, 3)

    def __post_init__(self):
        if self.order not in SUPPORTED_ORDERS:
            raise ValueError(f"unsupported spline order {self.order}")
        if not self.knot_spacing > 0:
            raise ValueError("knot spacing must be positive")
        R = np.array(self.rotations, dtype=float).reshape(-1, 3, 3)
        p = np.array(self.positions, dtype=float).reshape(-1, 3)
        if len(R) != self.order or len(p) != self.order:
            raise ValueError(f"need exactly {self.order} control poses")
        R.flags.writeable = False
        p.flags.writeable = False
        object.__setattr__(self, "rotations", R)
        object.__setattr__(self, "positions", p)

    @classmethod
    def constant(cls, order: int, t0: float, dt: float, pose: RigidTransform | None = None):
        pose = pose or RigidTransform.identity()
        return cls(
            order,
            t0,
            dt,
            np.repeat(pose.rotation[None], order, axis=0),
            np.repeat(pose.translation[None], order, axis=0),
        )

    @classmethod
    def from_poses(cls, order: int, t0: float, dt: float, poses: Sequence[RigidTransform]):
        return cls(
            order,
            t0,
            dt,
            np.stack([P.rotation for P in poses]),
            np.stack([P.translation for P in poses]),
        )

    @property
    def end_time(self) -> float:
        return self.knot_origin + self.knot_spacing

    @property
    def num_parameters(self) -> int:
        return 6 * self.order

    @cached_property
    def _relative_rotations(self) -> np.ndarray:
        """``log(R_{j-1}^T R_j)`` for j = 1..k-1."""
        return np.array([log_so3(self.rotations[j - 1].T @ self.rotations[j]) for j in range(1, self.order)])

    def control_poses(self) -> list[RigidTransform]:
        return [RigidTransform(R, p) for R, p in zip(self.rotations, self.positions)]

    def phase(self, t: float, extrapolate: bool = False) -> float:
        u = (t - self.knot_origin) / self.knot_spacing
        if not extrapolate and not (-_SEGMENT_EPS <= u <= 1.0 + _SEGMENT_EPS):
            raise ValueError(
                f"t={t} outside active segment [{self.knot_origin}, {self.end_time}]"
            )
        return u

    def evaluate(self, t: float, extrapolate: bool = False) -> RigidTransform:
        """Pose at time ``t``.

        The segment is closed at both ends. With ``extrapolate`` the blending
        polynomials are evaluated outside it as well.
        """
        u = self.phase(t, extrapolate)
        lam = cumulative_blending(self.order, u)
        R = self.rotations[0]
        for j in range(1, self.order):
            R = R @ exp_so3(lam[j - 1] * self._relative_rotations[j - 1])
        p = _position_weights(lam) @ self.positions
        return RigidTransform(R, p)

    def evaluate_with_jacobian(
        self, t: float, extrapolate: bool = False
    ) -> tuple[RigidTransform, np.ndarray]:
        """Pose and its (6, 6k) derivative w.r.t. control perturbations."""
        k = self.order
        u = self.phase(t, extrapolate)
        lam = cumulative_blending(k, u)
        J = np.zeros((6, 6 * k))
        J[0:3, 0:3] = np.eye(3)
        R = self.rotations[0]
        for j in range(1, k):
            Rj = self.rotations[j]
            d = self._relative_rotations[j - 1]
            ld = lam[j - 1] * d
            R = R @ exp_so3(ld)
            M = R @ (lam[j - 1] * right_jacobian(ld)) @ right_jacobian_inv(d) @ Rj.T
            J[0:3, 6 * j : 6 * j + 3] += M
            J[0:3, 6 * (j - 1) : 6 * (j - 1) + 3] -= M
        b = _position_weights(lam)
        for i in range(k):
            J[3:6, 6 * i + 3 : 6 * i + 6] = b[i] * np.eye(3)
        return RigidTransform(R, b @ self.positions), J

    def retract(self, delta: np.ndarray) -> TrajectorySpline:
        delta = np.asarray(delta, dtype=float).reshape(self.order, 6)
        R = np.stack([exp_so3(d[:3]) @ Ri for d, Ri in zip(delta, self.rotations)])
        return TrajectorySpline(
            self.order, self.knot_origin, self.knot_spacing, R, self.positions + delta[:, 3:]
        )

    def transformed(self, G: RigidTransform) -> TrajectorySpline:
        """Spline with every control pose left-multiplied by ``G``."""
        R = np.einsum("ij,kjl->kil", G.rotation, self.rotations)
        p = self.positions @ G.rotation.T + G.translation
        return TrajectorySpline(self.order, self.knot_origin, self.knot_spacing, R, p)

    def with_knots(self, t0: float, dt: float) -> TrajectorySpline:
        return TrajectorySpline(self.order, t0, dt, self.rotations, self.positions)


@dataclass
class ReinitResult:
    spline: TrajectorySpline
    residual: float
    warm_start_residual: float
    converged: bool
    iterations: int


def _sample_residuals(spline: TrajectorySpline, samples):
    res = []
    for t, pose in samples:
        P = spline.evaluate(t)
        res.append(P.translation - pose.translation)
        res.append(log_so3(pose.rotation.T @ P.rotation))
    return np.concatenate(res)


def reinit_after_shift(
    previous_poses: Sequence[tuple[float, RigidTransform]],
    new_t0: float,
    new_dt: float,
    k: int,
    warm_start: TrajectorySpline | None = None,
    max_iterations: int = 20,
    regularization: float = 1e-6,
    proximal_rounds: int = 3,
) -> ReinitResult:
    """Fit ``k`` control poses on the new knots to previous pose estimates.

    Minimizes the summed squared position and rotation-log residuals at the
    sample times. ``warm_start`` supplies the initial control poses (its knots
    are replaced); without one every control starts at the sample nearest the
    segment middle. With fewer distinct sample times than ``k`` a penalty of
    weight ``regularization`` pulls the controls toward the warm start; the
    penalty is then re-anchored at the solution for ``proximal_rounds`` more
    solves, so it only picks among (near) exact fits instead of biasing them.
    The reported residuals exclude the penalty.
    """
    samples = [(float(t), P) for t, P in previous_poses]
    if not samples:
        raise ValueError("need at least one pose sample")
    if warm_start is None:
        mid = new_t0 + 0.5 * new_dt
        _, P = min(samples, key=lambda s: abs(s[0] - mid))
        x0 = TrajectorySpline.constant(k, new_t0, new_dt, P)
    else:
        if warm_start.order != k:
            raise ValueError("warm start order mismatch")
        x0 = warm_start.with_knots(new_t0, new_dt)
    for t, _ in samples:
        x0.phase(t)

    n_distinct = len({t for t, _ in samples})
    reg = regularization if n_distinct < k else 0.0
    sqrt_reg = math.sqrt(reg)
    anchor = x0

    def residuals(x: TrajectorySpline) -> np.ndarray:
        r = _sample_residuals(x, samples)
        if reg:
            extra = []
            for Ra, pa, R, p in zip(anchor.rotations, anchor.positions, x.rotations, x.positions):
                extra.append(sqrt_reg * log_so3(Ra.T @ R))
                extra.append(sqrt_reg * (p - pa))
            r = np.concatenate([r, *extra])
        return r

    def linearize(x: TrajectorySpline):
        rows, res = [], []
        for t, pose in samples:
            P, J = x.evaluate_with_jacobian(t)
            e_R = log_so3(pose.rotation.T @ P.rotation)
            res += [P.translation - pose.translation, e_R]
            rows += [J[3:6], right_jacobian_inv(e_R) @ P.rotation.T @ J[0:3]]
        if reg:
            for i, (Ra, pa, R, p) in enumerate(
                zip(anchor.rotations, anchor.positions, x.rotations, x.positions)
            ):
                e = log_so3(Ra.T @ R)
                Jr = np.zeros((3, 6 * k))
                Jr[:, 6 * i : 6 * i + 3] = sqrt_reg * right_jacobian_inv(e) @ R.T
                Jt = np.zeros((3, 6 * k))
                Jt[:, 6 * i + 3 : 6 * i + 6] = sqrt_reg * np.eye(3)
                res += [sqrt_reg * e, sqrt_reg * (p - pa)]
                rows += [Jr, Jt]
        r = np.concatenate(res)
        J = np.vstack(rows)
        return float(r @ r), J.T @ J, J.T @ r

    def cost(x: TrajectorySpline) -> float:
        r = residuals(x)
        return float(r @ r)

    out = levenberg_marquardt(
        linearize, cost, lambda x, d: x.retract(d), x0, max_iterations, step_tol=1e-12
    )
    iterations, converged = out.iterations, out.converged
    for _ in range(proximal_rounds if reg else 0):
        anchor = out.state
        out = levenberg_marquardt(
            linearize, cost, lambda x, d: x.retract(d), anchor, max_iterations, step_tol=1e-12
        )
        iterations += out.iterations
        converged = out.converged
    fit = _sample_residuals(out.state, samples)
    start = _sample_residuals(x0, samples)
    return ReinitResult(out.state, float(fit @ fit), float(start @ start), converged, iterations)
