"""Trajectory association and absolute trajectory error."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .lie import RigidTransform


class DegenerateAlignmentWarning(UserWarning):
    """Positions are (nearly) collinear, so the aligning rotation is not unique."""


@dataclass(frozen=True)
class AteResult:
    rmse: float
    alignment: RigidTransform  # maps estimated positions onto ground truth
    errors: np.ndarray  # per-pair position error after alignment
    degenerate: bool


def _as_arrays(trajectory):
    """Accept [(t, RigidTransform or position)] records or a (times, positions) array pair."""
    if isinstance(trajectory, tuple) and len(trajectory) == 2 and all(isinstance(a, np.ndarray) for a in trajectory):
        t, p = trajectory
        t, p = np.asarray(t, float), np.asarray(p, float)
    else:
        t = np.array([float(s) for s, _ in trajectory])
        p = np.array([np.asarray(P.translation if isinstance(P, RigidTransform) else P, float) for _, P in trajectory])
    p = p.reshape(-1, 3)
    if np.any(np.diff(t) <= 0):
        raise ValueError("trajectory timestamps must be strictly increasing")
    return t, p


@dataclass(frozen=True)
class PairedPositions:
    """Timestamp-matched positions of an estimate and its ground truth."""

    times: np.ndarray
    estimated: np.ndarray
    ground_truth: np.ndarray

    def __len__(self):
        return len(self.times)

    def swapped(self) -> PairedPositions:
        return PairedPositions(self.times, self.ground_truth, self.estimated)


def associate(estimated, ground_truth, max_dt: float = 0.01) -> PairedPositions:
    """Pair each estimated stamp with the nearest ground-truth stamp within ``max_dt``.

    Each ground-truth record is used at most once. Raises ValueError when nothing pairs.
    """
    te, pe = _as_arrays(estimated)
    tg, pg = _as_arrays(ground_truth)
    if len(te) == 0 or len(tg) == 0:
        raise ValueError("cannot associate an empty trajectory")
    pos = np.clip(np.searchsorted(tg, te), 1, len(tg) - 1) if len(tg) > 1 else np.zeros(len(te), int)
    left = np.maximum(pos - 1, 0)
    pick = np.where(np.abs(tg[left] - te) <= np.abs(tg[pos] - te), left, pos)
    ok = np.abs(tg[pick] - te) <= max_dt * (1 + 1e-9)
    used = np.zeros(len(tg), bool)
    rows = []
    for i in np.flatnonzero(ok):
        if not used[pick[i]]:
            used[pick[i]] = True
            rows.append(i)
    if not rows:
        raise ValueError(f"no timestamp pairs within {max_dt} s")
    rows = np.array(rows)
    return PairedPositions(te[rows], pe[rows], pg[pick[rows]])


def rigid_alignment(source: np.ndarray, target: np.ndarray) -> tuple[RigidTransform, bool]:
    """Least-squares rigid transform (no scale) with ``T @ source ~ target``.

    The second value flags a degenerate configuration (collinear or coincident
    positions), in which case the rotation is not unique.
    """
    src = np.asarray(source, float)
    dst = np.asarray(target, float)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 3 or not len(src):
        raise ValueError("expected two equally sized (N, 3) arrays")
    mu_s, mu_d = src.mean(0), dst.mean(0)
    H = (dst - mu_d).T @ (src - mu_s) / len(src)
    U, _, Vt = np.linalg.svd(H)
    D = np.eye(3)
    D[2, 2] = np.sign(np.linalg.det(U @ Vt)) or 1.0
    R = U @ D @ Vt
    spread = np.linalg.svd(src - mu_s, compute_uv=False)
    degenerate = len(src) < 3 or spread[1] <= 1e-9 * max(spread[0], 1e-12)
    return RigidTransform(R, mu_d - R @ mu_s), bool(degenerate)


def align_ate(pairs: PairedPositions) -> AteResult:
    """Rigidly align the estimate onto ground truth and report the residuals."""
    if len(pairs) < 3:
        raise ValueError("ATE needs at least 3 pairs")
    T, degenerate = rigid_alignment(pairs.estimated, pairs.ground_truth)
    if degenerate:
        warnings.warn("degenerate trajectory for alignment; result still returned", DegenerateAlignmentWarning)
    err = np.linalg.norm(T.apply(pairs.estimated) - pairs.ground_truth, axis=1)
    return AteResult(float(np.sqrt(np.mean(err**2))), T, err, degenerate)


def ate_rmse(pairs: PairedPositions) -> float:
    """RMSE of position residuals (meters) after the optimal rigid alignment."""
    return align_ate(pairs).rmse


def timing_summary(durations) -> dict[str, float]:
    d = np.asarray(durations, float)
    if not len(d):
        return {"count": 0, "mean": float("nan"), "median": float("nan"), "p95": float("nan"), "max": float("nan")}
    return {
        "count": len(d),
        "mean": float(d.mean()),
        "median": float(np.median(d)),
        "p95": float(np.percentile(d, 95)),
        "max": float(d.max()),
    }
