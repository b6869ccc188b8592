"""Sliding-window registration of scan surfels against the local map.

Each scan surfel is softly associated with the valid map surfels in the 1-hop
neighborhood of its cell (E-step). The weights stay fixed while
Levenberg-Marquardt updates the spline control poses (M-step).

All registration quantities live in the world frame. The map is queried in
its own frame through ``MapIndex.map_pose``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Hashable

import numpy as np

from .lie import RigidTransform, log_so3
from .multires import LocalMultiResMap
from .optim import levenberg_marquardt
from .spline import TrajectorySpline
from .storage import GRID, GRID_NEIGHBOR_OFFSETS, LATTICE_NEIGHBOR_OFFSETS, lattice_keys, pack_keys, voxel_keys
from .surfel import SurfelSet

LOG_2PI = math.log(2.0 * math.pi)
# pairs below this association weight are left out of the M-step
MIN_PAIR_WEIGHT = 1e-6


@dataclass
class RegistrationConfig:
    sigma_scale: float = 0.1
    outlier_prior: float = 0.1
    angle_std: float = math.pi / 8
    lm_max_iterations: int = 3
    em_max_iterations: int = 5
    translation_tol: float = 1e-4
    rotation_tol: float = 1e-4
    # discard an EM update that raises the negative log-likelihood
    monotone_em: bool = True

    def __post_init__(self):
        if not self.sigma_scale > 0:
            raise ValueError("sigma_scale must be positive")
        if not 0.0 < self.outlier_prior < 1.0:
            raise ValueError("outlier_prior must lie in (0, 1)")
        if self.lm_max_iterations < 1 or self.em_max_iterations < 1:
            raise ValueError("iteration limits must be >= 1")

    def sigma(self, spacing: float) -> float:
        return self.sigma_scale * spacing


@dataclass
class WindowScan:
    scan_id: Hashable
    timestamp: float
    surfels: SurfelSet  # selected scan surfels in the scan's sensor frame


@dataclass
class WindowState:
    scans: list[WindowScan]
    spline: TrajectorySpline

    def __post_init__(self):
        ts = [s.timestamp for s in self.scans]
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise ValueError("window timestamps must be strictly increasing")

    @property
    def size(self) -> int:
        return len(self.scans)

    def stacked(self):
        """Concatenated window surfels and the owning scan index of each."""
        sets = [s.surfels for s in self.scans]
        owner = np.concatenate(
            [np.full(len(s), i, dtype=np.int64) for i, s in enumerate(sets)] or [np.zeros(0, np.int64)]
        )
        return SurfelSet.concatenate(sets), owner


class MapIndex:
    """Frozen lookup structure over a map's per-level combined surfels."""

    def __init__(self, grid_map: LocalMultiResMap):
        self.backend = grid_map.backend
        self.map_pose = grid_map.map_pose
        self.spacings = [grid_map.spacing(l) for l in range(grid_map.num_levels)]
        sets, self.packed, self.offsets = [], [], []
        start = 0
        R, t = self.map_pose.rotation, self.map_pose.translation
        for surfels, packed in grid_map.pyramid():
            valid = surfels.valid
            surfels = surfels.subset(valid)
            self.packed.append(packed[valid])
            self.offsets.append(start)
            start += len(surfels)
            sets.append(surfels.transformed(R, t))
        self.surfels = SurfelSet.concatenate(sets)
        self.neighbor_offsets = GRID_NEIGHBOR_OFFSETS if self.backend == GRID else LATTICE_NEIGHBOR_OFFSETS

    def __len__(self):
        return len(self.surfels)

    def candidates(self, world_points: np.ndarray, level: int) -> tuple[np.ndarray, np.ndarray]:
        """(query row, map surfel index) for every valid map surfel in the 1-hop
        neighborhood of each query point's cell at ``level``."""
        if level >= len(self.packed) or not len(self.packed[level]) or not len(world_points):
            return np.zeros(0, np.int64), np.zeros(0, np.int64)
        q = (world_points - self.map_pose.translation) @ self.map_pose.rotation
        spacing = self.spacings[level]
        keys = voxel_keys(q, spacing) if self.backend == GRID else lattice_keys(q, spacing)
        K = len(self.neighbor_offsets)
        nb = (keys[:, None, :] + self.neighbor_offsets[None]).reshape(-1, keys.shape[1])
        codes = pack_keys(nb)
        table = self.packed[level]
        pos = np.searchsorted(table, codes)
        pos_c = np.minimum(pos, len(table) - 1)
        found = table[pos_c] == codes
        rows = np.repeat(np.arange(len(q)), K)[found]
        return rows, self.offsets[level] + pos_c[found]


@dataclass
class Associations:
    """Soft scan-to-map associations for a whole window (pair-wise arrays)."""

    pair_surfel: np.ndarray  # index into the stacked window surfels
    pair_map: np.ndarray  # index into MapIndex.surfels
    prior: np.ndarray  # p(a_sm), normalized over each surfel's candidates
    weight: np.ndarray  # w_sm
    leveled_weight: np.ndarray  # w_sm / count_s, used by the M-step
    outlier_weight: np.ndarray  # per stacked window surfel
    surfel_owner: np.ndarray  # scan index of each stacked surfel
    negative_log_likelihood: float

    @property
    def num_pairs(self) -> int:
        return len(self.pair_surfel)

    def as_list(self) -> list[Association]:
        out = []
        for s in range(len(self.outlier_weight)):
            sel = np.flatnonzero(self.pair_surfel == s)
            cands = [(int(self.pair_map[i]), float(self.prior[i]), float(self.weight[i])) for i in sel]
            out.append(Association(s, cands, float(self.outlier_weight[s])))
        return out


@dataclass
class Association:
    scan_surfel: int
    candidates: list[tuple[int, float, float]]  # (map surfel, prior, weight)
    outlier_weight: float


def _gauss_logpdf_zero_mean(x, std):
    return -0.5 * (x / std) ** 2 - np.log(std) - 0.5 * LOG_2PI


def _sym3_inverse(C):
    """Inverse and determinant of a stack of symmetric 3x3 matrices (adjugate form)."""
    a, b, c = C[:, 0, 0], C[:, 0, 1], C[:, 0, 2]
    e, f, i = C[:, 1, 1], C[:, 1, 2], C[:, 2, 2]
    A = e * i - f * f
    B = c * f - b * i
    D = b * f - c * e
    det = a * A + b * B + c * D
    inv = np.empty_like(C)
    inv[:, 0, 0] = A
    inv[:, 0, 1] = inv[:, 1, 0] = B
    inv[:, 0, 2] = inv[:, 2, 0] = D
    inv[:, 1, 1] = a * i - c * c
    inv[:, 1, 2] = inv[:, 2, 1] = b * c - a * f
    inv[:, 2, 2] = a * e - b * b
    inv /= det[:, None, None]
    return inv, det


def _pair_geometry(R, t, mu_s, cov_s, mu_m, cov_m, sigma2):
    """Residuals, combined covariances, their inverses and determinants for a batch of pairs."""
    a = (R @ mu_s[:, :, None])[:, :, 0]
    d = a + t - mu_m
    RS = R @ cov_s @ R.transpose(0, 2, 1)
    C = cov_m + RS
    C[:, [0, 1, 2], [0, 1, 2]] += sigma2[:, None]
    Ci, det = _sym3_inverse(C)
    return a, d, C, Ci, det


def observation_density(s, m, T: RigidTransform, sigma: float) -> float:
    """Gaussian density of ``T mu_s - mu_m`` under ``Sigma_m + R Sigma_s R^T + sigma^2 I``."""
    d = T.apply(s.mean) - m.mean
    C = m.covariance + T.rotation @ s.covariance @ T.rotation.T + sigma**2 * np.eye(3)
    assert sigma > 0
    _, logdet = np.linalg.slogdet(2 * math.pi * C)
    return math.exp(-0.5 * (d @ np.linalg.solve(C, d)) - 0.5 * logdet)


def similarity_prior(s, m, T: RigidTransform, sigma: float, angle_std: float = math.pi / 8) -> float:
    """Normal-angle x view-angle x normal-distance densities."""
    R = T.rotation
    cn = np.clip((R @ s.normal) @ m.normal, -1.0, 1.0)
    cv = np.clip((R @ s.view_direction) @ m.view_direction, -1.0, 1.0)
    d = T.apply(s.mean) - m.mean
    C = m.covariance + R @ s.covariance @ R.T + sigma**2 * np.eye(3)
    dn = sigma**2 * (m.normal @ np.linalg.solve(C, d))
    return math.exp(
        _gauss_logpdf_zero_mean(math.acos(cn), angle_std)
        + _gauss_logpdf_zero_mean(math.acos(cv), angle_std)
        + _gauss_logpdf_zero_mean(dn, sigma)
    )


def _window_poses(window: WindowState):
    poses = [window.spline.evaluate(s.timestamp) for s in window.scans]
    R = np.stack([P.rotation for P in poses]) if poses else np.zeros((0, 3, 3))
    t = np.stack([P.translation for P in poses]) if poses else np.zeros((0, 3))
    return R, t


def _segment_logsumexp(values, groups, n_groups, extra):
    """Per-group log(sum(exp(values)) + exp(extra))."""
    mx = extra.copy()
    np.maximum.at(mx, groups, values)
    s = np.exp(extra - mx)
    s += np.bincount(groups, weights=np.exp(values - mx[groups]), minlength=n_groups)
    return mx + np.log(s)


def e_step(window: WindowState, index: MapIndex, config: RegistrationConfig) -> Associations:
    S, owner = window.stacked()
    n = len(S)
    R_c, t_c = _window_poses(window)
    sigma_level = np.array([config.sigma(sp) for sp in index.spacings])
    rows_all, maps_all = [], []
    if n:
        mu_w = np.einsum("nij,nj->ni", R_c[owner], S.means) + t_c[owner]
        for level in np.unique(S.levels):
            sel = np.flatnonzero(S.levels == level)
            rows, maps = index.candidates(mu_w[sel], int(level))
            rows_all.append(sel[rows])
            maps_all.append(maps)
    ps = np.concatenate(rows_all) if rows_all else np.zeros(0, np.int64)
    pm = np.concatenate(maps_all) if maps_all else np.zeros(0, np.int64)

    sig_s = sigma_level[np.minimum(S.levels, len(sigma_level) - 1)] if n else np.zeros(0)
    # outlier term: p(o) N(0; 0, R Sigma_s R^T + sigma^2 I); the determinant is rotation invariant
    cov_o = S.covs + (sig_s**2)[:, None, None] * np.eye(3)
    log_out = math.log(config.outlier_prior) - 0.5 * np.linalg.slogdet(2 * math.pi * cov_o)[1] if n else np.zeros(0)

    M = index.surfels
    c = owner[ps]
    sig = sig_s[ps]
    a, d, C, Ci, det = _pair_geometry(R_c[c], t_c[c], S.means[ps], S.covs[ps], M.means[pm], M.covs[pm], sig**2)
    Cid = (Ci @ d[:, :, None])[:, :, 0]
    log_e = -0.5 * np.einsum("ni,ni->n", d, Cid) - 0.5 * (3 * LOG_2PI + np.log(det))
    Rn = (R_c[c] @ S.normals[ps][:, :, None])[:, :, 0]
    Rv = (R_c[c] @ S.views[ps][:, :, None])[:, :, 0]
    ang_n = np.arccos(np.clip(np.einsum("ni,ni->n", Rn, M.normals[pm]), -1.0, 1.0))
    ang_v = np.arccos(np.clip(np.einsum("ni,ni->n", Rv, M.views[pm]), -1.0, 1.0))
    # sigma^2 n^T C^-1 d: a length, close to n.d for flat surfels
    dn = sig**2 * np.einsum("ni,ni->n", M.normals[pm], Cid)
    log_delta = (
        _gauss_logpdf_zero_mean(ang_n, config.angle_std)
        + _gauss_logpdf_zero_mean(ang_v, config.angle_std)
        + _gauss_logpdf_zero_mean(dn, sig)
    )
    mcount = M.counts[pm].astype(float)
    denom = np.bincount(ps, weights=mcount, minlength=n)
    prior = mcount / denom[ps] if len(ps) else np.zeros(0)
    log_terms = np.log(prior) + log_delta + log_e

    log_ps = _segment_logsumexp(log_terms, ps, n, log_out) if n else np.zeros(0)
    weight = np.exp(log_terms - log_ps[ps]) if len(ps) else np.zeros(0)
    outlier = np.exp(log_out - log_ps) if n else np.zeros(0)
    leveled = weight / S.counts[ps] if len(ps) else np.zeros(0)
    return Associations(ps, pm, prior, weight, leveled, outlier, owner, float(-log_ps.sum()))


@dataclass
class MStepProblem:
    """Pair data frozen for one M-step (world-frame map side, sensor-frame scan side)."""

    times: list[float]
    pair_scan: np.ndarray
    mu_s: np.ndarray
    cov_s: np.ndarray
    mu_m: np.ndarray
    cov_m: np.ndarray
    sigma2: np.ndarray
    weight: np.ndarray

    @classmethod
    def build(cls, assoc: Associations, window: WindowState, index: MapIndex, config: RegistrationConfig):
        S, owner = window.stacked()
        ps, pm = assoc.pair_surfel, assoc.pair_map
        keep = assoc.weight > MIN_PAIR_WEIGHT
        ps, pm = ps[keep], pm[keep]
        M = index.surfels
        sig = np.array([config.sigma(sp) for sp in index.spacings])[S.levels[ps]]
        return cls(
            [s.timestamp for s in window.scans],
            owner[ps],
            S.means[ps],
            S.covs[ps],
            M.means[pm],
            M.covs[pm],
            sig**2,
            assoc.leveled_weight[keep],
        )

    def __len__(self):
        return len(self.weight)

    def _poses(self, spline: TrajectorySpline):
        poses = [spline.evaluate(t) for t in self.times]
        return np.stack([P.rotation for P in poses]), np.stack([P.translation for P in poses])

    def cost(self, spline: TrajectorySpline) -> float:
        """sum w d^T C^-1 d with C re-evaluated at the spline's poses."""
        if not len(self):
            return 0.0
        R, t = self._poses(spline)
        c = self.pair_scan
        _, d, _, Ci, _ = _pair_geometry(R[c], t[c], self.mu_s, self.cov_s, self.mu_m, self.cov_m, self.sigma2)
        Cid = (Ci @ d[:, :, None])[:, :, 0]
        return float(np.sum(self.weight * np.einsum("ni,ni->n", d, Cid)))

    def _pose_jacobians(self, spline: TrajectorySpline):
        Rs, ts, Bs = [], [], []
        for time in self.times:
            P, B = spline.evaluate_with_jacobian(time)
            Rs.append(P.rotation)
            ts.append(P.translation)
            Bs.append(B)
        return np.stack(Rs), np.stack(ts), np.stack(Bs)

    def _pair_jacobians(self, R, t):
        c = self.pair_scan
        a, d, C, Ci, _ = _pair_geometry(R[c], t[c], self.mu_s, self.cov_s, self.mu_m, self.cov_m, self.sigma2)
        Jd = np.zeros((len(a), 3, 6))
        # d(R mu + t) for R <- Exp(psi) R, t <- t + dt
        Jd[:, 0, 1], Jd[:, 0, 2] = a[:, 2], -a[:, 1]
        Jd[:, 1, 0], Jd[:, 1, 2] = -a[:, 2], a[:, 0]
        Jd[:, 2, 0], Jd[:, 2, 1] = a[:, 1], -a[:, 0]
        Jd[:, :, 3:] = np.eye(3)
        return d, Ci, Jd

    def linearize(self, spline: TrajectorySpline):
        """Cost, Gauss-Newton matrix and gradient; C is held fixed in the derivatives."""
        npar = spline.num_parameters
        if not len(self):
            return 0.0, np.zeros((npar, npar)), np.zeros(npar)
        R, t, B = self._pose_jacobians(spline)
        d, Ci, Jd = self._pair_jacobians(R, t)
        w = self.weight
        CiJ = Ci @ Jd
        Hp = w[:, None, None] * (Jd.transpose(0, 2, 1) @ CiJ)
        gp = w[:, None] * (CiJ.transpose(0, 2, 1) @ d[:, :, None])[:, :, 0]
        cost = float(np.sum(w * np.einsum("ni,ni->n", d, (Ci @ d[:, :, None])[:, :, 0])))
        ns = len(self.times)
        Hc = np.stack([np.bincount(self.pair_scan, weights=Hp[:, i, j], minlength=ns) for i in range(6) for j in range(6)], -1)
        Hc = Hc.reshape(ns, 6, 6)
        gc = np.stack([np.bincount(self.pair_scan, weights=gp[:, i], minlength=ns) for i in range(6)], -1)
        H = np.einsum("cji,cjk,ckl->il", B, Hc, B)
        g = np.einsum("cji,cj->i", B, gc)
        return cost, H, g

    def whitened_residuals(self, spline: TrajectorySpline, frozen_from: TrajectorySpline | None = None):
        """Residuals ``sqrt(w) L^T d`` with ``L L^T = C^-1``; C taken at ``frozen_from``."""
        ref = frozen_from or spline
        R0, t0 = self._poses(ref)
        c = self.pair_scan
        _, _, _, Ci, _ = _pair_geometry(R0[c], t0[c], self.mu_s, self.cov_s, self.mu_m, self.cov_m, self.sigma2)
        L = np.linalg.cholesky(Ci)
        R, t = self._poses(spline)
        d = np.einsum("nij,nj->ni", R[c], self.mu_s) + t[c] - self.mu_m
        return (np.sqrt(self.weight)[:, None] * np.einsum("nji,nj->ni", L, d)).reshape(-1)

    def residual_jacobian(self, spline: TrajectorySpline) -> np.ndarray:
        """Analytic Jacobian of ``whitened_residuals`` w.r.t. control perturbations."""
        R, t, B = self._pose_jacobians(spline)
        d, Ci, Jd = self._pair_jacobians(R, t)
        L = np.linalg.cholesky(Ci)
        J = np.sqrt(self.weight)[:, None, None] * np.einsum("nji,njk,nkl->nil", L, Jd, B[self.pair_scan])
        return J.reshape(-1, spline.num_parameters)


@dataclass
class MStepResult:
    spline: TrajectorySpline
    cost: float
    initial_cost: float
    iterations: int
    degenerate: bool


def m_step(assoc: Associations, window: WindowState, index: MapIndex, config: RegistrationConfig) -> MStepResult:
    problem = MStepProblem.build(assoc, window, index, config)
    if not len(problem):
        return MStepResult(window.spline, 0.0, 0.0, 0, True)
    out = levenberg_marquardt(
        problem.linearize,
        problem.cost,
        lambda x, dx: x.retract(dx),
        window.spline,
        config.lm_max_iterations,
    )
    return MStepResult(out.state, out.cost, out.initial_cost, out.iterations, out.degenerate)


@dataclass
class RegistrationDiagnostics:
    em_iterations: int = 0
    lm_iterations: list[int] = field(default_factory=list)
    costs: list[tuple[float, float]] = field(default_factory=list)
    association_counts: list[int] = field(default_factory=list)
    surfel_count: int = 0
    negative_log_likelihood: list[float] = field(default_factory=list)
    pose_change: list[tuple[float, float]] = field(default_factory=list)
    unconstrained: bool = False
    degenerate: bool = False
    rejected_nll: float | None = None  # likelihood of a discarded final EM update

    def records(self) -> list[dict]:
        """One flat record per EM iteration for line-oriented logging."""
        out = []
        for i in range(self.em_iterations):
            accepted = i + 1 < len(self.negative_log_likelihood)
            rec = {
                "em_iter": i,
                "pairs": self.association_counts[i],
                "nll_before": self.negative_log_likelihood[i],
                "nll_after": self.negative_log_likelihood[i + 1] if accepted else self.rejected_nll,
                "cost0": self.costs[i][0],
                "cost": self.costs[i][1],
                "lm_iters": self.lm_iterations[i],
                "accepted": accepted,
            }
            out.append(rec)
        return out


def pose_change(a: TrajectorySpline, b: TrajectorySpline, times) -> tuple[float, float]:
    dt, dr = 0.0, 0.0
    for t in times:
        Pa, Pb = a.evaluate(t), b.evaluate(t)
        dt = max(dt, float(np.linalg.norm(Pa.translation - Pb.translation)))
        dr = max(dr, float(np.linalg.norm(log_so3(Pa.rotation.T @ Pb.rotation))))
    return dt, dr


def register_window(
    window: WindowState, index: MapIndex | LocalMultiResMap, config: RegistrationConfig
) -> tuple[TrajectorySpline, RegistrationDiagnostics]:
    """Alternate E- and M-steps until the scan poses stop moving."""
    if isinstance(index, LocalMultiResMap):
        index = MapIndex(index)
    diag = RegistrationDiagnostics(surfel_count=sum(len(s.surfels) for s in window.scans))
    times = [s.timestamp for s in window.scans]
    spline = window.spline
    assoc = e_step(window, index, config)
    diag.association_counts.append(assoc.num_pairs)
    diag.negative_log_likelihood.append(assoc.negative_log_likelihood)
    if assoc.num_pairs == 0:
        diag.unconstrained = True
        return spline, diag
    for _ in range(config.em_max_iterations):
        current = WindowState(window.scans, spline)
        res = m_step(assoc, current, index, config)
        diag.em_iterations += 1
        diag.lm_iterations.append(res.iterations)
        diag.costs.append((res.initial_cost, res.cost))
        diag.degenerate |= res.degenerate
        proposal = e_step(WindowState(window.scans, res.spline), index, config)
        nll0, nll1 = assoc.negative_log_likelihood, proposal.negative_log_likelihood
        if config.monotone_em and nll1 > nll0 + 1e-9 * max(1.0, abs(nll0)):
            # the M-step objective is only a surrogate of the likelihood; keep the better estimate
            diag.rejected_nll = nll1
            break
        change = pose_change(spline, res.spline, times)
        diag.pose_change.append(change)
        spline, assoc = res.spline, proposal
        diag.association_counts.append(assoc.num_pairs)
        diag.negative_log_likelihood.append(nll1)
        if assoc.num_pairs == 0 or (change[0] < config.translation_tol and change[1] < config.rotation_tol):
            break
    return spline, diag
