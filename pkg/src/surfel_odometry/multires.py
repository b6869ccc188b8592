"""Egocentric multi-resolution surfel map.

Level ``l`` has cell spacing ``m / 2**l`` and covers the centered cube of side
``b / 2**l``. Every point is stored once, in the finest level whose cube
contains it. Coarser views of finer content (for adaptive selection and for
association lookups) are built on demand by merging cell moments.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Hashable

import numpy as np

from .lie import RigidTransform
from .storage import GRID, LATTICE_AXIS_STEPS, SparseLevel, lattice_keys, pack_keys
from .surfel import Surfel, SurfelSet


@dataclass
class SelectionConfig:
    theta_planar: float = 0.01
    theta_scale: float = 0.01
    theta_degenerate: float = 0.1
    theta_normal: float = 0.8
    enabled: bool = True


@dataclass
class ResolvedSurfel:
    surfel: Surfel
    level: int
    key: tuple


@dataclass
class NodeSet:
    """Cell moments at one level: mean and scatter (count * covariance)."""

    keys: np.ndarray
    counts: np.ndarray
    means: np.ndarray
    scatters: np.ndarray
    view_sums: np.ndarray

    def __len__(self):
        return len(self.counts)

    @classmethod
    def from_level(cls, level: SparseLevel) -> NodeSet:
        keys, counts, centers, sums, outers, views = level.combined_moments()
        if len(counts) == 0:
            return cls(keys, counts, centers, outers, views)
        m = sums / counts[:, None]
        scatter = outers - counts[:, None, None] * m[:, :, None] * m[:, None, :]
        return cls(keys, counts, centers + m, scatter, views)

    def subset(self, idx) -> NodeSet:
        return NodeSet(
            self.keys[idx], self.counts[idx], self.means[idx], self.scatters[idx], self.view_sums[idx]
        )

    @staticmethod
    def concatenate(a: NodeSet, b: NodeSet) -> NodeSet:
        return NodeSet(
            np.concatenate([a.keys, b.keys]),
            np.concatenate([a.counts, b.counts]),
            np.concatenate([a.means, b.means]),
            np.concatenate([a.scatters, b.scatters]),
            np.concatenate([a.view_sums, b.view_sums]),
        )

    def surfels(self, level: int) -> SurfelSet:
        views = self.view_sums
        nv = np.linalg.norm(views, axis=1, keepdims=True)
        views = np.divide(views, nv, out=np.zeros_like(views), where=nv > 0)
        covs = self.scatters / np.maximum(self.counts, 1)[:, None, None]
        covs = 0.5 * (covs + np.swapaxes(covs, 1, 2))
        return SurfelSet.from_moments(
            self.counts, self.means, covs, views, np.full(len(self), level)
        )


def merge_nodes(nodes: NodeSet, group_keys: np.ndarray) -> tuple[NodeSet, np.ndarray]:
    """Merge rows sharing a key; returns the merged set and each row's group index."""
    uniq, inv = np.unique(group_keys, axis=0, return_inverse=True)
    inv = inv.reshape(-1)
    g = len(uniq)
    counts = np.bincount(inv, weights=nodes.counts, minlength=g)
    means = np.zeros((g, 3))
    np.add.at(means, inv, nodes.means * nodes.counts[:, None])
    means /= counts[:, None]
    dev = nodes.means - means[inv]
    scat = nodes.scatters + nodes.counts[:, None, None] * dev[:, :, None] * dev[:, None, :]
    scatters = np.zeros((g, 3, 3))
    np.add.at(scatters, inv, scat)
    views = np.zeros((g, 3))
    np.add.at(views, inv, nodes.view_sums)
    return NodeSet(uniq, counts.astype(np.int64), means, scatters, views), inv


def planar_condition(eigenvalues: np.ndarray, cfg: SelectionConfig) -> np.ndarray:
    """At least one of the planar / scale / degenerate tests on normalized eigenvalues."""
    tr = eigenvalues.sum(axis=1, keepdims=True)
    ev = np.divide(eigenvalues, tr, out=np.zeros_like(eigenvalues), where=tr > 0)
    return (
        (ev[:, 0] < cfg.theta_planar)
        | (ev[:, 0] < ev[:, 1] * cfg.theta_scale)
        | (ev[:, 1] < cfg.theta_degenerate)
    )


class LocalMultiResMap:
    def __init__(
        self,
        side_length: float = 30.0,
        coarsest_spacing: float = 2.0,
        num_levels: int = 3,
        backend: str = GRID,
        max_keyframes: int | None = None,
        shift_threshold: int = 1,
    ):
        if num_levels < 1:
            raise ValueError("need at least one level")
        if side_length <= 0 or coarsest_spacing <= 0:
            raise ValueError("side length and spacing must be positive")
        self.side_length = float(side_length)
        self.coarsest_spacing = float(coarsest_spacing)
        self.num_levels = int(num_levels)
        self.backend = backend
        self.max_keyframes = max_keyframes
        self.shift_threshold = shift_threshold
        self.levels = [
            SparseLevel(backend, coarsest_spacing / 2**l) for l in range(num_levels)
        ]
        self.map_pose = RigidTransform.identity()
        self.sensor_origin = np.zeros(3)
        self.keyframes: list[tuple[Hashable, RigidTransform]] = []
        self.version = 0
        # point-conservation ledger
        self.points_inserted = 0
        self.points_outside = 0
        self.points_removed = 0
        self.points_shifted_out = 0

    def half_side(self, level: int) -> float:
        return 0.5 * self.side_length / 2**level

    def spacing(self, level: int) -> float:
        return self.levels[level].spacing

    @property
    def shift_unit(self) -> float:
        """Metric length of one coarsest-cell shift step along an axis."""
        return self.levels[0].axis_step

    def level_indices(self, points: np.ndarray) -> np.ndarray:
        """Finest containing level per point, -1 outside the map volume."""
        r = np.abs(np.asarray(points, dtype=float).reshape(-1, 3)).max(axis=1)
        out = np.full(len(r), -1, dtype=np.int64)
        for l in range(self.num_levels):
            out[r <= self.half_side(l)] = l
        return out

    def level_for_point(self, p) -> int | None:
        l = int(self.level_indices(np.asarray(p, dtype=float)[None])[0])
        return None if l < 0 else l

    def total_points(self) -> int:
        return sum(level.total_points() for level in self.levels)

    def point_ledger_balance(self) -> int:
        """Inserted points minus everything accounted for; zero when consistent."""
        return (
            self.points_inserted
            - self.points_outside
            - self.points_removed
            - self.points_shifted_out
            - self.total_points()
        )

    def integrate_scan(self, cloud, pose: RigidTransform, scan_id) -> None:
        """Insert a sensor-frame cloud observed at ``pose`` (sensor to map)."""
        if any(sid == scan_id for sid, _ in self.keyframes):
            raise ValueError(f"scan {scan_id!r} already integrated")
        pts = pose.apply(np.asarray(cloud, dtype=float).reshape(-1, 3))
        lvl = self.level_indices(pts)
        self.points_inserted += len(pts)
        self.points_outside += int((lvl < 0).sum())
        origin = pose.translation.copy()
        for l, level in enumerate(self.levels):
            sel = lvl == l
            if sel.any():
                level.insert_points(pts[sel], scan_id, origin)
                level.recompute_combined()
        self.keyframes.append((scan_id, pose))
        self.sensor_origin = origin
        self.version += 1

    def remove_scan(self, scan_id) -> None:
        before = self.total_points()
        for level in self.levels:
            level.remove_scan(scan_id)
            level.recompute_combined()
        self.points_removed += before - self.total_points()
        self.keyframes = [kf for kf in self.keyframes if kf[0] != scan_id]
        self.version += 1

    def enforce_window(self, max_keyframes: int | None = None) -> None:
        limit = self.max_keyframes if max_keyframes is None else max_keyframes
        if limit is None:
            return
        while len(self.keyframes) > limit:
            self.remove_scan(self.keyframes[0][0])

    def maybe_shift(self, sensor_pose_in_map: RigidTransform) -> np.ndarray:
        """Shift the map by whole coarsest cells once the sensor strays too far.

        Returns the applied shift in coarsest-cell steps. World-frame geometry
        is unchanged; the map pose absorbs the translation.
        """
        steps = np.trunc(sensor_pose_in_map.translation / self.shift_unit).astype(np.int64)
        if np.abs(steps).max() < self.shift_threshold:
            return np.zeros(3, dtype=np.int64)
        self.apply_shift(steps)
        return steps

    def apply_shift(self, steps) -> None:
        steps = np.asarray(steps, dtype=np.int64)
        translation = steps * self.shift_unit
        for l, level in enumerate(self.levels):
            if self.backend == GRID:
                key_offset = steps * 2**l
            else:
                key_offset = (steps * 2**l) @ LATTICE_AXIS_STEPS
            self.points_shifted_out += level.shift(key_offset, translation, self.half_side(l))
        self.map_pose = self.map_pose @ RigidTransform(np.eye(3), translation)
        self.sensor_origin = self.sensor_origin - translation
        shift = RigidTransform(np.eye(3), -translation)
        self.keyframes = [(sid, shift @ pose) for sid, pose in self.keyframes]
        self.version += 1

    # -- derived views -----------------------------------------------------

    def native_nodes(self) -> list[NodeSet]:
        return [NodeSet.from_level(level) for level in self.levels]

    def parent_keys(self, nodes: NodeSet, level: int, target: int) -> np.ndarray:
        """Keys of ``nodes`` (living at ``level``) re-binned to coarser ``target``."""
        if self.backend == GRID:
            return np.floor_divide(nodes.keys, 2 ** (level - target))
        return lattice_keys(nodes.means, self.spacing(target))

    def pyramid(self) -> list[tuple[SurfelSet, np.ndarray]]:
        """Per level: surfels of all content inside each cell (finer levels merged
        in) and their packed keys, sorted for lookup."""
        natives = self.native_nodes()
        out = []
        for l in range(self.num_levels):
            parts = [natives[l]]
            for f in range(l + 1, self.num_levels):
                if len(natives[f]):
                    n = natives[f]
                    parts.append(NodeSet(self.parent_keys(n, f, l), n.counts, n.means, n.scatters, n.view_sums))
            nodes = parts[0]
            for p in parts[1:]:
                nodes = NodeSet.concatenate(nodes, p)
            if len(parts) > 1 and len(nodes):
                nodes, _ = merge_nodes(nodes, nodes.keys)
            surfels = nodes.surfels(l)
            packed = pack_keys(nodes.keys) if len(nodes) else np.zeros(0, dtype=np.int64)
            order = np.argsort(packed, kind="stable")
            out.append((surfels.subset(order), packed[order]))
        return out

    def select_surfels(self, cfg: SelectionConfig | None = None) -> tuple[SurfelSet, list[np.ndarray]]:
        """Adaptive resolution selection; returns valid surfels and their keys."""
        return adaptive_select_nodes(self, self.native_nodes(), cfg or SelectionConfig())

    def adaptive_select(self, cfg: SelectionConfig | None = None) -> list[ResolvedSurfel]:
        surfels, keys = self.select_surfels(cfg)
        return [
            ResolvedSurfel(surfels.surfel(i), int(surfels.levels[i]), tuple(int(v) for v in keys[i]))
            for i in range(len(surfels))
        ]


def native_positions(grid_map: LocalMultiResMap, keys: np.ndarray, level: int) -> np.ndarray:
    """Cell centers of ``keys`` at ``level``."""
    return grid_map.levels[level].centers_for(keys) if len(keys) else np.zeros((0, 3))


def adaptive_select_nodes(
    grid_map: LocalMultiResMap, natives: list[NodeSet], cfg: SelectionConfig
) -> tuple[SurfelSet, list[np.ndarray]]:
    """Coarsen planar or degenerate fine surfels level by level.

    A group of candidates sharing a coarser key is replaced by the merged
    coarser surfel when every valid member passes ``planar_condition``, the
    merged surfel is valid and passes it too, and its normal agrees with the
    mean member normal. Native cells of the coarser level with the same key are
    merged in. Valid candidates of rejected groups are emitted unchanged, and a
    coarse cell whose content was partly emitted at a finer level is never
    promoted further (its surfel would summarize only part of the cell).
    """
    L = grid_map.num_levels
    emitted: list[SurfelSet] = []
    emitted_keys: list[np.ndarray] = []

    def emit(nodes: NodeSet, level: int, surf: SurfelSet | None = None):
        if not len(nodes):
            return
        surf = surf if surf is not None else nodes.surfels(level)
        v = surf.valid
        emitted.append(surf.subset(v))
        emitted_keys.append(nodes.keys[v])

    cand = natives[L - 1]
    # cells (keys and a representative position) whose content was partly emitted finer
    blocked_keys = np.zeros((0, cand.keys.shape[1] if cand.keys.ndim == 2 else 3), np.int64)
    blocked_pos = np.zeros((0, 3))
    for l in range(L - 1, 0, -1):
        native = natives[l - 1]
        if len(blocked_keys):
            bnodes = NodeSet(blocked_keys, np.zeros(len(blocked_keys)), blocked_pos, None, None)
            blocked_keys = np.unique(grid_map.parent_keys(bnodes, l, l - 1), axis=0)
            blocked_pos = native_positions(grid_map, blocked_keys, l - 1)
        if not cfg.enabled or not len(cand):
            emit(cand, l)
            cand = native
            continue
        surf = cand.surfels(l)
        valid = surf.valid
        passing = valid & planar_condition(surf.eigenvalues, cfg)
        pkeys = grid_map.parent_keys(cand, l, l - 1)
        nc = len(cand)
        both = NodeSet.concatenate(
            NodeSet(pkeys, cand.counts, cand.means, cand.scatters, cand.view_sums), native
        )
        merged, inv = merge_nodes(both, both.keys)
        inv_c, inv_n = inv[:nc], inv[nc:]
        g = len(merged)
        n_valid = np.bincount(inv_c, weights=valid, minlength=g)
        n_pass = np.bincount(inv_c, weights=passing, minlength=g)
        ok = (n_valid > 0) & (n_pass == n_valid)
        if len(blocked_keys):
            ok &= ~np.isin(pack_keys(merged.keys), pack_keys(blocked_keys))
        msurf = merged.surfels(l - 1)
        ok &= msurf.valid & planar_condition(msurf.eigenvalues, cfg)
        nbar = np.zeros((g, 3))
        np.add.at(nbar, inv_c[valid], surf.normals[valid])
        nn = np.linalg.norm(nbar, axis=1, keepdims=True)
        nbar = np.divide(nbar, nn, out=np.zeros_like(nbar), where=nn > 0)
        ok &= np.abs(np.einsum("ij,ij->i", msurf.normals, nbar)) > cfg.theta_normal

        keep_child = ~ok[inv_c]
        emit(cand.subset(keep_child), l, surf.subset(keep_child))
        has_children = np.bincount(inv_c, minlength=g) > 0
        newly = ~ok & has_children
        if newly.any():
            blocked_keys = np.unique(np.vstack([blocked_keys, merged.keys[newly]]), axis=0)
            blocked_pos = native_positions(grid_map, blocked_keys, l - 1)
        cand = NodeSet.concatenate(merged.subset(ok), native.subset(~ok[inv_n]))
    emit(cand, 0)
    if not emitted:
        return SurfelSet.empty(), []
    return SurfelSet.concatenate(emitted), [k for ks in emitted_keys for k in ks]
