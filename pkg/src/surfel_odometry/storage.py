"""Sparse cell storage: a uniform voxel grid or a 3-D permutohedral lattice.

Grid keys are integer voxel indices with half-open cells ``[i s, (i+1) s)``.
Lattice keys are integer 4-vectors on the hyperplane ``x . 1 = 0`` whose
coordinates are all congruent modulo 4; neighboring vertices differ by
``+-(4 e_i - 1)``. The embedding below maps those neighbor offsets onto the
body diagonals of R^3, so the lattice is a body-centered cubic arrangement
whose cube edge is ``2 s / sqrt(3)`` for vertex spacing ``s``.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from itertools import product
from typing import Hashable, Iterable

import numpy as np

from .surfel import Surfel, SurfelAccumulator, SurfelSet, make_surfel

GRID = "grid"
LATTICE = "lattice"
BACKENDS = (GRID, LATTICE)

# Orthonormal basis of the zero-sum hyperplane in R^4 (columns).
LATTICE_BASIS = 0.5 * np.array(
    [[1.0, 1.0, 1.0], [1.0, -1.0, -1.0], [-1.0, 1.0, -1.0], [-1.0, -1.0, 1.0]]
)
# Embedded length of a neighbor offset 4 e_i - 1.
LATTICE_UNIT = math.sqrt(12.0)
LATTICE_NEIGHBOR_OFFSETS = np.vstack(
    [np.zeros(4, dtype=np.int64)]
    + [4 * np.eye(4, dtype=np.int64)[i] - 1 for i in range(4)]
    + [1 - 4 * np.eye(4, dtype=np.int64)[i] for i in range(4)]
)
# Key offsets translating the lattice by one cube edge along x, y, z.
LATTICE_AXIS_STEPS = np.array([[2, 2, -2, -2], [2, -2, 2, -2], [2, -2, -2, 2]], dtype=np.int64)

GRID_NEIGHBOR_OFFSETS = np.array(list(product((-1, 0, 1), repeat=3)), dtype=np.int64)

_PACK_BITS = 21
_PACK_BIAS = 1 << (_PACK_BITS - 1)


def voxel_key(p, spacing: float) -> tuple[int, int, int]:
    return tuple(int(v) for v in voxel_keys(np.asarray(p, dtype=float)[None], spacing)[0])


def voxel_keys(points: np.ndarray, spacing: float) -> np.ndarray:
    if spacing <= 0:
        raise ValueError("spacing must be positive")
    return np.floor(np.asarray(points, dtype=float) / spacing).astype(np.int64)


def lattice_embed(points: np.ndarray, spacing: float) -> np.ndarray:
    """Points in lattice units on the hyperplane (adjacent vertices sqrt(12) apart)."""
    return (np.asarray(points, dtype=float) * (LATTICE_UNIT / spacing)) @ LATTICE_BASIS.T


def lattice_keys(points: np.ndarray, spacing: float) -> np.ndarray:
    """Nearest lattice vertex for each row of ``points``.

    The lattice is the union of four cosets ``r 1 + 4 A_3`` (r = 0..3). For
    each coset the nearest point comes from rounding and then repairing the
    coordinate sum on the entries with the largest rounding error; the closest
    of the four candidates wins.
    """
    if spacing <= 0:
        raise ValueError("spacing must be positive")
    y = lattice_embed(np.asarray(points, dtype=float).reshape(-1, 3), spacing)
    n = len(y)
    best = np.zeros((n, 4), dtype=np.int64)
    best_d = np.full(n, np.inf)
    for r in range(4):
        w = (y - r) / 4.0
        z = np.rint(w)
        frac = w - z
        deficit = (-r - z.sum(axis=1)).astype(np.int64)
        # rank 0 = entry that most wants to round up
        rank = np.argsort(np.argsort(-frac, axis=1, kind="stable"), axis=1, kind="stable")
        z += (rank < deficit[:, None]) & (deficit[:, None] > 0)
        z -= (rank >= 4 + deficit[:, None]) & (deficit[:, None] < 0)
        x = (r + 4 * z).astype(np.int64)
        d = ((y - x) ** 2).sum(axis=1)
        better = d < best_d
        best[better] = x[better]
        best_d[better] = d[better]
    return best


def lattice_key(p, spacing: float) -> tuple[int, int, int, int]:
    return tuple(int(v) for v in lattice_keys(np.asarray(p, dtype=float)[None], spacing)[0])


def lattice_positions(keys: np.ndarray, spacing: float) -> np.ndarray:
    """Metric position of lattice vertices."""
    return (np.asarray(keys, dtype=float) @ LATTICE_BASIS) * (spacing / LATTICE_UNIT)


def neighbors(key: tuple[int, ...]) -> list[tuple[int, ...]]:
    """1-hop neighborhood including ``key``: 27 grid keys or 9 lattice keys."""
    k = np.asarray(key, dtype=np.int64)
    offsets = GRID_NEIGHBOR_OFFSETS if len(k) == 3 else LATTICE_NEIGHBOR_OFFSETS
    return [tuple(int(v) for v in row) for row in k + offsets]


def pack_keys(keys: np.ndarray) -> np.ndarray:
    """Injective int64 code for (N, 3) grid or (N, 4) zero-sum lattice keys."""
    k = np.asarray(keys, dtype=np.int64)[:, :3] + _PACK_BIAS
    return (k[:, 0] << (2 * _PACK_BITS)) | (k[:, 1] << _PACK_BITS) | k[:, 2]


@dataclass
class ScanEntry:
    scan_id: Hashable
    accumulator: SurfelAccumulator
    sensor_origin: np.ndarray


@dataclass
class Cell:
    center: np.ndarray
    per_scan: deque = field(default_factory=deque)
    combined: Surfel | None = None
    combined_acc: SurfelAccumulator | None = None
    dirty: bool = True

    @property
    def count(self) -> int:
        return sum(e.accumulator.count for e in self.per_scan)


def _group_moments(keys: np.ndarray, points: np.ndarray, centers_of_keys):
    """Group points by key rows; returns unique keys, centers, counts, sums, outers."""
    uniq, inv = np.unique(keys, axis=0, return_inverse=True)
    inv = inv.reshape(-1)
    centers = centers_of_keys(uniq)
    q = points - centers[inv]
    order = np.argsort(inv, kind="stable")
    inv_sorted = inv[order]
    q = q[order]
    starts = np.flatnonzero(np.r_[True, inv_sorted[1:] != inv_sorted[:-1]])
    counts = np.diff(np.r_[starts, len(q)])
    sums = np.add.reduceat(q, starts, axis=0)
    outers = np.add.reduceat(q[:, :, None] * q[:, None, :], starts, axis=0)
    return uniq, centers, counts, sums, outers


class SparseLevel:
    """One resolution level: a hash map from cell keys to cells."""

    def __init__(self, backend: str = GRID, spacing: float = 1.0):
        if backend not in BACKENDS:
            raise ValueError(f"unknown backend {backend!r}")
        if spacing <= 0:
            raise ValueError("spacing must be positive")
        self.backend = backend
        self.spacing = float(spacing)
        self.cells: dict[tuple, Cell] = {}

    def __len__(self):
        return len(self.cells)

    @property
    def key_dim(self) -> int:
        return 3 if self.backend == GRID else 4

    @property
    def cell_half_extent(self) -> float:
        """Max-norm radius of a cell around its center."""
        return 0.5 * self.spacing if self.backend == GRID else self.spacing / math.sqrt(3.0)

    @property
    def axis_step(self) -> float:
        """Smallest axis-aligned translation that maps the cell layout onto itself."""
        return self.spacing if self.backend == GRID else 2.0 * self.spacing / math.sqrt(3.0)

    def keys_for(self, points: np.ndarray) -> np.ndarray:
        if self.backend == GRID:
            return voxel_keys(points, self.spacing)
        return lattice_keys(points, self.spacing)

    def key_for(self, p) -> tuple:
        return tuple(int(v) for v in self.keys_for(np.asarray(p, dtype=float)[None])[0])

    def centers_for(self, keys: np.ndarray) -> np.ndarray:
        keys = np.asarray(keys)
        if self.backend == GRID:
            return (keys + 0.5) * self.spacing
        return lattice_positions(keys, self.spacing)

    def neighbors(self, key) -> list[tuple]:
        return neighbors(key)

    def insert_points(self, points: np.ndarray, scan_id, sensor_origin=(0.0, 0.0, 0.0)) -> set:
        """Accumulate ``points`` into the ``scan_id`` accumulator of their cells."""
        points = np.asarray(points, dtype=float).reshape(-1, 3)
        if len(points) == 0:
            return set()
        origin = np.asarray(sensor_origin, dtype=float)
        keys, centers, counts, sums, outers = _group_moments(
            self.keys_for(points), points, self.centers_for
        )
        touched = set()
        for key_row, c, n, s, o in zip(keys, centers, counts, sums, outers):
            key = tuple(int(v) for v in key_row)
            acc = SurfelAccumulator(c, int(n), s, o)
            cell = self.cells.get(key)
            if cell is None:
                cell = self.cells[key] = Cell(c)
            if cell.per_scan and cell.per_scan[-1].scan_id == scan_id:
                last = cell.per_scan[-1]
                last.accumulator = last.accumulator.merge(acc)
            else:
                cell.per_scan.append(ScanEntry(scan_id, acc, origin))
            cell.dirty = True
            touched.add(key)
        return touched

    def remove_scan(self, scan_id) -> None:
        empty = []
        for key, cell in self.cells.items():
            if any(e.scan_id == scan_id for e in cell.per_scan):
                cell.per_scan = deque(e for e in cell.per_scan if e.scan_id != scan_id)
                cell.dirty = True
                if not cell.per_scan:
                    empty.append(key)
        for key in empty:
            del self.cells[key]

    def recompute_combined(self) -> None:
        """Re-finalize the combined surfel of every dirty cell."""
        dirty = [cell for cell in self.cells.values() if cell.dirty]
        if not dirty:
            return
        counts, means, covs, views = [], [], [], []
        for cell in dirty:
            acc = SurfelAccumulator.empty(cell.center)
            view = np.zeros(3)
            for e in cell.per_scan:
                a = e.accumulator
                acc = acc.merge(a)
                v = a.mean() - e.sensor_origin
                nv = np.linalg.norm(v)
                if nv > 0:
                    view += a.count * v / nv
            nv = np.linalg.norm(view)
            if nv > 1e-12:
                view /= nv
            else:
                newest = cell.per_scan[-1]
                v = newest.accumulator.mean() - newest.sensor_origin
                nv = np.linalg.norm(v)
                view = v / nv if nv > 0 else np.array([0.0, 0.0, 1.0])
            cell.combined_acc = acc
            counts.append(acc.count)
            means.append(acc.mean())
            covs.append(acc.covariance())
            views.append(view)
        batch = SurfelSet.from_moments(
            np.array(counts), np.array(means), np.array(covs), np.array(views), np.zeros(len(dirty))
        )
        valid = batch.valid
        for i, cell in enumerate(dirty):
            cell.combined = Surfel(
                batch.means[i],
                batch.covs[i],
                batch.normals[i],
                batch.views[i],
                batch.eigenvalues[i],
                int(batch.counts[i]),
                bool(valid[i]),
            )
            cell.dirty = False

    def shift(self, key_offset: np.ndarray, translation: np.ndarray, half_side: float) -> int:
        """Re-key every cell by ``-key_offset`` after moving the frame by ``translation``.

        Cells whose center ends up wholly outside ``[-half_side, half_side]^3``
        are discarded. Returns the number of points discarded.
        """
        key_offset = np.asarray(key_offset, dtype=np.int64)
        translation = np.asarray(translation, dtype=float)
        limit = half_side + self.cell_half_extent
        moved: dict[tuple, Cell] = {}
        dropped = 0
        for key, cell in self.cells.items():
            center = cell.center - translation
            if np.abs(center).max() > limit:
                dropped += cell.count
                continue
            new_key = tuple(int(v) for v in np.asarray(key, dtype=np.int64) - key_offset)
            cell.center = center
            for e in cell.per_scan:
                e.accumulator = e.accumulator.translated(-translation)
                e.sensor_origin = e.sensor_origin - translation
            if cell.combined_acc is not None:
                cell.combined_acc = cell.combined_acc.translated(-translation)
            if cell.combined is not None:
                s = cell.combined
                cell.combined = Surfel(
                    s.mean - translation, s.covariance, s.normal, s.view_direction,
                    s.eigenvalues, s.count, s.valid,
                )
            moved[new_key] = cell
        self.cells = moved
        return dropped

    def total_points(self) -> int:
        return sum(cell.count for cell in self.cells.values())

    def combined_moments(self, keys: Iterable | None = None):
        """(keys, counts, centers, sums, outers, view_sums) of combined cells."""
        cells = self.cells if keys is None else {k: self.cells[k] for k in keys}
        if self.backend == GRID:
            karr = np.zeros((0, 3), dtype=np.int64)
        else:
            karr = np.zeros((0, 4), dtype=np.int64)
        if not cells:
            z = np.zeros((0, 3))
            return karr, np.zeros(0, dtype=np.int64), z, z, np.zeros((0, 3, 3)), z
        self.recompute_combined()
        karr = np.array(list(cells.keys()), dtype=np.int64)
        accs = [c.combined_acc for c in cells.values()]
        counts = np.array([a.count for a in accs], dtype=np.int64)
        centers = np.array([a.reference_center for a in accs])
        sums = np.array([a.sum for a in accs])
        outers = np.array([a.outer_sum for a in accs])
        views = np.array([c.combined.view_direction for c in cells.values()]) * counts[:, None]
        return karr, counts, centers, sums, outers, views
