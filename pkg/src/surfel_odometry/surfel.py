"""Second-order point statistics (surfels).

Accumulators store point offsets from a fixed reference center (the cell
center) to keep the sums well conditioned. Covariances use the population
(1/N) normalizer on both the scan and the map side.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

MIN_POINTS = 10
# An eigenvalue counts as nonzero above this fraction of the trace.
EIGEN_REL_EPS = 1e-9


@dataclass(frozen=True)
class SurfelAccumulator:
    reference_center: np.ndarray
    count: int = 0
    sum: np.ndarray = field(default_factory=lambda: np.zeros(3))
    outer_sum: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))

    def __post_init__(self):
        for name in ("reference_center", "sum", "outer_sum"):
            a = np.array(getattr(self, name), dtype=float)
            a.flags.writeable = False
            object.__setattr__(self, name, a)

    @classmethod
    def empty(cls, center) -> SurfelAccumulator:
        return cls(np.asarray(center, dtype=float))

    @classmethod
    def from_points(cls, center, points) -> SurfelAccumulator:
        center = np.asarray(center, dtype=float)
        q = np.asarray(points, dtype=float).reshape(-1, 3) - center
        return cls(center, len(q), q.sum(axis=0), q.T @ q)

    def accumulate(self, p) -> SurfelAccumulator:
        q = np.asarray(p, dtype=float) - self.reference_center
        return SurfelAccumulator(
            self.reference_center, self.count + 1, self.sum + q, self.outer_sum + np.outer(q, q)
        )

    def recentered(self, center) -> SurfelAccumulator:
        """Same statistics expressed relative to another reference center."""
        center = np.asarray(center, dtype=float)
        d = self.reference_center - center
        if not d.any():
            return self
        s = self.sum
        outer = self.outer_sum + np.outer(s, d) + np.outer(d, s) + self.count * np.outer(d, d)
        return SurfelAccumulator(center, self.count, s + self.count * d, outer)

    def merge(self, other: SurfelAccumulator) -> SurfelAccumulator:
        """Statistics of the union of both point sets, in this accumulator's frame."""
        if other.count == 0:
            return self
        if self.count == 0:
            return other.recentered(self.reference_center)
        o = other.recentered(self.reference_center)
        return SurfelAccumulator(
            self.reference_center,
            self.count + o.count,
            self.sum + o.sum,
            self.outer_sum + o.outer_sum,
        )

    def translated(self, offset) -> SurfelAccumulator:
        """Move the whole point set (and the reference center) by ``offset``."""
        return SurfelAccumulator(
            self.reference_center + np.asarray(offset, dtype=float),
            self.count,
            self.sum,
            self.outer_sum,
        )

    def mean(self) -> np.ndarray:
        return self.reference_center + self.sum / self.count

    def covariance(self) -> np.ndarray:
        m = self.sum / self.count
        C = self.outer_sum / self.count - np.outer(m, m)
        return 0.5 * (C + C.T)

    def finalize(self, sensor_origin) -> Surfel:
        if self.count == 0:
            nan3 = np.full(3, np.nan)
            return Surfel(nan3, np.full((3, 3), np.nan), nan3, nan3, nan3, 0, False)
        mean = self.mean()
        v = mean - np.asarray(sensor_origin, dtype=float)
        nv = np.linalg.norm(v)
        v = v / nv if nv > 0 else np.array([0.0, 0.0, 1.0])
        return make_surfel(mean, self.covariance(), v, self.count)


@dataclass(frozen=True)
class Surfel:
    mean: np.ndarray
    covariance: np.ndarray
    normal: np.ndarray
    view_direction: np.ndarray
    eigenvalues: np.ndarray
    count: int
    valid: bool


def is_valid(count, eigenvalues) -> np.ndarray | bool:
    """At least MIN_POINTS points and both leading eigenvalues nonzero."""
    ev = np.asarray(eigenvalues)
    tr = ev.sum(axis=-1)
    eps = EIGEN_REL_EPS * tr
    return (
        (np.asarray(count) >= MIN_POINTS)
        & (tr > 0)
        & (ev[..., 1] > eps)
        & (ev[..., 2] > eps)
    )


def _eigen(covs: np.ndarray, views: np.ndarray):
    ev, vecs = np.linalg.eigh(covs)
    ev = np.maximum(ev, 0.0)
    normals = vecs[..., :, 0]
    # Orient normals toward the sensor, i.e. against the view direction.
    flip = np.einsum("...i,...i->...", normals, views) > 0
    normals = np.where(flip[..., None], -normals, normals)
    return ev, normals


def make_surfel(mean, cov, view, count) -> Surfel:
    ev, n = _eigen(cov[None], view[None])
    return Surfel(mean, cov, n[0], view, ev[0], int(count), bool(is_valid(count, ev[0])))


@dataclass
class SurfelSet:
    """Column-wise surfel storage used by selection and registration."""

    means: np.ndarray
    covs: np.ndarray
    normals: np.ndarray
    views: np.ndarray
    eigenvalues: np.ndarray
    counts: np.ndarray
    levels: np.ndarray

    def __len__(self):
        return len(self.counts)

    @classmethod
    def empty(cls) -> SurfelSet:
        return cls(
            np.zeros((0, 3)),
            np.zeros((0, 3, 3)),
            np.zeros((0, 3)),
            np.zeros((0, 3)),
            np.zeros((0, 3)),
            np.zeros(0, dtype=np.int64),
            np.zeros(0, dtype=np.int64),
        )

    @classmethod
    def from_moments(cls, counts, means, covs, views, levels) -> SurfelSet:
        views = np.asarray(views, dtype=float)
        ev, normals = _eigen(covs, views)
        return cls(
            np.asarray(means, dtype=float),
            covs,
            normals,
            views,
            ev,
            np.asarray(counts, dtype=np.int64),
            np.asarray(levels, dtype=np.int64),
        )

    @property
    def valid(self) -> np.ndarray:
        return is_valid(self.counts, self.eigenvalues)

    def subset(self, idx) -> SurfelSet:
        return SurfelSet(
            self.means[idx],
            self.covs[idx],
            self.normals[idx],
            self.views[idx],
            self.eigenvalues[idx],
            self.counts[idx],
            self.levels[idx],
        )

    def surfel(self, i: int) -> Surfel:
        return Surfel(
            self.means[i],
            self.covs[i],
            self.normals[i],
            self.views[i],
            self.eigenvalues[i],
            int(self.counts[i]),
            bool(is_valid(self.counts[i], self.eigenvalues[i])),
        )

    def transformed(self, R: np.ndarray, t: np.ndarray) -> SurfelSet:
        return SurfelSet(
            self.means @ R.T + t,
            np.einsum("ij,njk,lk->nil", R, self.covs, R),
            self.normals @ R.T,
            self.views @ R.T,
            self.eigenvalues,
            self.counts,
            self.levels,
        )

    @staticmethod
    def concatenate(sets) -> SurfelSet:
        sets = list(sets)
        if not sets:
            return SurfelSet.empty()
        return SurfelSet(*(np.concatenate([getattr(s, f) for s in sets]) for f in SurfelSet.__dataclass_fields__))
