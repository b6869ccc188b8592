from itertools import product

import numpy as np
import pytest

from surfel_odometry.storage import (
    GRID,
    LATTICE,
    SparseLevel,
    lattice_embed,
    lattice_key,
    lattice_keys,
    lattice_positions,
    neighbors,
    voxel_key,
    voxel_keys,
)
from surfel_odometry.surfel import SurfelAccumulator

from oracles import batch_stats


def brute_force_nearest(y):
    """Nearest point of the union of cosets r*1 + 4Z^4 with zero coordinate sum."""
    best_d = np.full(len(y), np.inf)
    best = np.zeros((len(y), 4))
    steps = np.array(list(product(range(-2, 3), repeat=4)))
    for r in range(4):
        base = np.rint((y - r) / 4.0)
        for s in steps:
            x = r + 4 * (base + s)
            ok = x.sum(axis=1) == 0
            d = np.where(ok, ((y - x) ** 2).sum(axis=1), np.inf)
            better = d < best_d
            best_d[better] = d[better]
            best[better] = x[better]
    return best, best_d


@pytest.mark.parametrize(
    "p,key", [((0.05, 0.05, 0.05), (0, 0, 0)), ((-0.05, 0, 0), (-1, 0, 0)), ((0.1, 0, 0), (1, 0, 0))]
)
def test_voxel_key_examples(p, key):
    assert voxel_key(p, 0.1) == key


def test_voxel_keys_partition(rng):
    pts = rng.uniform(-5, 5, size=(1000, 3))
    k = voxel_keys(pts, 0.3)
    lo = k * 0.3
    assert np.all(pts >= lo - 1e-12) and np.all(pts < lo + 0.3)


def test_lattice_origin_and_zero_sum(rng):
    assert lattice_key((0.0, 0.0, 0.0), 0.5) == (0, 0, 0, 0)
    keys = lattice_keys(rng.uniform(-10, 10, size=(1000, 3)), 0.37)
    assert np.all(keys.sum(axis=1) == 0)
    assert np.all((keys - keys[:, :1]) % 4 == 0)


def test_lattice_nearest_vertex_vs_brute_force(rng):
    spacing = 0.7
    pts = rng.uniform(-20, 20, size=(1000, 3))
    y = lattice_embed(pts, spacing)
    keys = lattice_keys(pts, spacing)
    _, best_d = brute_force_nearest(y)
    d = ((y - keys) ** 2).sum(axis=1)
    assert np.all(d <= best_d + 1e-9)


def test_lattice_vertex_spacing():
    s = 0.9
    nb = np.array(neighbors((0, 0, 0, 0))[1:])
    dist = np.linalg.norm(lattice_positions(nb, s), axis=1)
    assert np.allclose(dist, s, atol=1e-9)
    # no other vertex is closer than s
    others = np.array([k for k in product(range(-8, 9), repeat=3)])
    cand = np.c_[others, -others.sum(axis=1)]
    cand = cand[np.all((cand - cand[:, :1]) % 4 == 0, axis=1) & np.any(cand != 0, axis=1)]
    assert np.linalg.norm(lattice_positions(cand, s), axis=1).min() == pytest.approx(s, abs=1e-9)


def test_neighbor_counts_and_symmetry(rng):
    g = neighbors((0, 0, 0))
    assert len(g) == 27 and (1, -1, 0) in g and (0, 0, 0) in g
    lat = neighbors((0, 0, 0, 0))
    assert len(lat) == 9 and all(sum(k) == 0 for k in lat)
    for key in [tuple(k) for k in lattice_keys(rng.uniform(-5, 5, (50, 3)), 0.4)]:
        nb = neighbors(key)
        assert len(set(nb)) == 9
        assert all(key in neighbors(b) for b in nb)
    for key in [tuple(k) for k in voxel_keys(rng.uniform(-5, 5, (20, 3)), 0.4)]:
        assert all(key in neighbors(b) for b in neighbors(key))


@pytest.mark.parametrize("backend", [GRID, LATTICE])
def test_insert_one_cell_two_scans(backend, rng):
    level = SparseLevel(backend, 1.0)
    c = level.centers_for(np.array([level.key_for([0.2, 0.2, 0.2])]))[0]
    pts = c + rng.uniform(-0.05, 0.05, size=(100, 3))
    assert len(level.insert_points(pts, "a")) == 1
    (cell,) = level.cells.values()
    assert len(cell.per_scan) == 1 and cell.per_scan[0].accumulator.count == 100
    level.insert_points(pts, "b")
    assert len(level.cells) == 1 and len(cell.per_scan) == 2


@pytest.mark.parametrize("backend", [GRID, LATTICE])
def test_recompute_matches_batch_oracle(backend, rng):
    level = SparseLevel(backend, 0.5)
    a, b = rng.uniform(-2, 2, size=(3000, 3)), rng.uniform(-2, 2, size=(3000, 3))
    level.insert_points(a, 1)
    level.insert_points(b, 2, sensor_origin=[1.0, 0, 0])
    level.recompute_combined()
    allpts = np.vstack([a, b])
    keys = level.keys_for(allpts)
    checked = 0
    for key, cell in list(level.cells.items())[:100]:
        sel = np.all(keys == np.array(key), axis=1)
        mu, cov = batch_stats(allpts[sel])
        assert cell.combined.count == sel.sum()
        assert np.allclose(cell.combined.mean, mu, atol=1e-9)
        assert np.allclose(cell.combined.covariance, cov, atol=1e-9)
        assert not cell.dirty
        checked += 1
    assert checked == min(100, len(level.cells))


def test_combined_of_two_accumulators_is_their_merge(rng):
    level = SparseLevel(GRID, 1.0)
    a, b = rng.uniform(0, 1, (20, 3)), rng.uniform(0, 1, (30, 3))
    level.insert_points(a, 1)
    level.insert_points(b, 2)
    level.recompute_combined()
    (cell,) = level.cells.values()
    m = SurfelAccumulator.from_points(cell.center, a).merge(SurfelAccumulator.from_points(cell.center, b))
    assert np.allclose(cell.combined.mean, m.mean(), atol=1e-12)
    assert np.allclose(cell.combined.covariance, m.covariance(), atol=1e-12)
    level.recompute_combined()  # no dirty cells: no-op
    assert not cell.dirty


@pytest.mark.parametrize("backend", [GRID, LATTICE])
def test_remove_scan(backend, rng):
    level = SparseLevel(backend, 0.5)
    a, b = rng.uniform(-1, 1, size=(2000, 3)), rng.uniform(-1, 1, size=(2000, 3))
    level.insert_points(a, "A")
    keys_a = set(level.cells)
    level.insert_points(b, "B")
    level.remove_scan("missing")
    level.remove_scan("A")
    level.recompute_combined()
    kb = level.keys_for(b)
    for key, cell in level.cells.items():
        mu, cov = batch_stats(b[np.all(kb == np.array(key), axis=1)])
        assert np.allclose(cell.combined.mean, mu, atol=1e-9)
        assert np.allclose(cell.combined.covariance, cov, atol=1e-9)
    level.remove_scan("B")
    assert len(level) == 0
    level.insert_points(a, "A")
    level.insert_points(b, "B")
    level.remove_scan("B")
    assert set(level.cells) == keys_a
