import numpy as np
import pytest

from splatfields import (EmptyFieldError, GroundTruthField, OctreeConfig,
                         TruncationConfig, allocate_proxies, extract_attributes,
                         extract_splat, octree_sample, optimize_proxies)
from splatfields.extraction import CellSet, ExtractionStats, ProxyPoints, score_leaf_cells
from splatfields.toyshapes import random_splat, single_gaussian_splat


class ConstantField:
    truncation = TruncationConfig()

    def __init__(self, value):
        self.value = value

    def prob(self, q):
        return np.full(len(np.atleast_2d(q)), self.value)

    def prob_grad(self, q):
        return np.zeros((len(np.atleast_2d(q)), 3))


def test_octree_constant_one_keeps_all_leaves():
    cells = octree_sample(ConstantField(1.0), OctreeConfig(max_depth=2, target_count=1))
    assert cells.count == 8 ** 2
    assert cells.half_extent == pytest.approx(0.25)
    assert np.all(cells.scores >= 0.3)


def test_octree_constant_zero_raises_empty_field():
    with pytest.raises(EmptyFieldError, match="empty field"):
        octree_sample(ConstantField(0.0), OctreeConfig(max_depth=2, target_count=1))


def test_octree_single_gaussian_connected_and_matches_dense_enumeration():
    s = single_gaussian_splat(center=(0.17, -0.23, 0.4))
    f = GroundTruthField(s, TruncationConfig(0.05))
    cfg = OctreeConfig(max_depth=5, threshold=0.3, target_count=1)
    cells = octree_sample(f, cfg)
    h = cells.half_extent
    assert h == pytest.approx(1 / 2 ** 5)

    # the leaf containing the center must be retained
    c = s.centers[0].astype(np.float64)
    assert np.any(np.all(np.abs(cells.centers - c) <= h + 1e-12, axis=1))

    # dense enumeration with the same leaf rule gives the identical set
    grid = np.arange(2 ** 5) * 2 * h - 1 + h
    gx, gy, gz = np.meshgrid(grid, grid, grid, indexing="ij")
    every = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)
    scores = score_leaf_cells(f, every, h, cfg)
    dense = every[scores >= cfg.threshold]
    a = {tuple(np.round(x, 10)) for x in cells.centers}
    b = {tuple(np.round(x, 10)) for x in dense}
    assert a == b

    # connectivity: every retained leaf touches another (single blob)
    if cells.count > 1:
        from scipy.spatial import cKDTree
        d, _ = cKDTree(cells.centers).query(cells.centers, k=2)
        assert np.all(d[:, 1] <= 2 * h * np.sqrt(3) + 1e-9)


def test_allocate_single_cell_contains_all_points():
    cells = CellSet(centers=np.array([[0.5, 0.5, 0.5]]), half_extent=0.125,
                    scores=np.array([0.9]), depth=3)
    prox = allocate_proxies(cells, 64, seed=0)
    assert prox.count == 64
    assert np.all(np.abs(prox.positions - [0.5, 0.5, 0.5]) <= 0.125 + 1e-6)


def test_allocate_equal_cells_split_evenly():
    cells = CellSet(centers=np.array([[-0.5, 0, 0], [0.5, 0, 0]]), half_extent=0.25,
                    scores=np.array([0.8, 0.8]), depth=2)
    prox = allocate_proxies(cells, 10, seed=1)
    owners = (prox.positions[:, 0] > 0).sum()
    assert owners == 5


@pytest.mark.parametrize("n", [1, 7, 1024, 100_000])
def test_allocate_exact_count(n):
    rng = np.random.default_rng(2)
    cells = CellSet(centers=rng.uniform(-0.8, 0.8, (13, 3)), half_extent=1 / 64,
                    scores=rng.uniform(0.3, 1.0, 13), depth=6)
    assert allocate_proxies(cells, n, seed=3).count == n


def test_allocate_deterministic():
    rng = np.random.default_rng(4)
    cells = CellSet(centers=rng.uniform(-0.8, 0.8, (5, 3)), half_extent=1 / 32,
                    scores=rng.uniform(0.3, 1.0, 5), depth=5)
    a = allocate_proxies(cells, 100, seed=9)
    b = allocate_proxies(cells, 100, seed=9)
    np.testing.assert_array_equal(a.positions, b.positions)


def test_optimize_stays_at_local_maxima():
    s = random_splat(5, seed=5)
    f = GroundTruthField(s, TruncationConfig(0.05))
    prox = ProxyPoints(positions=s.centers.copy(), probabilities=f.prob(s.centers))
    out = optimize_proxies(f, prox, steps=25, lr=1e-3)
    assert np.max(np.abs(out.positions - s.centers)) < 1e-4


def test_optimize_mean_probability_non_decreasing():
    s = random_splat(10, seed=6)
    f = GroundTruthField(s, TruncationConfig(0.05))
    rng = np.random.default_rng(7)
    pos = (s.centers[rng.integers(0, s.count, 200)]
           + rng.normal(0, 0.02, (200, 3))).astype(np.float32)
    prox = ProxyPoints(positions=pos, probabilities=f.prob(pos))
    cur = prox
    last = float(np.mean(cur.probabilities))
    for _ in range(5):
        cur = optimize_proxies(f, cur, steps=5, lr=1e-3)
        now = float(np.mean(cur.probabilities))
        assert now >= last - 1e-15
        last = now
    assert last > float(np.mean(prox.probabilities))


def test_optimize_moves_points_toward_center():
    s = single_gaussian_splat()
    f = GroundTruthField(s, TruncationConfig(0.05))
    rng = np.random.default_rng(8)
    pos = (s.centers[0] + rng.normal(0, 0.02, (100, 3))).astype(np.float32)
    prox = ProxyPoints(positions=pos, probabilities=f.prob(pos))
    out = optimize_proxies(f, prox, steps=120, lr=1e-3)
    before = np.linalg.norm(pos - s.centers[0], axis=1).mean()
    after = np.linalg.norm(out.positions - s.centers[0], axis=1).mean()
    assert after < 0.5 * before


def test_optimize_freezes_nonfinite_gradients():
    class NanGradField(ConstantField):
        def prob_grad(self, q):
            g = np.zeros((len(np.atleast_2d(q)), 3))
            g[0] = np.nan
            return g

    f = NanGradField(0.5)
    prox = ProxyPoints(positions=np.zeros((3, 3), dtype=np.float32),
                       probabilities=np.full(3, 0.5))
    stats = ExtractionStats()
    out = optimize_proxies(f, prox, steps=2, lr=1e-3, stats=stats)
    assert stats.nonfinite_grads >= 1
    assert np.all(np.isfinite(out.positions))


def test_extract_attributes_counts_and_invariants():
    s = random_splat(6, seed=9)
    f = GroundTruthField(s, TruncationConfig(0.05))
    centers = np.random.default_rng(10).uniform(-0.5, 0.5, (40, 3))
    out = extract_attributes(f, centers)
    assert out.count == 40
    np.testing.assert_array_equal(out.centers, centers.astype(np.float32))
    out.validate(scale_clip=0.011)


def test_extract_splat_exact_count_and_determinism():
    s = random_splat(8, seed=11)
    f = GroundTruthField(s, TruncationConfig(0.05))
    cfg = OctreeConfig(max_depth=5, threshold=0.3, target_count=500)
    a = extract_splat(f, cfg, seed=3, refine_steps=10)
    b = extract_splat(f, cfg, seed=3, refine_steps=10)
    assert a.count == 500
    np.testing.assert_array_equal(a.centers, b.centers)
    np.testing.assert_array_equal(a.colors, b.colors)


def test_extract_splat_stats_populated():
    s = random_splat(4, seed=12)
    f = GroundTruthField(s, TruncationConfig(0.05))
    stats = ExtractionStats()
    extract_splat(f, OctreeConfig(max_depth=4, threshold=0.3, target_count=50),
                  seed=0, refine_steps=5, stats=stats)
    d = stats.to_dict()
    assert len(d["retained_per_depth"]) == 5
    assert set(d["timings_s"]) == {"octree", "allocate", "refine", "attributes"}
    assert d["mean_prob_after"] >= d["mean_prob_before"] - 1e-12


def test_octree_config_validation():
    with pytest.raises(ValueError):
        OctreeConfig(max_depth=0)
    with pytest.raises(ValueError):
        OctreeConfig(threshold=1.5)
    with pytest.raises(ValueError):
        OctreeConfig(target_count=0)
