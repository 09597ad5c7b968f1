"""Discretizing a probability field back into splats.

Pipeline: octree pruning of low-probability space, proportional proxy-point
allocation inside retained leaves, per-point backtracking gradient ascent on
the probability field, then attribute lookup at the refined centers.

Cell retention evaluates the field on a per-cell lattice. At interior
depths the lattice is extended by the mapping's retention radius and its
spacing capped at that radius, which makes the pruning conservative: for an
exactly 1/d_trunc-Lipschitz ground-truth field, no leaf that would pass the
final-depth lattice test can lose an ancestor. At the final depth the
lattice stays inside the cell, so every returned leaf's score genuinely
clears the threshold.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyFieldError
from .fields_gt import TruncationConfig
from .splats import GaussianSplat

_EVAL_CHUNK = 1 << 21


@dataclass(frozen=True)
class OctreeConfig:
    """Octree sampling knobs: depth L, retention threshold, lattice base, N."""

    max_depth: int = 8
    threshold: float = 0.3
    samples_per_axis: int = 3
    target_count: int = 100_000

    def __post_init__(self):
        if not 1 <= self.max_depth <= 12:
            raise ValueError(f"max_depth must be in [1, 12], got {self.max_depth}")
        if not 0.0 < self.threshold < 1.0:
            raise ValueError(f"threshold must be in (0, 1), got {self.threshold}")
        if self.samples_per_axis < 2:
            raise ValueError("samples_per_axis must be at least 2")
        if self.target_count < 1:
            raise ValueError("target_count must be at least 1")


@dataclass
class CellSet:
    """Retained octree leaves: centers, common half-extent, and scores."""

    centers: np.ndarray  # (K, 3) float64
    half_extent: float
    scores: np.ndarray  # (K,) max lattice probability, all >= threshold
    depth: int
    retained_per_depth: list = field(default_factory=list)

    @property
    def count(self) -> int:
        return len(self.centers)


@dataclass
class ProxyPoints:
    """Learnable candidate Gaussian centers and their field probabilities."""

    positions: np.ndarray  # (N, 3) float32, clamped to [-1, 1]^3
    probabilities: np.ndarray  # (N,)

    @property
    def count(self) -> int:
        return len(self.positions)


@dataclass
class ExtractionStats:
    retained_per_depth: list = field(default_factory=list)
    timings_s: dict = field(default_factory=dict)
    frozen_points: int = 0
    nonfinite_grads: int = 0
    mean_prob_before: float = 0.0
    mean_prob_after: float = 0.0

    def to_dict(self) -> dict:
        return {
            "retained_per_depth": list(self.retained_per_depth),
            "timings_s": {k: round(v, 6) for k, v in self.timings_s.items()},
            "frozen_points": self.frozen_points,
            "nonfinite_grads": self.nonfinite_grads,
            "mean_prob_before": self.mean_prob_before,
            "mean_prob_after": self.mean_prob_after,
        }


def _field_truncation(fld) -> TruncationConfig:
    return getattr(fld, "truncation", None) or TruncationConfig()


def _lattice_offsets(half_span: float, base: int, spacing_cap: float) -> np.ndarray:
    """Axis-aligned (n^3, 3) offsets covering [-half_span, half_span]^3."""
    n = max(base, int(np.ceil(2.0 * half_span / spacing_cap)) + 1)
    if n % 2 == 0:
        n += 1  # keep corners, face centers, and the cell center on the lattice
    axis = np.linspace(-half_span, half_span, n)
    gx, gy, gz = np.meshgrid(axis, axis, axis, indexing="ij")
    return np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)


def _score_cells(fld, centers: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    """Max field value over each cell's lattice (points clipped to the domain)."""
    k, p = len(centers), len(offsets)
    scores = np.empty(k)
    cells_per_chunk = max(1, _EVAL_CHUNK // p)
    for start in range(0, k, cells_per_chunk):
        stop = min(start + cells_per_chunk, k)
        pts = centers[start:stop, None, :] + offsets[None, :, :]
        np.clip(pts, -1.0, 1.0, out=pts)
        vals = np.asarray(fld.prob(pts.reshape(-1, 3)), dtype=np.float64)
        scores[start:stop] = vals.reshape(stop - start, p).max(axis=1)
    return scores


def score_leaf_cells(fld, centers: np.ndarray, half_extent: float,
                     cfg: OctreeConfig) -> np.ndarray:
    """Final-depth retention scores: max over the in-cell lattice."""
    radius = _field_truncation(fld).retention_radius(cfg.threshold)
    offsets = _lattice_offsets(half_extent, cfg.samples_per_axis, radius)
    return _score_cells(fld, centers, offsets)


_CHILD_OFFSETS = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1)
                           for sz in (-1, 1)], dtype=np.float64)


def octree_sample(fld, cfg: OctreeConfig,
                  stats: ExtractionStats | None = None) -> CellSet:
    """Progressively subdivide [-1, 1]^3, keeping cells that can reach the
    threshold, and return scored leaves at cfg.max_depth."""
    radius = _field_truncation(fld).retention_radius(cfg.threshold)
    centers = np.zeros((1, 3))
    half = 1.0
    retained_history = []
    for depth in range(cfg.max_depth + 1):
        is_leaf = depth == cfg.max_depth
        span = half if is_leaf else half + radius
        offsets = _lattice_offsets(span, cfg.samples_per_axis, radius)
        scores = _score_cells(fld, centers, offsets)
        keep = scores >= cfg.threshold
        centers = centers[keep]
        retained_history.append(int(keep.sum()))
        if len(centers) == 0:
            raise EmptyFieldError(
                f"empty field: no cell above threshold {cfg.threshold} at depth {depth}")
        if is_leaf:
            if stats is not None:
                stats.retained_per_depth = retained_history
            return CellSet(centers=centers, half_extent=half, scores=scores[keep],
                           depth=depth, retained_per_depth=retained_history)
        child_half = half / 2.0
        centers = (centers[:, None, :] + _CHILD_OFFSETS[None] * child_half).reshape(-1, 3)
        half = child_half
    raise AssertionError("unreachable")


def allocate_proxies(cells: CellSet, n: int, seed: int = 0,
                     fld=None) -> ProxyPoints:
    """Place exactly n points in the retained leaves.

    Per-cell counts are proportional to score * volume with
    largest-remainder rounding (remainder ties go to the lower cell index);
    points are uniform within their cell. When a field is given, the initial
    probabilities are evaluated on it, otherwise the cell score stands in.
    """
    if cells.count == 0:
        raise EmptyFieldError("cannot allocate proxies without retained cells")
    if n < 1:
        raise ValueError("proxy count must be at least 1")
    volume = (2.0 * cells.half_extent) ** 3
    weights = np.asarray(cells.scores, dtype=np.float64) * volume
    share = n * weights / weights.sum()
    counts = np.floor(share).astype(np.int64)
    remainder = n - int(counts.sum())
    if remainder > 0:
        order = np.argsort(-(share - counts), kind="stable")
        counts[order[:remainder]] += 1
    rng = np.random.Generator(np.random.PCG64(seed))
    owners = np.repeat(np.arange(cells.count), counts)
    jitter = rng.uniform(-cells.half_extent, cells.half_extent, size=(n, 3))
    positions = (cells.centers[owners] + jitter).astype(np.float32)
    np.clip(positions, -1.0, 1.0, out=positions)
    if fld is not None:
        probs = np.asarray(fld.prob(positions), dtype=np.float64)
    else:
        probs = np.asarray(cells.scores, dtype=np.float64)[owners]
    return ProxyPoints(positions=positions, probabilities=probs)


def optimize_proxies(fld, proxies: ProxyPoints, steps: int = 300, lr: float = 1e-3,
                     stats: ExtractionStats | None = None,
                     max_halvings: int = 5) -> ProxyPoints:
    """Per-point backtracking gradient ascent on the probability field.

    A point's move is kept only if its probability does not decrease; the
    step is halved up to max_halvings times, after which the point stays
    put for the iteration. Mean probability is therefore non-decreasing.
    Positions are clamped to [-1, 1]^3 throughout.
    """
    pos = proxies.positions.astype(np.float32).copy()
    prob = np.asarray(fld.prob(pos), dtype=np.float64)
    frozen = 0
    nonfinite = 0
    # The field is static, so a point that exhausts its halvings (or stops
    # moving) would repeat the identical rejection every later iteration;
    # settling it permanently skips that work without changing the result.
    alive = np.arange(len(pos))
    for _ in range(steps):
        if len(alive) == 0:
            break
        grad = np.asarray(fld.prob_grad(pos[alive]), dtype=np.float64)
        bad = ~np.isfinite(grad).all(axis=1)
        if bad.any():
            nonfinite += int(bad.sum())
            grad[bad] = 0.0
        active = np.arange(len(alive))
        scale = np.full(len(alive), lr)
        moved = np.zeros(len(alive), dtype=bool)
        for attempt in range(max_halvings + 1):
            rows = alive[active]
            cand = pos[rows] + (scale[active, None] * grad[active]).astype(np.float32)
            np.clip(cand, -1.0, 1.0, out=cand)
            cand_prob = np.asarray(fld.prob(cand), dtype=np.float64)
            ok = cand_prob >= prob[rows]
            taken = rows[ok]
            moved[active[ok]] = np.any(cand[ok] != pos[taken], axis=1)
            pos[taken] = cand[ok]
            prob[taken] = cand_prob[ok]
            active = active[~ok]
            if len(active) == 0:
                break
            if attempt == max_halvings:
                frozen += len(active)
                moved[active] = False
            else:
                scale[active] *= 0.5
        alive = alive[moved]
    if stats is not None:
        stats.frozen_points += frozen
        stats.nonfinite_grads += nonfinite
    return ProxyPoints(positions=pos, probabilities=prob)


def extract_attributes(fld, centers: np.ndarray) -> GaussianSplat:
    """Splat with the given centers and field-decoded attributes."""
    centers = np.asarray(centers, dtype=np.float32).reshape(-1, 3)
    attrs = fld.attrs(centers)
    return GaussianSplat(
        centers=centers,
        rotations=attrs["rotation"],
        scales=attrs["scale"],
        opacities=attrs["opacity"],
        colors=attrs["color"],
    )


def extract_splat(fld, cfg: OctreeConfig, seed: int = 0,
                  refine_steps: int = 300, refine_lr: float = 1e-3,
                  stats: ExtractionStats | None = None) -> GaussianSplat:
    """Full discretization: octree -> proxies -> refinement -> attributes.

    Returns exactly cfg.target_count Gaussians; deterministic per seed.
    """
    stats = stats if stats is not None else ExtractionStats()
    t0 = time.perf_counter()
    cells = octree_sample(fld, cfg, stats)
    t1 = time.perf_counter()
    proxies = allocate_proxies(cells, cfg.target_count, seed, fld)
    stats.mean_prob_before = float(np.mean(proxies.probabilities))
    t2 = time.perf_counter()
    if refine_steps > 0:
        proxies = optimize_proxies(fld, proxies, refine_steps, refine_lr, stats)
    stats.mean_prob_after = float(np.mean(proxies.probabilities))
    t3 = time.perf_counter()
    splat = extract_attributes(fld, proxies.positions)
    stats.timings_s.update({
        "octree": t1 - t0,
        "allocate": t2 - t1,
        "refine": t3 - t2,
        "attributes": time.perf_counter() - t3,
    })
    return splat
