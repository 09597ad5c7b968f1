"""Ground-truth splat fields: probability from nearest-center distance,
attributes from nearest-Gaussian lookup, and training-query sampling.

Nearest-neighbor queries are exact (kd-tree with a linear-scan fix-up on
distance ties, broken toward the lowest Gaussian index).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import DataError, FormatError
from .splats import GaussianSplat

LINEAR = "linear"
EXPONENT = "exponent"


@dataclass(frozen=True)
class TruncationConfig:
    """How nearest-center distances map to probabilities in [0, 1].

    linear:   p = 1 - min(d, d_trunc) / d_trunc
    exponent: p = exp(-d / d_trunc)

    Both are 1/d_trunc-Lipschitz in the distance and equal 1 at distance 0.
    """

    d_trunc: float = 0.05
    mapping: str = LINEAR

    def __post_init__(self):
        if self.d_trunc <= 0:
            raise ValueError(f"d_trunc must be positive, got {self.d_trunc}")
        if self.mapping not in (LINEAR, EXPONENT):
            raise ValueError(f"unknown mapping '{self.mapping}'")

    def probability(self, dist: np.ndarray) -> np.ndarray:
        d = np.asarray(dist, dtype=np.float64)
        if self.mapping == LINEAR:
            return 1.0 - np.minimum(d, self.d_trunc) / self.d_trunc
        return np.exp(-d / self.d_trunc)

    def retention_radius(self, threshold: float) -> float:
        """Distance at which the mapping drops to `threshold`."""
        if self.mapping == LINEAR:
            return (1.0 - threshold) * self.d_trunc
        return -np.log(threshold) * self.d_trunc


class SpatialIndex:
    """Exact nearest-center index over a splat's Gaussian centers."""

    def __init__(self, centers: np.ndarray):
        if len(centers) == 0:
            raise DataError("cannot build a spatial index over an empty splat")
        self.centers = np.ascontiguousarray(centers, dtype=np.float64)
        self._tree = cKDTree(self.centers, leafsize=16)

    @property
    def count(self) -> int:
        return len(self.centers)

    def nearest_distance(self, q: np.ndarray) -> np.ndarray:
        q = np.atleast_2d(np.asarray(q, dtype=np.float64))
        d, _ = self._tree.query(q, k=1, workers=-1)
        return d

    def nearest(self, q: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Distances and indices of the nearest center; ties -> lowest index."""
        q = np.atleast_2d(np.asarray(q, dtype=np.float64))
        if self.count == 1:
            d = np.linalg.norm(q - self.centers[0], axis=1)
            return d, np.zeros(len(q), dtype=np.int64)
        d, idx = self._tree.query(q, k=2, workers=-1)
        best = idx[:, 0].astype(np.int64)
        tied = d[:, 0] == d[:, 1]
        if tied.any():
            # Rare path: resolve ties by exhaustive scan for determinism.
            for j in np.nonzero(tied)[0]:
                dists = np.linalg.norm(self.centers - q[j], axis=1)
                best[j] = int(np.nonzero(dists == dists.min())[0][0])
        return d[:, 0], best


def build_index(splat: GaussianSplat) -> SpatialIndex:
    return SpatialIndex(splat.centers)


def gaupf_gt(index: SpatialIndex, q: np.ndarray, cfg: TruncationConfig) -> np.ndarray:
    """Ground-truth Gaussian probability at query points (any leading shape)."""
    q = np.asarray(q, dtype=np.float64)
    single = q.ndim == 1
    p = cfg.probability(index.nearest_distance(np.atleast_2d(q)))
    return float(p[0]) if single else p


def attr_gt(index: SpatialIndex, splat: GaussianSplat, q: np.ndarray) -> dict:
    """Attributes of the nearest Gaussian to each query."""
    q2 = np.atleast_2d(np.asarray(q, dtype=np.float64))
    _, idx = index.nearest(q2)
    out = {
        "color": splat.colors[idx],
        "rotation": splat.rotations[idx],
        "scale": splat.scales[idx],
        "opacity": splat.opacities[idx],
    }
    if np.asarray(q).ndim == 1:
        out = {k: v[0] for k, v in out.items()}
    return out


@dataclass
class FieldSampleSet:
    """Query points with ground-truth probability and attribute labels."""

    queries: np.ndarray  # (M, 3) float32
    prob_labels: np.ndarray  # (M,) float32 in [0, 1]
    color_labels: np.ndarray  # (M, 3)
    rotation_labels: np.ndarray  # (M, 4)
    scale_labels: np.ndarray  # (M, 3)
    opacity_labels: np.ndarray  # (M,)

    def __post_init__(self):
        m = len(self.queries)
        self.queries = np.asarray(self.queries, dtype=np.float32).reshape(m, 3)
        self.prob_labels = np.asarray(self.prob_labels, dtype=np.float32).reshape(m)
        self.color_labels = np.asarray(self.color_labels, dtype=np.float32).reshape(m, 3)
        self.rotation_labels = np.asarray(self.rotation_labels, dtype=np.float32).reshape(m, 4)
        self.scale_labels = np.asarray(self.scale_labels, dtype=np.float32).reshape(m, 3)
        self.opacity_labels = np.asarray(self.opacity_labels, dtype=np.float32).reshape(m)

    @property
    def count(self) -> int:
        return len(self.queries)

    def subset(self, indices) -> "FieldSampleSet":
        return FieldSampleSet(self.queries[indices], self.prob_labels[indices],
                              self.color_labels[indices], self.rotation_labels[indices],
                              self.scale_labels[indices], self.opacity_labels[indices])


def label_queries(splat: GaussianSplat, queries: np.ndarray,
                  cfg: TruncationConfig, index: SpatialIndex | None = None) -> FieldSampleSet:
    """Attach ground-truth probability and attribute labels to query points."""
    index = index if index is not None else build_index(splat)
    queries = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
    attrs = attr_gt(index, splat, queries)
    return FieldSampleSet(
        queries=queries.astype(np.float32),
        prob_labels=gaupf_gt(index, queries, cfg).astype(np.float32),
        color_labels=attrs["color"],
        rotation_labels=attrs["rotation"],
        scale_labels=attrs["scale"],
        opacity_labels=attrs["opacity"],
    )


def sample_training_queries(splat: GaussianSplat, n_near: int, n_uniform: int,
                            near_sigma: float = 0.01, seed: int = 0,
                            cfg: TruncationConfig | None = None) -> FieldSampleSet:
    """Draw labeled training queries: center-perturbed plus uniform-in-domain.

    Near queries are Gaussian centers plus isotropic noise of stddev
    near_sigma; uniform queries cover [-1, 1]^3. Deterministic per seed.
    """
    if near_sigma <= 0:
        raise ValueError("near_sigma must be positive")
    cfg = cfg if cfg is not None else TruncationConfig()
    rng = np.random.Generator(np.random.PCG64(seed))
    parts = []
    if n_near > 0:
        picks = rng.integers(0, splat.count, size=n_near)
        noise = rng.normal(0.0, near_sigma, size=(n_near, 3))
        parts.append(splat.centers[picks].astype(np.float64) + noise)
    if n_uniform > 0:
        parts.append(rng.uniform(-1.0, 1.0, size=(n_uniform, 3)))
    if not parts:
        empty = np.zeros((0, 3), dtype=np.float32)
        return FieldSampleSet(empty, np.zeros(0), np.zeros((0, 3)),
                              np.zeros((0, 4)), np.zeros((0, 3)), np.zeros(0))
    return label_queries(splat, np.concatenate(parts, axis=0), cfg)


class GroundTruthField:
    """Field-protocol adapter over the exact splat fields.

    Exposes the same prob / prob_grad / attrs surface as a fitted neural
    field, so extraction and metrics can run directly against ground truth.
    """

    def __init__(self, splat: GaussianSplat, cfg: TruncationConfig | None = None):
        self.splat = splat
        self.truncation = cfg if cfg is not None else TruncationConfig()
        self.index = build_index(splat)

    def prob(self, q: np.ndarray) -> np.ndarray:
        return gaupf_gt(self.index, np.atleast_2d(q), self.truncation)

    def prob_grad(self, q: np.ndarray) -> np.ndarray:
        q = np.atleast_2d(np.asarray(q, dtype=np.float64))
        d, idx = self.index.nearest(q)
        diff = q - self.index.centers[idx]
        safe_d = np.maximum(d, 1e-12)[:, None]
        cfg = self.truncation
        if cfg.mapping == LINEAR:
            slope = np.where(d < cfg.d_trunc, -1.0 / cfg.d_trunc, 0.0)
        else:
            slope = -np.exp(-d / cfg.d_trunc) / cfg.d_trunc
        return slope[:, None] * diff / safe_d

    def attrs(self, q: np.ndarray) -> dict:
        return attr_gt(self.index, self.splat, np.atleast_2d(q))


_SAMPLES_MAGIC = b"SFSS"
_SAMPLES_VERSION = 1


def save_sample_set(samples: FieldSampleSet, path) -> None:
    """Cache a sample set as a flat binary blob (header + packed arrays)."""
    import os
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as f:
        f.write(_SAMPLES_MAGIC)
        f.write(struct.pack("<II", _SAMPLES_VERSION, samples.count))
        for a in (samples.queries, samples.prob_labels, samples.color_labels,
                  samples.rotation_labels, samples.scale_labels, samples.opacity_labels):
            f.write(np.ascontiguousarray(a, dtype=np.float32).tobytes())
    os.replace(tmp, path)


def load_sample_set(path) -> FieldSampleSet:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != _SAMPLES_MAGIC:
            raise FormatError("not a sample-set file (bad magic)")
        version, m = struct.unpack("<II", f.read(8))
        if version != _SAMPLES_VERSION:
            raise FormatError(f"unsupported sample-set version {version}")

        def arr(*shape):
            size = int(np.prod(shape)) if shape else 1
            buf = f.read(4 * size)
            if len(buf) != 4 * size:
                raise DataError("sample-set file truncated")
            return np.frombuffer(buf, dtype=np.float32).reshape(shape)

        return FieldSampleSet(arr(m, 3), arr(m), arr(m, 3), arr(m, 4), arr(m, 3), arr(m))
