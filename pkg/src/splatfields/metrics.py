"""Geometry- and field-space evaluation for splats and fitted fields."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import DataError
from .fields_gt import SpatialIndex, TruncationConfig, gaupf_gt, attr_gt
from .neural_field import align_quaternion_targets
from .splats import GaussianSplat


@dataclass
class MetricReport:
    chamfer: float | None = None
    field_l1_prob: float | None = None
    attr_errors: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)
    timings_s: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "chamfer": self.chamfer,
            "field_l1_prob": self.field_l1_prob,
            "attr_errors": dict(self.attr_errors),
            "counts": dict(self.counts),
            "timings_s": dict(self.timings_s),
        }


def chamfer(a: np.ndarray, b: np.ndarray) -> float:
    """Symmetric mean nearest-neighbor L2 distance between two point sets,
    halved: (mean_a min-dist to b + mean_b min-dist to a) / 2."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 3)
    if len(a) == 0 or len(b) == 0:
        raise DataError("chamfer distance needs two non-empty point sets")
    d_ab, _ = cKDTree(b).query(a, k=1, workers=-1)
    d_ba, _ = cKDTree(a).query(b, k=1, workers=-1)
    return 0.5 * (float(np.mean(d_ab)) + float(np.mean(d_ba)))


def sample_eval_queries(splat: GaussianSplat, n_queries: int, seed: int,
                        near_sigma: float = 0.01, near_fraction: float = 0.8) -> np.ndarray:
    """The near/uniform query mix used for field evaluation."""
    rng = np.random.Generator(np.random.PCG64(seed))
    n_near = int(round(n_queries * near_fraction))
    n_uniform = n_queries - n_near
    parts = []
    if n_near:
        picks = rng.integers(0, splat.count, size=n_near)
        parts.append(splat.centers[picks].astype(np.float64)
                     + rng.normal(0.0, near_sigma, size=(n_near, 3)))
    if n_uniform:
        parts.append(rng.uniform(-1.0, 1.0, size=(n_uniform, 3)))
    return np.concatenate(parts, axis=0)


def field_l1(fld, gt_index: SpatialIndex, splat: GaussianSplat,
             cfg: TruncationConfig | None = None,
             n_queries: int = 4096, seed: int = 0) -> float:
    """Mean |field probability - ground truth| over a seeded query sample."""
    cfg = cfg if cfg is not None else getattr(fld, "truncation", None) or TruncationConfig()
    q = sample_eval_queries(splat, n_queries, seed)
    pred = np.asarray(fld.prob(q.astype(np.float32)), dtype=np.float64)
    gt = gaupf_gt(gt_index, q, cfg)
    return float(np.mean(np.abs(pred - gt)))


def attr_error(fld, splat: GaussianSplat,
               gt_index: SpatialIndex | None = None) -> dict:
    """Mean per-group L1 at the ground-truth centers (quaternions sign-aligned)."""
    if splat.count == 0:
        raise DataError("attr_error needs a non-empty splat")
    index = gt_index if gt_index is not None else SpatialIndex(splat.centers)
    q = splat.centers
    pred = fld.attrs(q)
    gt = attr_gt(index, splat, q)
    rot_gt = align_quaternion_targets(np.asarray(pred["rotation"]), gt["rotation"])
    return {
        "color": float(np.mean(np.abs(pred["color"] - gt["color"]))),
        "rotation": float(np.mean(np.abs(pred["rotation"] - rot_gt))),
        "scale": float(np.mean(np.abs(pred["scale"] - gt["scale"]))),
        "opacity": float(np.mean(np.abs(pred["opacity"] - gt["opacity"]))),
    }
