"""Core splat types: Gaussian sets, normalization, scale clipping, densities.

A splat is stored struct-of-arrays (float32) in a normalized frame. The
covariance of each Gaussian is always derived from (rotation, scale) on
demand and never stored.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DataError

# Default upper bound on per-axis Gaussian extents, in normalized units.
DEFAULT_SCALE_CLIP = 0.01

# Attribute packing order used everywhere a Gaussian becomes a flat vector:
# center(3) | rotation(4) | scale(3) | opacity(1) | color(3).
ATTR_DIM = 14


@dataclass(frozen=True)
class NormalizationTransform:
    """Maps raw coordinates into the normalized frame: x' = (x + translation) * uniform_scale."""

    translation: np.ndarray  # (3,) float64
    uniform_scale: float

    @classmethod
    def identity(cls) -> "NormalizationTransform":
        return cls(translation=np.zeros(3), uniform_scale=1.0)

    def apply(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) + self.translation) * self.uniform_scale

    def invert(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) / self.uniform_scale - self.translation

    def compose(self, after: "NormalizationTransform") -> "NormalizationTransform":
        """Transform equivalent to applying `self` first, then `after`."""
        # ((x + t1) s1 + t2) s2 == (x + t1 + t2 / s1) s1 s2
        return NormalizationTransform(
            translation=self.translation + after.translation / self.uniform_scale,
            uniform_scale=self.uniform_scale * after.uniform_scale,
        )


@dataclass(frozen=True)
class Gaussian:
    """A single Gaussian primitive (view into a splat, or standalone)."""

    center: np.ndarray  # (3,)
    rotation: np.ndarray  # (4,) unit quaternion, (w, x, y, z)
    scale: np.ndarray  # (3,) strictly positive per-axis extents
    opacity: float
    color: np.ndarray  # (3,) RGB in [0, 1]


@dataclass
class GaussianSplat:
    """An ordered set of Gaussians, struct-of-arrays, float32.

    Attributes:
        centers: (N, 3) positions in the normalized frame
        rotations: (N, 4) unit quaternions (w, x, y, z)
        scales: (N, 3) per-axis extents, strictly positive
        opacities: (N,) in [0, 1]
        colors: (N, 3) RGB in [0, 1]
        frame: transform from the original (file) coordinates to this frame
    """

    centers: np.ndarray
    rotations: np.ndarray
    scales: np.ndarray
    opacities: np.ndarray
    colors: np.ndarray
    frame: NormalizationTransform = field(default_factory=NormalizationTransform.identity)

    def __post_init__(self):
        n = len(self.centers)
        self.centers = np.ascontiguousarray(self.centers, dtype=np.float32).reshape(n, 3)
        self.rotations = np.ascontiguousarray(self.rotations, dtype=np.float32).reshape(n, 4)
        self.scales = np.ascontiguousarray(self.scales, dtype=np.float32).reshape(n, 3)
        self.opacities = np.ascontiguousarray(self.opacities, dtype=np.float32).reshape(n)
        self.colors = np.ascontiguousarray(self.colors, dtype=np.float32).reshape(n, 3)

    @property
    def count(self) -> int:
        return len(self.centers)

    def __len__(self) -> int:
        return self.count

    def gaussian(self, i: int) -> Gaussian:
        return Gaussian(
            center=self.centers[i],
            rotation=self.rotations[i],
            scale=self.scales[i],
            opacity=float(self.opacities[i]),
            color=self.colors[i],
        )

    def subset(self, indices) -> "GaussianSplat":
        return GaussianSplat(
            centers=self.centers[indices],
            rotations=self.rotations[indices],
            scales=self.scales[indices],
            opacities=self.opacities[indices],
            colors=self.colors[indices],
            frame=self.frame,
        )

    def attributes(self) -> np.ndarray:
        """Flat (N, 14) attribute matrix: center | rotation | scale | opacity | color."""
        return np.concatenate(
            [self.centers, self.rotations, self.scales, self.opacities[:, None], self.colors],
            axis=1,
        )

    @classmethod
    def from_attributes(cls, attrs: np.ndarray,
                        frame: NormalizationTransform | None = None) -> "GaussianSplat":
        attrs = np.asarray(attrs, dtype=np.float32).reshape(-1, ATTR_DIM)
        return cls(
            centers=attrs[:, 0:3],
            rotations=attrs[:, 3:7],
            scales=attrs[:, 7:10],
            opacities=attrs[:, 10],
            colors=attrs[:, 11:14],
            frame=frame if frame is not None else NormalizationTransform.identity(),
        )

    def validate(self, scale_clip: float | None = None, quat_tol: float = 1e-6) -> None:
        """Raise DataError if any type invariant is violated."""
        for name, a in (("centers", self.centers), ("rotations", self.rotations),
                        ("scales", self.scales), ("opacities", self.opacities),
                        ("colors", self.colors)):
            if not np.all(np.isfinite(a)):
                raise DataError(f"non-finite value in {name} at gaussian "
                                f"{int(np.argwhere(~np.isfinite(a))[0][0])}")
        norms = np.linalg.norm(self.rotations.astype(np.float64), axis=1)
        if self.count and np.max(np.abs(norms - 1.0)) > quat_tol:
            raise DataError("rotation quaternion not unit length")
        if np.any(self.scales <= 0):
            raise DataError("scale component <= 0")
        if scale_clip is not None and np.any(self.scales > scale_clip * (1 + 1e-6)):
            raise DataError(f"scale component exceeds clip bound {scale_clip}")
        if np.any(self.opacities < 0) or np.any(self.opacities > 1):
            raise DataError("opacity outside [0, 1]")
        if np.any(self.colors < 0) or np.any(self.colors > 1):
            raise DataError("color component outside [0, 1]")


def normalize(splat: GaussianSplat, margin: float = 0.9) -> GaussianSplat:
    """Fit the splat's centers into [-margin, margin]^3 centered at the origin.

    Scale extents are multiplied by the same uniform factor so Gaussian shapes
    stay consistent with the new coordinates. The incremental transform is
    composed into the returned splat's frame.

    The 0.9 margin leaves room so the probability field's truncation band
    never exits the [-1, 1]^3 field domain.
    """
    if splat.count < 1:
        raise DataError("cannot normalize an empty splat")
    c = splat.centers.astype(np.float64)
    lo, hi = c.min(axis=0), c.max(axis=0)
    extent = float(np.max(hi - lo))
    if extent < 1e-12:
        step = NormalizationTransform(translation=-(lo + hi) / 2.0, uniform_scale=1.0)
    else:
        step = NormalizationTransform(
            translation=-(lo + hi) / 2.0,
            uniform_scale=2.0 * margin / extent,
        )
    return GaussianSplat(
        centers=step.apply(c).astype(np.float32),
        rotations=splat.rotations.copy(),
        scales=(splat.scales.astype(np.float64) * step.uniform_scale).astype(np.float32),
        opacities=splat.opacities.copy(),
        colors=splat.colors.copy(),
        frame=splat.frame.compose(step),
    )


def clip_scales(splat: GaussianSplat, max_scale: float = DEFAULT_SCALE_CLIP) -> GaussianSplat:
    """Clamp every scale component to at most max_scale; other fields unchanged."""
    if max_scale <= 0:
        raise ValueError(f"max_scale must be positive, got {max_scale}")
    return replace(splat, scales=np.minimum(splat.scales, np.float32(max_scale)),
                   centers=splat.centers.copy(), rotations=splat.rotations.copy(),
                   opacities=splat.opacities.copy(), colors=splat.colors.copy())


def quaternion_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrices from (..., 4) quaternions in (w, x, y, z) order."""
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    m = np.empty(q.shape[:-1] + (3, 3))
    m[..., 0, 0] = 1 - 2 * (y * y + z * z)
    m[..., 0, 1] = 2 * (x * y - w * z)
    m[..., 0, 2] = 2 * (x * z + w * y)
    m[..., 1, 0] = 2 * (x * y + w * z)
    m[..., 1, 1] = 1 - 2 * (x * x + z * z)
    m[..., 1, 2] = 2 * (y * z - w * x)
    m[..., 2, 0] = 2 * (x * z - w * y)
    m[..., 2, 1] = 2 * (y * z + w * x)
    m[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return m


def density_at(g: Gaussian, x) -> float:
    """Unnormalized Gaussian density exp(-1/2 (x-c)^T Sigma^-1 (x-c)).

    Sigma = R diag(s)^2 R^T is derived from the stored rotation and scale;
    the inverse is applied by whitening rather than forming the matrix.
    """
    scale = np.asarray(g.scale, dtype=np.float64)
    small = np.nonzero(scale < 1e-12)[0]
    if small.size:
        raise DataError(f"singular covariance: scale too small on axis {'xyz'[small[0]]}")
    rot = quaternion_to_matrix(g.rotation)
    y = rot.T @ (np.asarray(x, dtype=np.float64) - np.asarray(g.center, dtype=np.float64))
    m = float(np.sum((y / scale) ** 2))
    return float(np.exp(-0.5 * m))
