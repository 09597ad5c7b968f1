"""Synthetic splats for demos and desk-scale experiments.

Generated opacities, scales, and colors are produced by activating float32
raw values (the same path the PLY reader takes), so generated splats
round-trip through PLY files bit-exactly.
"""

from __future__ import annotations

import numpy as np

from .ply import fields_from_raw
from .splats import GaussianSplat


def _random_quats(rng: np.random.Generator, n: int) -> np.ndarray:
    q = rng.normal(size=(n, 4))
    return (q / np.linalg.norm(q, axis=1, keepdims=True)).astype(np.float32)


def _assemble(centers: np.ndarray, rng: np.random.Generator,
              colors01: np.ndarray | None = None,
              identity_rot: bool = False) -> GaussianSplat:
    n = len(centers)
    raw = {
        "centers": np.asarray(centers, dtype=np.float32),
        "f_dc": rng.uniform(-1.2, 1.2, size=(n, 3)).astype(np.float32),
        "opacity": rng.uniform(-1.5, 3.0, size=n).astype(np.float32),
        "log_scale": rng.uniform(np.log(1e-3), np.log(8e-3), size=(n, 3)).astype(np.float32),
        "rot": (np.tile(np.array([1, 0, 0, 0], np.float32), (n, 1))
                if identity_rot else _random_quats(rng, n)),
    }
    if colors01 is not None:
        # Quantize requested colors through the SH raw grid.
        raw["f_dc"] = ((np.clip(colors01, 0.02, 0.98) - 0.5)
                       / 0.28209479177387814).astype(np.float32)
    return GaussianSplat(**fields_from_raw(raw))


def random_splat(n: int, seed: int = 0, box: float = 0.85) -> GaussianSplat:
    """n Gaussians with uniform centers and random attributes."""
    rng = np.random.Generator(np.random.PCG64(seed))
    centers = rng.uniform(-box, box, size=(n, 3)).astype(np.float32)
    return _assemble(centers, rng)


def single_gaussian_splat(center=(0.1, -0.2, 0.05), seed: int = 0) -> GaussianSplat:
    rng = np.random.Generator(np.random.PCG64(seed))
    return _assemble(np.array([center], dtype=np.float32), rng, identity_rot=True)


def _coord_colors(centers: np.ndarray) -> np.ndarray:
    """Smooth position-driven colors so the color field is learnable."""
    return 0.5 + 0.45 * np.stack([
        np.sin(2.1 * centers[:, 0] + 0.3),
        np.cos(1.7 * centers[:, 1]),
        np.sin(1.3 * centers[:, 2] + 1.1),
    ], axis=1)


def _sphere(n, rng):
    i = np.arange(n, dtype=np.float64)
    phi = np.arccos(1 - 2 * (i + 0.5) / n)
    theta = np.pi * (1 + 5 ** 0.5) * i
    r = 0.62
    return r * np.stack([np.sin(phi) * np.cos(theta),
                         np.sin(phi) * np.sin(theta),
                         np.cos(phi)], axis=1)


def _ring(n, rng):
    t = np.linspace(0, 2 * np.pi, n, endpoint=False)
    return np.stack([0.65 * np.cos(t), 0.65 * np.sin(t), 0.12 * np.sin(3 * t)], axis=1)


def _rod(n, rng):
    t = np.linspace(-0.75, 0.75, n)
    return np.stack([t, 0.12 * np.sin(4 * t), np.zeros_like(t)], axis=1)


def _cube_edges(n, rng):
    corners = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)],
                       dtype=np.float64) * 0.55
    edges = [(a, b) for a in range(8) for b in range(a + 1, 8)
             if np.sum(np.abs(corners[a] - corners[b]) > 1e-9) == 1]
    pts = []
    per = max(1, n // len(edges))
    for a, b in edges:
        t = np.linspace(0, 1, per, endpoint=False)[:, None]
        pts.append(corners[a] + t * (corners[b] - corners[a]))
    return np.concatenate(pts)[:n]

def _two_blobs(n, rng):
    half = n // 2
    a = rng.normal(0, 0.1, size=(half, 3)) + np.array([-0.5, 0.0, 0.0])
    b = rng.normal(0, 0.1, size=(n - half, 3)) + np.array([0.5, 0.2, 0.0])
    return np.clip(np.concatenate([a, b]), -0.85, 0.85)


def _helix(n, rng):
    t = np.linspace(0, 4 * np.pi, n)
    return np.stack([0.5 * np.cos(t), 0.5 * np.sin(t),
                     np.linspace(-0.7, 0.7, n)], axis=1)


def _plane_patch(n, rng):
    side = int(np.ceil(np.sqrt(n)))
    g = np.linspace(-0.6, 0.6, side)
    xx, yy = np.meshgrid(g, g)
    pts = np.stack([xx.ravel(), yy.ravel(), 0.15 * np.sin(3 * xx.ravel())], axis=1)
    return pts[:n]


def _cross(n, rng):
    half = n // 2
    t1 = np.linspace(-0.7, 0.7, half)
    t2 = np.linspace(-0.7, 0.7, n - half)
    a = np.stack([t1, np.zeros_like(t1), np.zeros_like(t1)], axis=1)
    b = np.stack([np.zeros_like(t2), t2, np.zeros_like(t2)], axis=1)
    return np.concatenate([a, b])


_SHAPE_MAKERS = (_sphere, _ring, _rod, _cube_edges, _two_blobs, _helix, _plane_patch, _cross)

TOY_SHAPE_NAMES = ("sphere", "ring", "rod", "cube", "blobs", "helix", "plane", "cross")


def toy_shape(index: int, n: int = 96, seed: int = 0) -> GaussianSplat:
    """One of the 8 deterministic toy shapes, with smooth attribute fields."""
    maker = _SHAPE_MAKERS[index % len(_SHAPE_MAKERS)]
    rng = np.random.Generator(np.random.PCG64(1000 * (index + 1) + seed))
    centers = np.asarray(maker(n, rng), dtype=np.float64)
    centers = centers + rng.normal(0, 0.004, size=centers.shape)
    centers = np.clip(centers, -0.88, 0.88).astype(np.float32)
    return _assemble(centers, rng, colors01=_coord_colors(centers), identity_rot=True)


def toy_shape_set(n: int = 96, seed: int = 0) -> list[GaussianSplat]:
    """The 8-shape desk-scale dataset."""
    return [toy_shape(i, n, seed) for i in range(len(_SHAPE_MAKERS))]
