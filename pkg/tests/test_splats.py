import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from splatfields import DataError, clip_scales, density_at, normalize
from splatfields.splats import Gaussian, GaussianSplat, quaternion_to_matrix
from splatfields.toyshapes import random_splat


def test_normalize_hand_computed_two_points():
    s = GaussianSplat(
        centers=np.array([[0, 0, 0], [2, 0, 0]], dtype=np.float32),
        rotations=np.tile([1, 0, 0, 0], (2, 1)),
        scales=np.full((2, 3), 0.02, dtype=np.float32),
        opacities=np.array([0.5, 0.5]),
        colors=np.full((2, 3), 0.5),
    )
    out = normalize(s)
    assert out.frame.uniform_scale == pytest.approx(0.9)
    np.testing.assert_allclose(out.centers, [[-0.9, 0, 0], [0.9, 0, 0]], atol=1e-7)
    # scale extents follow the same uniform factor
    np.testing.assert_allclose(out.scales, 0.02 * 0.9, rtol=1e-6)


def test_normalize_degenerate_box_maps_to_origin():
    s = GaussianSplat(
        centers=np.array([[5, 5, 5]], dtype=np.float32),
        rotations=np.array([[1, 0, 0, 0]]),
        scales=np.full((1, 3), 0.01),
        opacities=np.array([0.5]),
        colors=np.full((1, 3), 0.5),
    )
    out = normalize(s)
    assert out.frame.uniform_scale == 1.0
    np.testing.assert_allclose(out.centers, [[0, 0, 0]], atol=1e-6)


def test_normalize_near_identity_when_already_fitted():
    s = random_splat(50, seed=1, box=0.9)
    s.centers[0] = [-0.9, -0.9, -0.9]
    s.centers[1] = [0.9, 0.9, 0.9]
    out = normalize(s)
    assert out.frame.uniform_scale == pytest.approx(1.0, rel=1e-6)


def test_normalize_round_trip_recovers_centers():
    s = random_splat(64, seed=2)
    s = GaussianSplat(centers=s.centers * 7 + 3, rotations=s.rotations,
                      scales=s.scales, opacities=s.opacities, colors=s.colors)
    out = normalize(s)
    rec = out.frame.invert(out.centers)
    np.testing.assert_allclose(rec, s.centers.astype(np.float64), atol=1e-5)


def test_normalize_idempotent_up_to_tolerance():
    s = random_splat(64, seed=3)
    once = normalize(s)
    twice = normalize(once)
    np.testing.assert_allclose(twice.centers, once.centers, atol=1e-6)


def test_clip_scales_paper_value():
    s = random_splat(1, seed=0)
    s.scales[0] = [0.5, 0.001, 0.02]
    out = clip_scales(s, 0.01)
    np.testing.assert_allclose(out.scales[0], [0.01, 0.001, 0.01])


def test_clip_scales_noop_below_bound():
    s = random_splat(10, seed=4)  # generator draws scales below 0.01
    out = clip_scales(s, 0.01)
    np.testing.assert_array_equal(out.scales, s.scales)


def test_clip_scales_larger_bound():
    s = random_splat(1, seed=0)
    s.scales[0] = [0.015, 0.015, 0.015]
    out = clip_scales(s, 0.02)
    np.testing.assert_allclose(out.scales[0], 0.015)


def test_clip_scales_rejects_nonpositive_bound():
    with pytest.raises(ValueError):
        clip_scales(random_splat(1, seed=0), 0.0)


@given(st.floats(1e-4, 0.05), st.floats(1e-4, 0.05))
@settings(max_examples=30, deadline=None)
def test_clip_scales_monotone_and_idempotent(bound_a, bound_b):
    s = random_splat(8, seed=9)
    s.scales[:] = np.linspace(1e-4, 0.05, 24).reshape(8, 3)
    once = clip_scales(s, bound_a)
    assert np.all(once.scales <= np.float32(bound_a) + 1e-9)
    np.testing.assert_array_equal(clip_scales(once, bound_a).scales, once.scales)
    lo, hi = sorted([bound_a, bound_b])
    assert np.all(clip_scales(s, lo).scales <= clip_scales(s, hi).scales + 1e-9)


def test_density_at_center_is_one():
    g = random_splat(1, seed=5).gaussian(0)
    assert density_at(g, g.center) == pytest.approx(1.0)


def test_density_isotropic_at_one_sigma():
    g = Gaussian(center=np.zeros(3), rotation=np.array([1.0, 0, 0, 0]),
                 scale=np.full(3, 0.01), opacity=0.5, color=np.full(3, 0.5))
    x = np.array([0.01, 0.0, 0.0])
    assert density_at(g, x) == pytest.approx(np.exp(-0.5), rel=1e-9)


def test_density_matches_dense_matrix_oracle():
    rng = np.random.default_rng(11)
    for _ in range(20):
        q = rng.normal(size=4)
        q /= np.linalg.norm(q)
        scale = rng.uniform(1e-3, 0.01, size=3)
        center = rng.uniform(-0.5, 0.5, size=3)
        g = Gaussian(center=center, rotation=q, scale=scale, opacity=0.5,
                     color=np.full(3, 0.5))
        x = center + rng.normal(0, 0.01, size=3)
        # independent dense-construction route
        rot = quaternion_to_matrix(q)
        sigma = rot @ np.diag(scale ** 2) @ rot.T
        m = (x - center) @ np.linalg.inv(sigma) @ (x - center)
        assert density_at(g, x) == pytest.approx(np.exp(-0.5 * m), rel=1e-9)


def test_density_rotation_consistency():
    rng = np.random.default_rng(13)
    g = Gaussian(center=np.zeros(3), rotation=rng.normal(size=4), scale=rng.uniform(2e-3, 8e-3, 3),
                 opacity=0.5, color=np.full(3, 0.5))
    g = Gaussian(center=g.center, rotation=g.rotation / np.linalg.norm(g.rotation),
                 scale=g.scale, opacity=g.opacity, color=g.color)
    x = rng.normal(0, 0.005, size=3)
    # conjugate by a fixed rotation and rotate the offset identically
    w, i, j, k = 0.5, 0.5, 0.5, 0.5
    q2 = np.array([w, i, j, k])
    r2 = quaternion_to_matrix(q2)
    qw, qx, qy, qz = g.rotation
    # quaternion product q2 * g.rotation
    comp = np.array([
        w * qw - i * qx - j * qy - k * qz,
        w * qx + i * qw + j * qz - k * qy,
        w * qy - i * qz + j * qw + k * qx,
        w * qz + i * qy - j * qx + k * qw,
    ])
    g_rot = Gaussian(center=g.center, rotation=comp, scale=g.scale,
                     opacity=g.opacity, color=g.color)
    assert density_at(g_rot, r2 @ x) == pytest.approx(density_at(g, x), rel=1e-9)


def test_density_singular_scale_names_axis():
    g = Gaussian(center=np.zeros(3), rotation=np.array([1.0, 0, 0, 0]),
                 scale=np.array([0.01, 1e-13, 0.01]), opacity=0.5,
                 color=np.full(3, 0.5))
    with pytest.raises(DataError, match="axis y"):
        density_at(g, np.zeros(3))


def test_validate_catches_bad_fields():
    s = random_splat(4, seed=6)
    s.validate(scale_clip=0.01)
    bad = random_splat(4, seed=6)
    bad.opacities[2] = 1.5
    with pytest.raises(DataError):
        bad.validate()
    nan = random_splat(4, seed=6)
    nan.centers[1, 0] = np.nan
    with pytest.raises(DataError, match="gaussian 1"):
        nan.validate()


def test_attribute_round_trip():
    s = random_splat(16, seed=7)
    again = GaussianSplat.from_attributes(s.attributes())
    np.testing.assert_array_equal(again.centers, s.centers)
    np.testing.assert_array_equal(again.opacities, s.opacities)
