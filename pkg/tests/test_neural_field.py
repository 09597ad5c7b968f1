import numpy as np
import pytest

from splatfields import (DataError, FieldHeads, FitConfig, NeuralField, Triplane,
                         TruncationConfig, eval_attrs, eval_pf, fit_field,
                         grad_position, interpolate, load_field, save_field,
                         sample_training_queries)
from splatfields.autodiff import Tensor
from splatfields.neural_field import FieldDiagnostics, triplane_features
from splatfields.toyshapes import single_gaussian_splat


def random_triplane(h=8, w=8, c=4, seed=0, std=0.5):
    return Triplane.create(h, w, c, np.random.default_rng(seed), std)


def randomized_heads(feature_dim, seed=1, hidden=16, depth=2):
    heads = FieldHeads.create(feature_dim, hidden=hidden, depth=depth,
                              rng=np.random.default_rng(seed))
    rng = np.random.default_rng(seed + 1)
    for mlp in (heads.pf, heads.cf, heads.tf):
        last = mlp.layers[-1]
        last.weight.data = rng.normal(0, 0.4, last.weight.data.shape).astype(np.float32)
        last.bias.data = rng.normal(0, 0.2, last.bias.data.shape).astype(np.float32)
    return heads


def test_interpolate_at_grid_nodes_returns_stored_features():
    t = random_triplane(h=5, w=5, c=3, seed=2)
    h, w = t.resolution
    grid = np.linspace(-1, 1, h)
    i, j = 1, 3
    # XY plane: query where x and y hit exact nodes; z chosen on a node too
    q = np.array([grid[i], grid[j], grid[2]])
    feats = interpolate(t, q)
    planes = t.planes.data
    np.testing.assert_allclose(feats[0:3], planes[0, i, j], atol=1e-6)
    np.testing.assert_allclose(feats[3:6], planes[1, i, 2], atol=1e-6)
    np.testing.assert_allclose(feats[6:9], planes[2, j, 2], atol=1e-6)


def test_interpolate_constant_planes():
    t = Triplane.create(6, 6, 2)
    t.planes.data[:] = 3.25
    q = np.random.default_rng(3).uniform(-1, 1, (10, 3))
    feats = interpolate(t, q)
    np.testing.assert_allclose(feats, 3.25, atol=1e-6)


def test_interpolate_feature_gradients_match_finite_differences():
    t = random_triplane(seed=4)
    rng = np.random.default_rng(5)
    qs = rng.uniform(-0.85, 0.85, (100, 3)).astype(np.float32)
    qt = Tensor(qs, requires_grad=True)
    from splatfields import autodiff as ad
    with ad.Tape() as tape:
        feats = triplane_features(t.planes, qt)
        loss = ad.reduce_sum(ad.square(feats))
        grads = tape.backward(loss)
    g = grads[qt]

    def scalar(qv):
        f = triplane_features(t.planes, qv.astype(np.float32)).data.astype(np.float64)
        return float((f ** 2).sum())

    for k in rng.choice(100, size=12, replace=False):
        for a in range(3):
            e = np.zeros((100, 3))
            e[k, a] = 1e-4
            fd = (scalar(qs + e) - scalar(qs - e)) / 2e-4
            assert g[k, a] == pytest.approx(fd, rel=1e-3, abs=2e-2)


def test_out_of_domain_queries_clamp_and_count():
    t = random_triplane(seed=6)
    diag = FieldDiagnostics()
    inside = interpolate(t, np.array([1.0, 0.3, -0.2]), diag)
    outside = interpolate(t, np.array([1.7, 0.3, -0.2]), diag)
    np.testing.assert_allclose(inside, outside, atol=1e-7)
    assert diag.clamped_queries == 1


def test_eval_pf_fresh_heads_is_half_everywhere():
    t = random_triplane(seed=7)
    heads = FieldHeads.create(t.feature_dim, hidden=16, depth=2,
                              rng=np.random.default_rng(8))
    q = np.random.default_rng(9).uniform(-1, 1, (50, 3))
    np.testing.assert_allclose(eval_pf(t, heads, q), 0.5, atol=1e-7)


def test_eval_pf_pure():
    t = random_triplane(seed=10)
    heads = randomized_heads(t.feature_dim, seed=11)
    q = np.random.default_rng(12).uniform(-1, 1, (20, 3))
    np.testing.assert_array_equal(eval_pf(t, heads, q), eval_pf(t, heads, q))


def test_eval_attrs_initial_identity_quaternion():
    t = Triplane.create(8, 8, 4)
    heads = FieldHeads.create(t.feature_dim, hidden=16, depth=2,
                              rng=np.random.default_rng(13))
    out = eval_attrs(t, heads, np.zeros(3))
    np.testing.assert_allclose(out["rotation"], [1, 0, 0, 0], atol=1e-7)
    assert out["opacity"] == pytest.approx(0.5)
    np.testing.assert_allclose(out["color"], 0.5, atol=1e-7)


def test_eval_attrs_invariants_hold_for_random_weights():
    rng = np.random.default_rng(14)
    total = 0
    for trial in range(10):
        t = random_triplane(seed=100 + trial, std=1.0)
        heads = randomized_heads(t.feature_dim, seed=200 + trial)
        q = rng.uniform(-1, 1, (1000, 3))
        out = eval_attrs(t, heads, q)
        norms = np.linalg.norm(out["rotation"].astype(np.float64), axis=1)
        np.testing.assert_allclose(norms, 1.0, atol=1e-5)
        assert np.all(out["scale"] > 0) and np.all(out["scale"] <= heads.scale_clip)
        assert np.all(out["opacity"] >= 0) and np.all(out["opacity"] <= 1)
        assert np.all(out["color"] >= 0) and np.all(out["color"] <= 1)
        total += len(q)
    assert total == 10_000


def test_grad_position_zero_on_constant_planes():
    t = Triplane.create(8, 8, 4)
    t.planes.data[:] = 0.7
    heads = randomized_heads(t.feature_dim, seed=15)
    g = grad_position(t, heads, np.random.default_rng(16).uniform(-0.9, 0.9, (20, 3)))
    np.testing.assert_allclose(g, 0.0, atol=1e-6)


def test_grad_position_matches_finite_differences_interior():
    rng = np.random.default_rng(17)
    failures = 0
    for trial in range(10):
        t = random_triplane(seed=300 + trial, std=0.8)
        heads = randomized_heads(t.feature_dim, seed=400 + trial)
        h, w = t.resolution
        cell = 2.0 / (h - 1)
        qs = rng.uniform(-1 + 1.5 * cell, 1 - 1.5 * cell, (10, 3)).astype(np.float32)
        # keep away from cell boundaries where the gradient is one-sided
        grid_u = (qs + 1) / 2 * (h - 1)
        frac = grid_u - np.floor(grid_u)
        qs = qs[np.all((frac > 0.15) & (frac < 0.85), axis=1)]
        if len(qs) == 0:
            continue
        g = grad_position(t, heads, qs)
        for k in range(len(qs)):
            for a in range(3):
                e = np.zeros(3, dtype=np.float32)
                e[a] = np.float32(1e-4)
                fp = eval_pf(t, heads, qs[k] + e)
                fm = eval_pf(t, heads, qs[k] - e)
                fd = (fp - fm) / 2e-4
                if abs(fd) > 1e-4 and abs(g[k, a] - fd) > 1e-3 * abs(fd) + 1e-5:
                    failures += 1
    assert failures == 0


def test_grad_position_lower_cell_at_exact_knot():
    t = random_triplane(h=5, w=5, c=2, seed=18)
    heads = randomized_heads(t.feature_dim, seed=19)
    grid = np.linspace(-1, 1, 5)
    q = np.array([grid[2], 0.13, -0.27], dtype=np.float32)
    g = grad_position(t, heads, q)
    eps = np.float32(1e-4)
    fd_lower = (eval_pf(t, heads, q) - eval_pf(t, heads, q - [eps, 0, 0])) / eps
    assert g[0] == pytest.approx(fd_lower, rel=5e-3, abs=1e-4)


def test_fit_field_requires_samples():
    s = single_gaussian_splat()
    empty = sample_training_queries(s, 0, 0, seed=0)
    with pytest.raises(DataError):
        fit_field(s, empty, FitConfig(steps=1))


def test_fit_field_loss_decreases_and_is_deterministic():
    s = single_gaussian_splat()
    samples = sample_training_queries(s, 1500, 400, seed=21)
    cfg = FitConfig(steps=120, hidden=32, plane_res=16, channels=8, batch=256,
                    seed=5, eval_every=40)
    r1 = fit_field(s, samples, cfg)
    r2 = fit_field(s, samples, cfg)
    assert np.mean(r1.loss_curve[-10:]) < np.mean(r1.loss_curve[:10])
    np.testing.assert_array_equal(r1.field.triplane.planes.data,
                                  r2.field.triplane.planes.data)
    assert r1.loss_curve == r2.loss_curve


@pytest.mark.slow
def test_fit_single_gaussian_validation_target():
    s = single_gaussian_splat()
    samples = sample_training_queries(s, 4000, 1000, seed=1)
    res = fit_field(s, samples, FitConfig(steps=2000, hidden=64, seed=0))
    assert res.val_prob_l1[-1][1] < 0.05
    assert res.field.prob(s.centers)[0] > 0.9
    attrs = res.field.attrs(s.centers)
    assert np.all(np.abs(attrs["color"][0] - s.colors[0]) < 0.05)


def test_field_checkpoint_round_trip(tmp_path):
    s = single_gaussian_splat()
    samples = sample_training_queries(s, 600, 200, seed=22)
    res = fit_field(s, samples, FitConfig(steps=40, hidden=32, plane_res=16,
                                          channels=8, batch=128, seed=0,
                                          truncation=TruncationConfig(0.07, "exponent")))
    path = tmp_path / "field.ckpt"
    save_field(res.field, path)
    back = load_field(path)
    q = np.random.default_rng(23).uniform(-1, 1, (40, 3))
    np.testing.assert_array_equal(back.prob(q), res.field.prob(q))
    assert back.truncation.d_trunc == pytest.approx(0.07)
    assert back.truncation.mapping == "exponent"
    for key, val in back.attrs(q).items():
        np.testing.assert_array_equal(val, res.field.attrs(q)[key])


def test_neural_field_chunked_eval_consistent():
    t = random_triplane(seed=24)
    heads = randomized_heads(t.feature_dim, seed=25)
    fld = NeuralField(t, heads, eval_chunk=7)
    q = np.random.default_rng(26).uniform(-1, 1, (23, 3)).astype(np.float32)
    np.testing.assert_array_equal(fld.prob(q), eval_pf(t, heads, q))
