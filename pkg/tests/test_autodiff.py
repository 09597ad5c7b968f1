import numpy as np
import pytest

from splatfields import autodiff as ad
from splatfields.autodiff import Adam, AdamState, Tape, Tensor, adam_step
from splatfields.checkpoint import load_tensors, save_tensors


def finite_diff(f, x, eps=1e-3):
    """Central finite differences of a scalar function over an array."""
    g = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        i = it.multi_index
        xp, xm = x.copy(), x.copy()
        xp[i] += eps
        xm[i] -= eps
        g[i] = (f(xp) - f(xm)) / (2 * eps)
        it.iternext()
    return g


def check_grad(build, ref, x0, rel_tol=1e-4):
    """build(tensor) -> scalar loss tensor; ref is the independent float64
    implementation of the same function, differentiated numerically."""
    t = Tensor(x0, requires_grad=True)
    with Tape() as tape:
        loss = build(t)
        grads = tape.backward(loss)
    assert float(loss.data) == pytest.approx(ref(x0.astype(np.float64)), rel=1e-4)
    num = finite_diff(ref, x0.astype(np.float64), eps=1e-5)
    scale = max(np.abs(num).max(), 1e-3)
    np.testing.assert_allclose(grads[t], num, atol=rel_tol * scale)


RNG = np.random.default_rng(0)


def test_matmul_identity():
    x = RNG.normal(size=(4, 4)).astype(np.float32)
    out = ad.matmul(Tensor(np.eye(4, dtype=np.float32)), Tensor(x))
    np.testing.assert_allclose(out.data, x, atol=1e-7)


def test_sigmoid_zero():
    assert ad.sigmoid(Tensor(np.zeros(3))).data == pytest.approx(0.5)


@pytest.mark.parametrize("op", ["matmul_a", "matmul_b", "add", "add_bias", "sub",
                                "mul", "div", "div_col", "relu", "sigmoid", "tanh",
                                "exp", "log", "sqrt", "square", "neg", "concat",
                                "slice", "reshape", "sum", "sum_axis", "mean",
                                "max", "l1", "mse"])
def test_primitive_gradients_match_finite_differences(op):
    rng = np.random.default_rng(hash(op) % 2**31)
    x0 = rng.uniform(0.2, 1.5, size=(3, 4)).astype(np.float32)
    other = rng.uniform(0.3, 1.2, size=(3, 4)).astype(np.float32)
    w = rng.normal(size=(4, 2)).astype(np.float32)
    target = rng.normal(size=(3, 4)).astype(np.float32)

    w64 = w.astype(np.float64)
    o64 = other.astype(np.float64)
    t64 = target.astype(np.float64)

    cases = {
        "matmul_a": (lambda t: ad.reduce_sum(ad.square(ad.matmul(t, Tensor(w)))),
                     lambda x: float(((x @ w64) ** 2).sum())),
        "matmul_b": (lambda t: ad.reduce_sum(ad.square(ad.matmul(Tensor(other),
                                                                 ad.reshape(t, (4, 3))))),
                     lambda x: float(((o64 @ x.reshape(4, 3)) ** 2).sum())),
        "add": (lambda t: ad.reduce_sum(ad.square(ad.add(t, Tensor(other)))),
                lambda x: float(((x + o64) ** 2).sum())),
        "add_bias": (lambda t: ad.reduce_sum(
            ad.square(ad.add(Tensor(other), ad.reshape(ad.slice_axis(t, 0, 1, 0), (4,))))),
            lambda x: float(((o64 + x[0]) ** 2).sum())),
        "sub": (lambda t: ad.reduce_sum(ad.square(ad.sub(t, Tensor(other)))),
                lambda x: float(((x - o64) ** 2).sum())),
        "mul": (lambda t: ad.reduce_sum(ad.mul(t, Tensor(other))),
                lambda x: float((x * o64).sum())),
        "div": (lambda t: ad.reduce_sum(ad.div(Tensor(other), t)),
                lambda x: float((o64 / x).sum())),
        "div_col": (lambda t: ad.reduce_sum(
            ad.div(t, ad.reduce_sum(ad.square(t), axis=-1, keepdims=True))),
            lambda x: float((x / (x ** 2).sum(axis=-1, keepdims=True)).sum())),
        "relu": (lambda t: ad.reduce_sum(ad.relu(ad.sub(t, 0.7 * np.ones_like(x0)))),
                 lambda x: float(np.maximum(x - 0.7, 0).sum())),
        "sigmoid": (lambda t: ad.reduce_sum(ad.sigmoid(t)),
                    lambda x: float((1 / (1 + np.exp(-x))).sum())),
        "tanh": (lambda t: ad.reduce_sum(ad.tanh(t)),
                 lambda x: float(np.tanh(x).sum())),
        "exp": (lambda t: ad.reduce_sum(ad.exp(t)),
                lambda x: float(np.exp(x).sum())),
        "log": (lambda t: ad.reduce_sum(ad.log(t)),
                lambda x: float(np.log(x).sum())),
        "sqrt": (lambda t: ad.reduce_sum(ad.sqrt(t)),
                 lambda x: float(np.sqrt(x).sum())),
        "square": (lambda t: ad.reduce_sum(ad.square(t)),
                   lambda x: float((x ** 2).sum())),
        "neg": (lambda t: ad.reduce_sum(ad.square(ad.neg(t))),
                lambda x: float((x ** 2).sum())),
        "concat": (lambda t: ad.reduce_sum(
            ad.square(ad.concat([t, Tensor(other)], axis=1))),
            lambda x: float((np.concatenate([x, o64], axis=1) ** 2).sum())),
        "slice": (lambda t: ad.reduce_sum(ad.square(ad.slice_axis(t, 1, 3, axis=-1))),
                  lambda x: float((x[:, 1:3] ** 2).sum())),
        "reshape": (lambda t: ad.reduce_sum(ad.square(ad.reshape(t, (2, 6)))),
                    lambda x: float((x ** 2).sum())),
        "sum": (lambda t: ad.reduce_sum(t), lambda x: float(x.sum())),
        "sum_axis": (lambda t: ad.reduce_sum(
            ad.square(ad.reduce_sum(t, axis=1, keepdims=True))),
            lambda x: float((x.sum(axis=1) ** 2).sum())),
        "mean": (lambda t: ad.reduce_mean(ad.square(t)),
                 lambda x: float((x ** 2).mean())),
        "max": (lambda t: ad.reduce_sum(ad.reduce_max(t, axis=0)),
                lambda x: float(x.max(axis=0).sum())),
        "l1": (lambda t: ad.l1_loss(t, target),
               lambda x: float(np.abs(x - t64).mean())),
        "mse": (lambda t: ad.mse_loss(t, target),
                lambda x: float(((x - t64) ** 2).mean())),
    }
    build, ref = cases[op]
    check_grad(build, ref, x0)


def test_chained_mlp_gradient():
    rng = np.random.default_rng(42)
    x = rng.normal(size=(5, 3)).astype(np.float32)
    w = rng.normal(size=(3, 4)).astype(np.float32) * 0.5
    b = rng.normal(size=4).astype(np.float32) * 0.1
    y = rng.normal(size=(5, 4)).astype(np.float32)

    def ref(wv):
        h = np.maximum(x.astype(np.float64) @ wv + b.astype(np.float64), 0)
        return float(((h - y.astype(np.float64)) ** 2).mean())

    wt = Tensor(w, requires_grad=True)
    bt = Tensor(b, requires_grad=True)
    with Tape() as tape:
        loss = ad.mse_loss(ad.relu(ad.add(ad.matmul(Tensor(x), wt), bt)), y)
        grads = tape.backward(loss)
    num_w = finite_diff(ref, w.astype(np.float64), eps=1e-5)
    np.testing.assert_allclose(grads[wt], num_w, atol=1e-4 * max(1, np.abs(num_w).max()))


def test_backward_sum_gives_ones():
    x = Tensor(np.zeros(3, dtype=np.float32), requires_grad=True)
    with Tape() as tape:
        grads = tape.backward(ad.reduce_sum(x))
    np.testing.assert_array_equal(grads[x], np.ones(3))


def test_backward_rejects_non_scalar():
    x = Tensor(np.zeros((2, 2)), requires_grad=True)
    with Tape() as tape:
        y = ad.square(x)
        with pytest.raises(ValueError, match="scalar"):
            tape.backward(y)


def test_second_backward_errors():
    x = Tensor(np.ones(2), requires_grad=True)
    with Tape() as tape:
        loss = ad.reduce_sum(x)
        tape.backward(loss)
        with pytest.raises(RuntimeError, match="consumed"):
            tape.backward(loss)


def test_constant_graph_gives_empty_map():
    x = Tensor(np.ones(3), requires_grad=False)
    with Tape() as tape:
        loss = ad.reduce_sum(ad.square(x))
        grads = tape.backward(loss)
    assert grads == {}


def test_backward_linearity_of_sums():
    rng = np.random.default_rng(3)
    x0 = rng.normal(size=(3, 3)).astype(np.float32)

    def grad_of(build):
        t = Tensor(x0, requires_grad=True)
        with Tape() as tape:
            return tape.backward(build(t))[t]

    ga = grad_of(lambda t: ad.reduce_sum(ad.square(t)))
    gb = grad_of(lambda t: ad.reduce_sum(ad.exp(t)))
    gab = grad_of(lambda t: ad.add(ad.reduce_sum(ad.square(t)),
                                   ad.reduce_sum(ad.exp(t))))
    np.testing.assert_allclose(gab, ga + gb, rtol=1e-5, atol=1e-6)


def test_adam_zero_gradient_keeps_params():
    p = Tensor(np.array([1.0, 2.0], dtype=np.float32), requires_grad=True)
    state = AdamState.for_params([p])
    adam_step([p], [np.zeros(2, dtype=np.float32)], state, lr=1e-4)
    np.testing.assert_array_equal(p.data, [1.0, 2.0])


def test_adam_first_step_moves_by_lr():
    p = Tensor(np.array([0.0], dtype=np.float32), requires_grad=True)
    state = AdamState.for_params([p])
    adam_step([p], [np.ones(1, dtype=np.float32)], state, lr=1e-4)
    assert p.data[0] == pytest.approx(-1e-4, rel=1e-4)


def test_adam_converges_on_quadratic_bowl():
    w = Tensor(np.array([0.0], dtype=np.float32), requires_grad=True)
    opt = Adam([w], lr=0.05)
    for _ in range(500):
        grad = 2.0 * (w.data - 3.0)
        opt.step({w: grad.astype(np.float32)})
    assert abs(w.data[0] - 3.0) < 0.05


def test_adam_skips_non_finite_gradients():
    p = Tensor(np.array([1.0], dtype=np.float32), requires_grad=True)
    opt = Adam([p], lr=0.1)
    opt.step({p: np.array([np.nan], dtype=np.float32)})
    assert opt.skipped == 1
    np.testing.assert_array_equal(p.data, [1.0])


def test_adam_lr_zero_is_identity():
    p = Tensor(np.array([1.0, -2.0], dtype=np.float32), requires_grad=True)
    opt = Adam([p], lr=0.0)
    for _ in range(3):
        opt.step({p: np.array([0.5, -0.5], dtype=np.float32)})
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_shape_mismatch_names_both_shapes():
    with pytest.raises(ValueError, match=r"\(2, 3\).*\(4, 2\)"):
        ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))


def test_checkpoint_round_trip(tmp_path):
    tensors = {
        "a": np.arange(6, dtype=np.float32).reshape(2, 3),
        "b": np.array([1.5], dtype=np.float64),
        "c": np.arange(4, dtype=np.int64),
    }
    meta = {"kind": "test", "nested": {"x": 1}}
    p = tmp_path / "ck.bin"
    save_tensors(p, tensors, meta)
    back, meta2 = load_tensors(p)
    assert meta2 == meta
    for k, v in tensors.items():
        np.testing.assert_array_equal(back[k], v)
        assert back[k].dtype == v.dtype


def test_checkpoint_bytes_deterministic(tmp_path):
    tensors = {"w": np.ones((3, 3), dtype=np.float32), "b": np.zeros(3, dtype=np.float32)}
    p1, p2 = tmp_path / "a.bin", tmp_path / "b.bin"
    save_tensors(p1, tensors, {"k": 1})
    save_tensors(p2, dict(reversed(list(tensors.items()))), {"k": 1})
    assert p1.read_bytes() == p2.read_bytes()
