"""Minimal dense-tensor reverse-mode autodiff on numpy, plus Adam.

Scalars are float32 with float64 accumulation inside reductions. A Tape
records operations in creation order (which is topological); backward walks
it once in reverse. Tapes are single-threaded; independent tapes on
separate threads do not interact.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np

_tls = threading.local()


def _tape_stack() -> list:
    if not hasattr(_tls, "stack"):
        _tls.stack = []
    return _tls.stack


def _active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """A dense float32 array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.ascontiguousarray(data, dtype=np.float32)
        self.requires_grad = requires_grad
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


@dataclass
class _Node:
    inputs: tuple
    output: Tensor
    backward: object  # callable(grad_out) -> tuple of grads aligned with inputs


class frozen_params:
    """Temporarily clears requires_grad on a parameter list.

    Used when differentiating with respect to inputs only (e.g. query
    positions), so backward skips the parameter-gradient matmuls.
    """

    def __init__(self, params):
        self.params = list(params)
        self._saved = []

    def __enter__(self):
        self._saved = [p.requires_grad for p in self.params]
        for p in self.params:
            p.requires_grad = False
        return self

    def __exit__(self, *exc):
        for p, flag in zip(self.params, self._saved):
            p.requires_grad = flag
        return False


class Tape:
    """Records forward operations for one backward pass."""

    def __init__(self):
        self._nodes: list[_Node] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()
        return False

    def backward(self, loss: Tensor) -> dict:
        """Accumulate gradients of a scalar loss; returns {tensor: grad}.

        Every requires_grad tensor touched by the graph gets its .grad set.
        A tape can only be walked once.
        """
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.data.shape}")
        if self._consumed:
            raise RuntimeError("tape already consumed; rerun the forward pass")
        self._consumed = True
        if not loss.requires_grad:
            return {}
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        holders: dict[int, Tensor] = {id(loss): loss}
        for node in reversed(self._nodes):
            g_out = grads.get(id(node.output))
            if g_out is None:
                continue
            in_grads = node.backward(g_out)
            for t, g in zip(node.inputs, in_grads):
                if g is None or not isinstance(t, Tensor) or not t.requires_grad:
                    continue
                key = id(t)
                holders[key] = t
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = np.asarray(g, dtype=np.float32)
        result = {}
        for key, g in grads.items():
            t = holders[key]
            t.grad = g
            result[t] = g
        return result


def record(inputs: tuple, out_data: np.ndarray, backward) -> Tensor:
    """Create an op output, registering it on the active tape when tracked.

    `backward(grad_out)` must return one gradient (or None) per input.
    Building blocks outside this module use this to define fused ops.
    """
    tape = _active_tape()
    needs = tape is not None and any(
        isinstance(t, Tensor) and t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        tape._nodes.append(_Node(tuple(inputs), out, backward))
    return out


def _shape_error(op, a, b):
    return ValueError(f"{op}: incompatible shapes {tuple(np.shape(a))} and {tuple(np.shape(b))}")


def _as_array(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float32)


# ---------------------------------------------------------------- arithmetic

def add(a: Tensor, b) -> Tensor:
    bd = _as_array(b)
    if bd.shape != a.data.shape:
        if not (bd.ndim == 1 and a.data.shape[-1] == bd.shape[0]):
            raise _shape_error("add", a.data, bd)

    def backward(g):
        if not _needs_grad(b):
            return g, None
        gb = g if bd.shape == g.shape else g.reshape(-1, bd.shape[0]).sum(
            axis=0, dtype=np.float64).astype(np.float32)
        return g, gb

    return record((a, b), a.data + bd, backward)


def sub(a: Tensor, b) -> Tensor:
    bd = _as_array(b)
    if bd.shape != a.data.shape:
        if not (bd.ndim == 1 and a.data.shape[-1] == bd.shape[0]):
            raise _shape_error("sub", a.data, bd)

    def backward(g):
        gb = -g if bd.shape == g.shape else -g.reshape(-1, bd.shape[0]).sum(
            axis=0, dtype=np.float64).astype(np.float32)
        return g, gb

    return record((a, b), a.data - bd, backward)


def mul(a: Tensor, b) -> Tensor:
    """Elementwise product; b may be a tensor of equal shape or a python scalar."""
    if isinstance(b, (int, float, np.floating)):
        s = np.float32(b)
        return record((a,), a.data * s, lambda g: (g * s,))
    bd = _as_array(b)
    if bd.shape != a.data.shape:
        raise _shape_error("mul", a.data, bd)
    ad = a.data

    def backward(g):
        return (g * bd if _needs_grad(a) else None,
                g * ad if _needs_grad(b) else None)

    return record((a, b), ad * bd, backward)


def div(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise quotient; b matches a or is a trailing keepdims-1 column."""
    bd = _as_array(b)
    ad = a.data
    if bd.shape != ad.shape and bd.shape != ad.shape[:-1] + (1,):
        raise _shape_error("div", ad, bd)

    def backward(g):
        ga = g / bd
        gb = -g * ad / (bd * bd)
        if bd.shape != ad.shape:
            gb = gb.sum(axis=-1, keepdims=True, dtype=np.float64).astype(np.float32)
        return ga, gb

    return record((a, b), ad / bd, backward)


def neg(a: Tensor) -> Tensor:
    return record((a,), -a.data, lambda g: (-g,))


def _needs_grad(x) -> bool:
    return isinstance(x, Tensor) and x.requires_grad


def matmul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, _as_array(b)
    if ad.ndim != 2 or bd.ndim != 2 or ad.shape[1] != bd.shape[0]:
        raise _shape_error("matmul", ad, bd)

    def backward(g):
        # Each factor's gradient is a full matmul; skip the untracked side.
        return (g @ bd.T if _needs_grad(a) else None,
                ad.T @ g if _needs_grad(b) else None)

    return record((a, b), ad @ bd, backward)


def concat(tensors, axis: int = -1) -> Tensor:
    datas = [t.data for t in tensors]
    sizes = [d.shape[axis] for d in datas]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(np.take(g, np.arange(offsets[i], offsets[i + 1]), axis=axis)
                     for i in range(len(datas)))

    return record(tuple(tensors), np.concatenate(datas, axis=axis), backward)


def slice_axis(a: Tensor, start: int, stop: int, axis: int = -1) -> Tensor:
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)

    def backward(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        return (full,)

    return record((a,), a.data[idx].copy(), backward)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.data.shape
    return record((a,), a.data.reshape(shape), lambda g: (g.reshape(old),))


# ------------------------------------------------------------- elementwise

def relu(a: Tensor) -> Tensor:
    y = np.maximum(a.data, 0.0)
    return record((a,), y, lambda g: (g * (y > 0),))


def sigmoid(a: Tensor) -> Tensor:
    y = 1.0 / (1.0 + np.exp(-a.data.astype(np.float64)))
    y = y.astype(np.float32)
    return record((a,), y, lambda g: (g * y * (1.0 - y),))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return record((a,), y, lambda g: (g * (1.0 - y * y),))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return record((a,), y, lambda g: (g * y,))


def log(a: Tensor) -> Tensor:
    return record((a,), np.log(a.data), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    y = np.sqrt(a.data)
    return record((a,), y, lambda g: (g * (0.5 / y),))


def square(a: Tensor) -> Tensor:
    return record((a,), a.data * a.data, lambda g: (g * (2.0 * a.data),))


# --------------------------------------------------------------- reductions

def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims, dtype=np.float64).astype(np.float32)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).astype(np.float32),)
        ge = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(ge, a.data.shape).astype(np.float32),)

    return record((a,), out, backward)


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else a.data.shape[axis]
    out = a.data.mean(axis=axis, keepdims=keepdims, dtype=np.float64).astype(np.float32)

    def backward(g):
        if axis is None:
            return ((np.broadcast_to(g, a.data.shape) / n).astype(np.float32),)
        ge = g if keepdims else np.expand_dims(g, axis)
        return ((np.broadcast_to(ge, a.data.shape) / n).astype(np.float32),)

    return record((a,), out, backward)


def reduce_max(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    """Max along one axis; gradient flows to the first argmax on ties."""
    out = a.data.max(axis=axis, keepdims=keepdims)
    arg = a.data.argmax(axis=axis)

    def backward(g):
        full = np.zeros_like(a.data)
        ge = g if not keepdims else np.squeeze(g, axis=axis)
        np.put_along_axis(full, np.expand_dims(arg, axis),
                          np.expand_dims(ge, axis), axis=axis)
        return (full,)

    return record((a,), out, backward)


# -------------------------------------------------------------------- losses

def l1_loss(pred: Tensor, target) -> Tensor:
    td = _as_array(target)
    if td.shape != pred.data.shape:
        raise _shape_error("l1_loss", pred.data, td)
    diff = pred.data - td
    n = diff.size
    out = np.abs(diff).sum(dtype=np.float64) / n

    def backward(g):
        s = g * np.sign(diff) / n
        return s, -s

    return record((pred, target), np.float32(out), backward)


def mse_loss(pred: Tensor, target) -> Tensor:
    td = _as_array(target)
    if td.shape != pred.data.shape:
        raise _shape_error("mse_loss", pred.data, td)
    diff = pred.data - td
    n = diff.size
    out = np.square(diff, dtype=np.float64).sum() / n

    def backward(g):
        s = g * 2.0 * diff / n
        return s, -s

    return record((pred, target), np.float32(out), backward)


# --------------------------------------------------------------------- Adam

@dataclass
class AdamState:
    """First/second-moment buffers for one parameter list."""

    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    step: int = 0
    skipped: int = 0

    @classmethod
    def for_params(cls, params) -> "AdamState":
        return cls(m=[np.zeros_like(p.data) for p in params],
                   v=[np.zeros_like(p.data) for p in params])


def adam_step(params, grads, state: AdamState, lr: float = 1e-4,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One Adam update in place. Non-finite gradients skip their parameter."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        g = np.asarray(g, dtype=np.float32)
        if not np.all(np.isfinite(g)):
            state.skipped += 1
            continue
        m, v = state.m[i], state.v[i]
        m *= np.float32(beta1)
        m += np.float32(1.0 - beta1) * g
        v *= np.float32(beta2)
        gsq = g * g
        gsq *= np.float32(1.0 - beta2)
        v += gsq
        denom = np.sqrt(v)
        denom *= np.float32(1.0 / np.sqrt(bc2))
        denom += np.float32(eps)
        update = m / denom
        update *= np.float32(lr / bc1)
        p.data -= update


class Adam:
    """Stateful wrapper around adam_step for a fixed parameter list."""

    def __init__(self, params, lr: float = 1e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.state = AdamState.for_params(self.params)

    def step(self, grads: dict) -> None:
        ordered = [grads.get(p) for p in self.params]
        adam_step(self.params, ordered, self.state, self.lr,
                  self.beta1, self.beta2, self.eps)

    @property
    def skipped(self) -> int:
        return self.state.skipped
