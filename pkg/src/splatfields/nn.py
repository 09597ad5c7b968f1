"""Small fully-connected building blocks on top of the autodiff tensors."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class Linear:
    """Affine layer y = x @ W + b operating on (batch, n_in) tensors."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator,
                 zero_init: bool = False, bias_init: np.ndarray | None = None):
        if zero_init:
            w = np.zeros((n_in, n_out), dtype=np.float32)
        else:
            w = rng.normal(0.0, np.sqrt(2.0 / n_in), size=(n_in, n_out)).astype(np.float32)
        b = np.zeros(n_out, dtype=np.float32)
        if bias_init is not None:
            b = np.asarray(bias_init, dtype=np.float32).copy()
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(b, requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.add(ad.matmul(x, self.weight), self.bias)

    def params(self) -> list[Tensor]:
        return [self.weight, self.bias]


class MLP:
    """ReLU MLP; the final layer is linear (optionally zero-initialized)."""

    def __init__(self, sizes: list[int], rng: np.random.Generator,
                 zero_init_last: bool = False, last_bias: np.ndarray | None = None):
        self.layers = []
        for i in range(len(sizes) - 1):
            last = i == len(sizes) - 2
            self.layers.append(Linear(
                sizes[i], sizes[i + 1], rng,
                zero_init=zero_init_last and last,
                bias_init=last_bias if last else None,
            ))

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = ad.relu(x)
        return x

    def params(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer.params()]

    def state_dict(self, prefix: str) -> dict:
        out = {}
        for i, layer in enumerate(self.layers):
            out[f"{prefix}.{i}.weight"] = layer.weight.data
            out[f"{prefix}.{i}.bias"] = layer.bias.data
        return out

    def load_state_dict(self, tensors: dict, prefix: str) -> None:
        for i, layer in enumerate(self.layers):
            layer.weight.data = np.ascontiguousarray(
                tensors[f"{prefix}.{i}.weight"], dtype=np.float32)
            layer.bias.data = np.ascontiguousarray(
                tensors[f"{prefix}.{i}.bias"], dtype=np.float32)
