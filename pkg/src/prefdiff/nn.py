"""Parameter containers and small layers on top of ndgrad."""
from __future__ import annotations

import numpy as np

from . import ndgrad as nd
from .ndgrad import Rng, Tensor


class Module:
    """Holds named trainable tensors and child modules, in insertion order."""

    def __setattr__(self, key, value):
        if not hasattr(self, "_order"):
            object.__setattr__(self, "_order", [])
        if isinstance(value, (Tensor, Module)) and key not in self._order:
            self._order.append(key)
        object.__setattr__(self, key, value)

    def named_parameters(self, prefix: str = ""):
        for key in getattr(self, "_order", []):
            v = getattr(self, key)
            if isinstance(v, Module):
                yield from v.named_parameters(f"{prefix}{key}.")
            elif v.requires_grad:
                yield f"{prefix}{key}", v

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        for k, p in own.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != p.shape:
                raise nd.ShapeError(f"{k}: checkpoint shape {arr.shape} != {p.shape}")
            p.data = arr.copy()


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: Rng):
        bound = 1.0 / np.sqrt(n_in)
        self.weight = nd.parameter(rng.uniform((n_in, n_out), -bound, bound))
        self.bias = nd.parameter(rng.uniform((n_out,), -bound, bound))

    def __call__(self, x):
        return nd.matmul(x, self.weight) + self.bias


class MLP(Module):
    """Linear layers with tanh between them; the last layer is linear."""

    def __init__(self, sizes: list[int], rng: Rng, activation=nd.tanh):
        self.n_layers = len(sizes) - 1
        for i in range(self.n_layers):
            setattr(self, f"l{i}", Linear(sizes[i], sizes[i + 1], rng))
        object.__setattr__(self, "activation", activation)

    def __call__(self, x):
        for i in range(self.n_layers):
            x = getattr(self, f"l{i}")(x)
            if i < self.n_layers - 1:
                x = self.activation(x)
        return x


def gaussian_head(raw, w_dim: int, lo: float = -10.0, hi: float = 4.0):
    """Split a (..., 2*w_dim) output into mean and clamped log-variance."""
    mu = nd.slice_last(raw, 0, w_dim)
    log_var = nd.clip(nd.slice_last(raw, w_dim, 2 * w_dim), lo, hi)
    return mu, log_var
