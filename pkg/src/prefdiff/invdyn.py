"""Inverse dynamics ``g(s, s') -> a`` fitted by squared-error regression."""
from __future__ import annotations

import numpy as np

from . import ndgrad as nd
from .ndgrad import Adam, Rng, Tensor
from .nn import MLP, Module


class InverseDynamics(Module):
    def __init__(self, state_dim: int = 2, action_dim: int = 2, rng: Rng | None = None,
                 hidden=(128, 128), a_max: float = 0.25):
        rng = rng or Rng(0)
        self.state_dim, self.action_dim, self.hidden, self.a_max = state_dim, action_dim, tuple(hidden), a_max
        self.net = MLP([2 * state_dim, *hidden, action_dim], rng)

    def __call__(self, s, s_next) -> Tensor:
        x = np.concatenate([np.atleast_2d(s), np.atleast_2d(s_next)], axis=-1)
        return self.net(x)

    def predict_action(self, s, s_next) -> np.ndarray:
        with nd.no_tape():
            a = self(s, s_next).data
        a = np.clip(a, -self.a_max, self.a_max)
        return a[0] if np.ndim(s) == 1 else a

    def config(self) -> dict:
        return dict(state_dim=self.state_dim, action_dim=self.action_dim, hidden=list(self.hidden),
                    a_max=self.a_max)


def invdyn_loss(model: InverseDynamics, s, a, s_next) -> Tensor:
    """Mean over the batch of ``||a - g(s, s')||^2``."""
    if len(s) == 0:
        raise ValueError("invdyn_loss: empty batch")
    per = nd.sum(nd.square(nd.as_tensor(a) - model(s, s_next)), axis=-1)
    return nd.mean(per)


class InvDynTrainer:
    def __init__(self, model: InverseDynamics, lr: float = 1e-3):
        self.model = model
        self.opt = Adam(model.parameters(), lr=lr)

    def step(self, s, a, s_next) -> float:
        with nd.Tape() as tape:
            loss = invdyn_loss(self.model, s, a, s_next)
            self.opt.apply(tape.backward(loss, self.opt.params))
        return float(loss.data)


def heldout_mse(model: InverseDynamics, s, a, s_next) -> float:
    with nd.no_tape():
        return float(invdyn_loss(model, s, a, s_next).data)
