from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import ShapeError, Tensor


@dataclass
class AdamState:
    first_moment: list[np.ndarray]
    second_moment: list[np.ndarray]
    step_count: int = 0
    learning_rate: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8


@dataclass
class Adam:
    """Adam with bias correction over a fixed, ordered parameter list."""

    params: list[Tensor]
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    state: AdamState = field(init=False)

    def __post_init__(self):
        self.params = list(self.params)
        self.state = AdamState(
            first_moment=[np.zeros_like(p.data) for p in self.params],
            second_moment=[np.zeros_like(p.data) for p in self.params],
            learning_rate=self.lr, beta1=self.beta1, beta2=self.beta2, epsilon=self.eps,
        )

    def apply(self, grads) -> None:
        if len(grads) != len(self.params):
            raise ShapeError(f"adam: got {len(grads)} gradients for {len(self.params)} parameters")
        st = self.state
        st.step_count += 1
        t = st.step_count
        c1 = 1.0 - st.beta1 ** t
        c2 = 1.0 - st.beta2 ** t
        for i, (p, g) in enumerate(zip(self.params, grads)):
            g = np.asarray(g, dtype=np.float64)
            if g.shape != p.shape:
                raise ShapeError(f"adam: gradient shape {g.shape} does not match parameter {p.shape}")
            m = st.beta1 * st.first_moment[i] + (1.0 - st.beta1) * g
            v = st.beta2 * st.second_moment[i] + (1.0 - st.beta2) * g * g
            st.first_moment[i] = m
            st.second_moment[i] = v
            p.data = p.data - st.learning_rate * (m / c1) / (np.sqrt(v / c2) + st.epsilon)


def adam_apply(opt: Adam, grads) -> list[Tensor]:
    opt.apply(grads)
    return opt.params
