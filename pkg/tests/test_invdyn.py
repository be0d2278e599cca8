import numpy as np
import pytest

from prefdiff import ndgrad as nd
from prefdiff.envgen import build_dataset
from prefdiff.invdyn import InvDynTrainer, InverseDynamics, heldout_mse, invdyn_loss

from conftest import check_grads


class Fixed(InverseDynamics):
    def __init__(self, out):
        super().__init__()
        self.out = out

    def __call__(self, s, s_next):
        return nd.as_tensor(self.out)


def test_perfect_and_zero_models():
    a = np.array([[0.1, -0.2], [0.0, 0.25], [-0.05, 0.05]])
    s = np.zeros((3, 2))
    assert float(invdyn_loss(Fixed(a), s, a, s + a).data) == 0.0
    # hand value: (0.05 + 0.0625 + 0.005) / 3
    zero = float(invdyn_loss(Fixed(np.zeros((3, 2))), s, a, s + a).data)
    assert zero == pytest.approx(0.1175 / 3, abs=1e-15)


def test_empty_batch():
    with pytest.raises(ValueError):
        invdyn_loss(InverseDynamics(), np.zeros((0, 2)), np.zeros((0, 2)), np.zeros((0, 2)))


def test_grad_fd():
    rng = nd.Rng(0)
    model = InverseDynamics(rng=rng, hidden=(6, 6))
    s, a, s2 = rng.normal((5, 2)), rng.uniform((5, 2), -0.25, 0.25), rng.normal((5, 2))
    assert check_grads(lambda: invdyn_loss(model, s, a, s2), model.parameters()) < 1e-5


def test_predictions_clipped():
    model = InverseDynamics(rng=nd.Rng(1))
    out = model.predict_action(nd.Rng(2).uniform((50, 2), -20, 20), nd.Rng(3).uniform((50, 2), -20, 20))
    assert np.all(np.abs(out) <= 0.25)
    assert model.predict_action(np.zeros(2), np.ones(2)).shape == (2,)


@pytest.fixture(scope="module")
def trained():
    ds = build_dataset(m=3, episodes_per_task=30, pairs_per_task=4, seed=11)
    ho = build_dataset(m=3, episodes_per_task=10, pairs_per_task=4, seed=12)
    rng = nd.Rng(4)
    model = InverseDynamics(rng=rng)
    tr = InvDynTrainer(model, lr=1e-3)
    s, a, s2 = ds.transitions()
    curve = []
    for step in range(1, 3001):
        idx = rng.integers(0, len(s), 256)
        tr.step(s[idx], a[idx], s2[idx])
        if step % 375 == 0:
            curve.append(heldout_mse(model, *ho.transitions()))
    return model, curve


def test_heldout_mse_falls_below_threshold(trained):
    model, curve = trained
    assert curve[-1] < 1e-4
    rises = sum(b > a for a, b in zip(curve, curve[1:]))
    assert rises <= 1, curve


def test_still_state_predicts_zero_action(trained):
    model, _ = trained
    s = nd.Rng(5).uniform((20, 2), -1, 1)
    assert np.abs(model.predict_action(s, s)).max() < 0.02
