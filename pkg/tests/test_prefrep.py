import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from prefdiff import ndgrad as nd
from prefdiff.analysis import nearest_centroid_accuracy
from prefdiff.envgen import build_dataset, make_tasks, task_at_angle
from prefdiff.prefrep import (GaussianEmbedding, OptimalRepresentations, ReprTrainer, TrajectoryEncoder,
                              TripletBatch, kl_diag_gauss, kl_embeddings, preference_triplets, repr_kl_loss,
                              segment_features, train_new_task_repr, triplet_loss)

from conftest import check_grads


def emb(mu, lv):
    return GaussianEmbedding(np.asarray(mu, float), np.asarray(lv, float))


def mc_kl(p_mu, p_lv, q_mu, q_lv, n=1_000_000, seed=0):
    """E_p[log p - log q] by sampling, written against scipy-free closed densities."""
    rng = np.random.default_rng(seed)
    x = p_mu + np.exp(0.5 * p_lv) * rng.standard_normal((n, len(p_mu)))

    def logpdf(x, mu, lv):
        return -0.5 * np.sum(lv + np.log(2 * np.pi) + (x - mu) ** 2 / np.exp(lv), axis=1)

    return float(np.mean(logpdf(x, p_mu, p_lv) - logpdf(x, q_mu, q_lv)))


# ------------------------------------------------------------ KL

def test_kl_identity_is_zero():
    e = emb([0.3, -1.0], [0.2, -0.5])
    assert kl_embeddings(e, e) == 0.0


def test_kl_unit_mean_shift():
    assert abs(kl_embeddings(emb([0.0], [0.0]), emb([1.0], [0.0])) - 0.5) < 1e-9


def test_kl_matches_monte_carlo():
    rng = np.random.default_rng(42)
    for _ in range(3):
        d = 4
        p_mu, q_mu = rng.normal(size=d), rng.normal(size=d)
        p_lv, q_lv = rng.uniform(-2, 1, d), rng.uniform(-2, 1, d)
        exact = float(kl_diag_gauss(p_mu, p_lv, q_mu, q_lv).data)
        assert abs(exact - mc_kl(p_mu, p_lv, q_mu, q_lv, n=400_000)) < 0.02


def test_kl_nonnegative_on_random_pairs():
    rng = np.random.default_rng(0)
    mu_p, mu_q = rng.normal(size=(1000, 8)), rng.normal(size=(1000, 8))
    lv_p, lv_q = rng.uniform(-3, 3, (1000, 8)), rng.uniform(-3, 3, (1000, 8))
    assert np.all(kl_diag_gauss(mu_p, lv_p, mu_q, lv_q).data >= 0)


def test_kl_dimension_mismatch():
    with pytest.raises(nd.ShapeError):
        kl_embeddings(emb([0.0, 1.0], [0.0, 0.0]), emb([0.0], [0.0]))
    with pytest.raises(nd.ShapeError):
        GaussianEmbedding(np.zeros(2), np.zeros(3))


def test_kl_gradients_match_fd():
    rng = nd.Rng(3)
    ps = [nd.parameter(rng.uniform((4, 3), -1, 1)) for _ in range(4)]
    assert check_grads(lambda: nd.sum(kl_diag_gauss(*ps)), ps) < 1e-5


# ------------------------------------------------------------ repr KL loss and triplet

def test_repr_kl_all_equal_hits_guard():
    z = (np.zeros(3), np.zeros(3))
    assert float(repr_kl_loss(z, z, z).data) == pytest.approx(1e4)


def test_repr_kl_far_negative_vanishes():
    z = (np.zeros(2), np.zeros(2))
    far = (np.full(2, 1e3), np.zeros(2))
    assert 0 < float(repr_kl_loss(z, far, z).data) < 1e-5


def test_repr_kl_monotone_in_positive():
    opt, neg = (np.zeros(2), np.zeros(2)), (np.ones(2) * 2, np.zeros(2))
    losses = [float(repr_kl_loss((np.full(2, s), np.zeros(2)), neg, opt).data) for s in (1.0, 0.5, 0.1)]
    assert losses[0] > losses[1] > losses[2]


def test_repr_kl_grad_fd():
    rng = nd.Rng(7)
    ps = [nd.parameter(rng.uniform((5, 3), -1, 1)) for _ in range(6)]
    f = lambda: nd.sum(repr_kl_loss((ps[0], ps[1]), (ps[2], ps[3]), (ps[4], ps[5])))
    assert check_grads(f, ps) < 1e-5


def test_triplet_cases():
    o = np.zeros(2)
    assert float(triplet_loss(o, np.array([1.0, 0.0]), o, 1.0).data) == 0.0
    assert float(triplet_loss(np.array([0.0, 2.0]), np.array([2.0, 0.0]), o, 0.7).data) == pytest.approx(0.7)
    assert float(triplet_loss(np.array([0.1, 0.0]), np.array([3.0, 0.0]), o, 1.0).data) == 0.0
    with pytest.raises(ValueError):
        triplet_loss(o, o, o, 0.0)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 3), elements=st.floats(-3, 3)), st.floats(0, 2 * np.pi), st.floats(0.1, 2))
def test_triplet_rotation_invariant(pts, angle, delta):
    c, s = np.cos(angle), np.sin(angle)
    rot = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])
    a = float(triplet_loss(pts[0], pts[1], pts[2], delta).data)
    b = float(triplet_loss(pts[0] @ rot.T, pts[1] @ rot.T, pts[2] @ rot.T, delta).data)
    assert a == pytest.approx(b, abs=1e-9)


# ------------------------------------------------------------ encoder

def test_encoder_shapes_clamp_and_determinism(small_ds):
    enc = TrajectoryEncoder(16, 16, 64, rng=nd.Rng(0))
    e1 = enc.encode(small_ds.segments[:5])
    e2 = enc.encode(small_ds.segments[:5])
    assert e1.mean.shape == (5, 16) and e1.condition().shape == (5, 32)
    np.testing.assert_array_equal(e1.mean, e2.mean)
    assert np.all((e1.log_var >= -10) & (e1.log_var <= 4))
    twin = enc.encode([small_ds.segments[0], small_ds.segments[0]])
    np.testing.assert_array_equal(twin.mean[0], twin.mean[1])


def test_encoder_rejects_wrong_length(small_ds):
    enc = TrajectoryEncoder(8, 4, 16, rng=nd.Rng(0))
    with pytest.raises(nd.ShapeError):
        enc.encode(small_ds.segments[:2])


def test_encoder_extreme_inputs_stay_clamped():
    enc = TrajectoryEncoder(4, 3, 8, rng=nd.Rng(0))
    enc.head.weight.data *= 1e3
    mu, lv = enc(nd.Rng(1).uniform((6, 4, 5), -50, 50))
    assert np.all((lv.data >= -10) & (lv.data <= 4))


def test_encoder_grad_fd():
    rng = nd.Rng(2)
    enc = TrajectoryEncoder(4, 3, 8, rng=rng)
    x = rng.uniform((3, 4, 5), -1, 1)
    params = enc.parameters()
    assert check_grads(lambda: nd.sum(nd.tanh(nd.concat(list(enc(x))))), params) < 1e-5


def test_optimal_rows_unknown_task():
    ws = OptimalRepresentations(3, 4, nd.Rng(0))
    assert ws.mu.shape == (3, 4)
    np.testing.assert_array_equal(ws.log_var.data, 0.0)
    with pytest.raises(ValueError):
        ws.rows([0, 3])


# ------------------------------------------------------------ stop-gradient phases

def _snap(mod):
    return {k: v.copy() for k, v in mod.state_dict().items()}


def _same(a, b):
    return all(np.array_equal(a[k], b[k]) for k in a)


def test_stop_gradient_isolation(small_ds):
    rng = nd.Rng(0)
    feats = segment_features(small_ds.segments)
    enc = TrajectoryEncoder(16, 8, 16, rng=rng)
    enc.set_normalization(feats)
    ws = OptimalRepresentations(3, 8, rng)
    tr = ReprTrainer(enc, ws, feats)
    trip = preference_triplets(small_ds)
    batch = TripletBatch(trip.pos[:16], trip.neg[:16], trip.target[:16])
    e0, w0 = _snap(enc), _snap(ws)
    tr.step(batch, "encoder")
    assert _same(w0, _snap(ws)) and not _same(e0, _snap(enc))
    e1 = _snap(enc)
    tr.step(batch, "optimal")
    assert _same(e1, _snap(enc)) and not _same(w0, _snap(ws))


def test_step_rejects_unknown_task_and_phase(small_ds):
    feats = segment_features(small_ds.segments)
    tr = ReprTrainer(TrajectoryEncoder(16, 4, 8), OptimalRepresentations(3, 4), feats)
    with pytest.raises(ValueError):
        tr.step(TripletBatch(np.array([0]), np.array([1]), np.array([5])), "encoder")
    with pytest.raises(ValueError):
        tr.step(TripletBatch(np.array([0]), np.array([1]), np.array([0])), "both")


def test_ties_dropped_from_triplets():
    ds = build_dataset(m=2, episodes_per_task=3, pairs_per_task=20, seed=0)
    trip = preference_triplets(ds)
    assert len(trip.pos) == sum(p.label != 0.5 for p in ds.pairs)


def test_trained_means_closer_for_positives(trained_repr):
    ds, enc, ws = trained_repr
    ho = build_dataset(m=3, episodes_per_task=20, pairs_per_task=300, seed=123)
    e = enc.encode(ho.segments)
    trip = preference_triplets(ho)
    for t in range(3):
        sel = trip.target == t
        dp = np.linalg.norm(e.mean[trip.pos[sel]] - ws.mu.data[t], axis=1).mean()
        dn = np.linalg.norm(e.mean[trip.neg[sel]] - ws.mu.data[t], axis=1).mean()
        assert dp < dn


# ------------------------------------------------------------ new tasks

def test_new_task_frozen_keeps_existing(trained_repr):
    ds, enc, ws = trained_repr
    tasks = make_tasks(3) + [task_at_angle(3, np.pi / 3)]
    new = build_dataset(episodes_per_task=20, pairs_per_task=200, seed=9, tasks=tasks, target_tasks=[3])
    enc2, ext = train_new_task_repr(enc, ws, new, 3, steps=100, mode="frozen")
    np.testing.assert_array_equal(ext.mu.data[:3], ws.mu.data)
    np.testing.assert_array_equal(ext.log_var.data[:3], ws.log_var.data)
    assert _same(_snap(enc2), _snap(enc))
    assert not np.array_equal(ext.mu.data[3], 0.0)


def test_new_task_errors(trained_repr):
    ds, enc, ws = trained_repr
    with pytest.raises(ValueError):
        train_new_task_repr(enc, ws, ds, 3, steps=1)   # no pairs target task 3
    with pytest.raises(ValueError):
        train_new_task_repr(enc, ws, ds, 5, steps=1)
    with pytest.raises(ValueError):
        train_new_task_repr(enc, ws, ds, 3, steps=1, mode="other")


def test_duplicate_task_lands_on_original(trained_repr):
    ds, enc, ws = trained_repr
    dup = task_at_angle(3, 0.0)   # same goal as task 0
    others = make_tasks(3)[1:]
    new = build_dataset(episodes_per_task=60, pairs_per_task=1000, seed=21, tasks=[dup] + others, target_tasks=[3])
    _, ext = train_new_task_repr(enc, ws, new, 3, steps=1500, mode="frozen", seed=2)
    mu = ws.mu.data
    inter = np.mean([np.linalg.norm(mu[i] - mu[j]) for i in range(3) for j in range(i + 1, 3)])
    assert np.linalg.norm(ext.mu.data[3] - mu[0]) < 0.1 * inter


def test_between_goal_task_is_separable_after_relearning(trained_repr):
    ds, enc, ws = trained_repr
    tasks = make_tasks(3) + [task_at_angle(3, np.pi / 3)]
    new = build_dataset(episodes_per_task=60, pairs_per_task=1000, seed=31, tasks=tasks, target_tasks=[3])
    replay = build_dataset(m=3, episodes_per_task=40, pairs_per_task=300, seed=32)
    enc2, ext = train_new_task_repr(enc, ws, new, 3, steps=800, mode="warm", replay=replay, seed=3)
    train_ho = build_dataset(episodes_per_task=30, pairs_per_task=2, seed=41, tasks=tasks, target_tasks=[0])
    test_ho = build_dataset(episodes_per_task=30, pairs_per_task=2, seed=42, tasks=tasks, target_tasks=[0])
    a, b = enc2.encode(train_ho.segments), enc2.encode(test_ho.segments)
    tid = test_ho.task_ids()
    classes = np.unique(train_ho.task_ids())
    cents = np.stack([a.mean[train_ho.task_ids() == c].mean(0) for c in classes])
    pred = classes[np.argmin(((b.mean[:, None] - cents[None]) ** 2).sum(-1), axis=1)]
    assert np.mean(pred[tid == 3] == 3) >= 0.8
