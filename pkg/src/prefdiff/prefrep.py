"""Gaussian trajectory embeddings and per-task optimal representations.

The encoder maps a segment to a diagonal Gaussian ``N(mu, diag(exp(log_var)))``.
Training alternates two phases on each batch of preference triplets
``(positive, negative, target task)``: the encoder phase updates the encoder
with the optimal representations held fixed, and the optimal phase updates
the optimal representations with the encoder held fixed. Both phases
minimise the KL loss ``KL(pos||opt) + 1/(KL(neg||opt) + eps)`` plus the
triplet hinge on embedding means.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ndgrad as nd
from .envgen import OfflineDataset, TrajectorySegment
from .ndgrad import Adam, Rng, Tensor
from .nn import Linear, Module, gaussian_head

LOG_VAR_MIN = -10.0
LOG_VAR_MAX = 4.0
EPS_RECIP = 1e-4


@dataclass(frozen=True)
class GaussianEmbedding:
    mean: np.ndarray
    log_var: np.ndarray

    def __post_init__(self):
        if np.shape(self.mean) != np.shape(self.log_var):
            raise nd.ShapeError(f"mean {np.shape(self.mean)} and log_var {np.shape(self.log_var)} differ")

    @property
    def dim(self) -> int:
        return int(np.shape(self.mean)[-1])

    def condition(self) -> np.ndarray:
        """The ``[mean, log_var]`` vector handed to the diffusion model."""
        return np.concatenate([self.mean, self.log_var], axis=-1)


# -------------------------------------------------------------------- losses

def kl_diag_gauss(p_mu, p_lv, q_mu, q_lv) -> Tensor:
    """KL(p || q) for diagonal Gaussians, summed over the last axis."""
    p_mu, p_lv, q_mu, q_lv = (nd.as_tensor(t) for t in (p_mu, p_lv, q_mu, q_lv))
    if p_mu.shape[-1] != q_mu.shape[-1] or p_lv.shape != p_mu.shape or q_lv.shape[-1] != q_mu.shape[-1]:
        raise nd.ShapeError(f"kl_diag_gauss: dimension mismatch {p_mu.shape} vs {q_mu.shape}")
    var_ratio = nd.exp(p_lv - q_lv)
    maha = nd.square(p_mu - q_mu) * nd.exp(nd.neg(q_lv))
    return nd.sum(q_lv - p_lv + var_ratio + maha - 1.0, axis=-1) * 0.5


def kl_embeddings(p: GaussianEmbedding, q: GaussianEmbedding) -> float:
    if p.dim != q.dim:
        raise nd.ShapeError(f"kl_diag_gauss: dimension mismatch {p.dim} vs {q.dim}")
    return float(kl_diag_gauss(p.mean, p.log_var, q.mean, q.log_var).data)


def repr_kl_loss(pos, neg, opt, eps_recip: float = EPS_RECIP) -> Tensor:
    """``KL(pos||opt) + 1/(KL(neg||opt) + eps_recip)``; arguments are (mu, log_var) pairs."""
    kl_pos = kl_diag_gauss(*pos, *opt)
    kl_neg = kl_diag_gauss(*neg, *opt)
    return kl_pos + nd.div(1.0, kl_neg + eps_recip)


def euclidean(a, b) -> Tensor:
    return nd.sqrt(nd.sum(nd.square(nd.as_tensor(a) - nd.as_tensor(b)), axis=-1))


def triplet_loss(pos_mean, neg_mean, opt_mean, delta: float = 1.0) -> Tensor:
    if delta <= 0:
        raise ValueError("triplet margin must be positive")
    return nd.relu(euclidean(pos_mean, opt_mean) - euclidean(neg_mean, opt_mean) + delta)


# -------------------------------------------------------------------- models

def segment_features(segments: list[TrajectorySegment], a_max: float = 0.25) -> np.ndarray:
    """Per-step ``[s_t, a_t / a_max, r_t]`` stacked to ``(n, h, 5)``."""
    return np.stack([np.concatenate([s.states[:-1], s.actions / a_max, s.rewards[:, None]], axis=1)
                     for s in segments])


class TrajectoryEncoder(Module):
    """Per-step embedding, learned positions, one self-attention mix, mean pool."""

    def __init__(self, h: int, w_dim: int = 16, d_model: int = 64, in_dim: int = 5,
                 rng: Rng | None = None, feature_mean=None, feature_std=None):
        rng = rng or Rng(0)
        self.h, self.w_dim, self.d_model, self.in_dim = h, w_dim, d_model, in_dim
        self.embed = Linear(in_dim, d_model, rng)
        self.pos = nd.parameter(0.1 * rng.normal((h, d_model)))
        self.wq = Linear(d_model, d_model, rng)
        self.wk = Linear(d_model, d_model, rng)
        self.wv = Linear(d_model, d_model, rng)
        self.ff = Linear(d_model, d_model, rng)
        self.pool = Linear(d_model, d_model, rng)
        self.head = Linear(d_model, 2 * w_dim, rng)
        self.feature_mean = np.zeros(in_dim) if feature_mean is None else np.asarray(feature_mean, float)
        self.feature_std = np.ones(in_dim) if feature_std is None else np.asarray(feature_std, float)

    def set_normalization(self, features: np.ndarray) -> None:
        flat = features.reshape(-1, features.shape[-1])
        self.feature_mean = flat.mean(axis=0)
        self.feature_std = flat.std(axis=0) + 1e-6

    def __call__(self, features):
        x = np.asarray(features, dtype=np.float64)
        if x.ndim != 3 or x.shape[1:] != (self.h, self.in_dim):
            raise nd.ShapeError(f"encoder expects (batch, {self.h}, {self.in_dim}) features, got {x.shape}")
        x = Tensor((x - self.feature_mean) / self.feature_std)
        e = nd.tanh(self.embed(x)) + self.pos
        att = nd.softmax(nd.matmul(self.wq(e), nd.transpose(self.wk(e))) * (1.0 / np.sqrt(self.d_model)))
        e = e + nd.matmul(att, self.wv(e))
        e = e + nd.tanh(self.ff(e))
        pooled = nd.tanh(self.pool(nd.mean(e, axis=1)))
        return gaussian_head(self.head(pooled), self.w_dim, LOG_VAR_MIN, LOG_VAR_MAX)

    def encode(self, segments: list[TrajectorySegment], a_max: float = 0.25) -> GaussianEmbedding:
        mu, lv = self(segment_features(segments, a_max))
        return GaussianEmbedding(mu.data, lv.data)

    def encode_features(self, features: np.ndarray, batch: int = 512) -> GaussianEmbedding:
        mus, lvs = [], []
        for i in range(0, len(features), batch):
            mu, lv = self(features[i:i + batch])
            mus.append(mu.data)
            lvs.append(lv.data)
        return GaussianEmbedding(np.concatenate(mus), np.concatenate(lvs))

    def config(self) -> dict:
        return dict(h=self.h, w_dim=self.w_dim, d_model=self.d_model, in_dim=self.in_dim,
                    feature_mean=self.feature_mean.tolist(), feature_std=self.feature_std.tolist())


class OptimalRepresentations(Module):
    """One trainable Gaussian ``w*_i`` per task."""

    def __init__(self, m: int, w_dim: int = 16, rng: Rng | None = None):
        rng = rng or Rng(0)
        self.m, self.w_dim = m, w_dim
        self.mu = nd.parameter(0.1 * rng.normal((m, w_dim)))
        self.log_var = nd.parameter(np.zeros((m, w_dim)))

    def rows(self, task_ids):
        tids = np.asarray(task_ids, dtype=np.int64)
        if tids.size and (tids.min() < 0 or tids.max() >= self.m):
            raise ValueError(f"unknown task id in batch (have {self.m} tasks): {sorted(set(tids.tolist()))}")
        return (nd.take_rows(self.mu, tids),
                nd.clip(nd.take_rows(self.log_var, tids), LOG_VAR_MIN, LOG_VAR_MAX))

    def embedding(self, task_id: int) -> GaussianEmbedding:
        mu, lv = self.rows([task_id])
        return GaussianEmbedding(mu.data[0], lv.data[0])

    def condition(self, task_id: int) -> np.ndarray:
        return self.embedding(task_id).condition()


# ------------------------------------------------------------------ training

@dataclass
class TripletBatch:
    pos: np.ndarray
    neg: np.ndarray
    target: np.ndarray


def preference_triplets(ds: OfflineDataset) -> TripletBatch:
    """(preferred, other, target) index triplets; ties carry no order and are dropped."""
    rows = [(p.first, p.second, p.target_task) if p.label == 1.0 else (p.second, p.first, p.target_task)
            for p in ds.pairs if p.label != 0.5]
    arr = np.array(rows, dtype=np.int64).reshape(-1, 3)
    return TripletBatch(arr[:, 0], arr[:, 1], arr[:, 2])


class ReprTrainer:
    def __init__(self, encoder: TrajectoryEncoder, wstar: OptimalRepresentations, features: np.ndarray,
                 lr: float = 1e-3, delta: float = 1.0, kl_weight: float = 1.0,
                 triplet_weight: float = 1.0, eps_recip: float = EPS_RECIP, train_encoder: bool = True,
                 wstar_params=None):
        self.encoder, self.wstar, self.features = encoder, wstar, features
        self.delta, self.kl_weight, self.triplet_weight, self.eps_recip = delta, kl_weight, triplet_weight, eps_recip
        self.enc_opt = Adam(encoder.parameters(), lr=lr) if train_encoder else None
        self.opt_opt = Adam(wstar.parameters() if wstar_params is None else wstar_params, lr=lr)

    def _losses(self, batch: TripletBatch, phase: str):
        n = len(batch.pos)
        feats = self.features[np.concatenate([batch.pos, batch.neg])]
        if phase == "encoder":
            mu, lv = self.encoder(feats)
            opt = tuple(nd.detach(t) for t in self.wstar.rows(batch.target))
        else:
            with nd.no_tape():
                mu, lv = self.encoder(feats)
            mu, lv = nd.detach(mu), nd.detach(lv)
            opt = self.wstar.rows(batch.target)
        pos = (nd.take_rows(mu, np.arange(n)), nd.take_rows(lv, np.arange(n)))
        neg = (nd.take_rows(mu, np.arange(n, 2 * n)), nd.take_rows(lv, np.arange(n, 2 * n)))
        kl = nd.mean(repr_kl_loss(pos, neg, opt, self.eps_recip))
        trip = nd.mean(triplet_loss(pos[0], neg[0], opt[0], self.delta))
        return kl, trip

    def step(self, batch: TripletBatch, phase: str) -> dict:
        if phase not in ("encoder", "optimal"):
            raise ValueError(f"unknown phase {phase!r}")
        if np.any(batch.target >= self.wstar.m) or np.any(batch.target < 0):
            raise ValueError(f"unknown task id in batch (have {self.wstar.m} tasks)")
        opt = self.enc_opt if phase == "encoder" else self.opt_opt
        if opt is None:
            raise ValueError("encoder is frozen; only the optimal phase is available")
        with nd.Tape() as tape:
            kl, trip = self._losses(batch, phase)
            loss = kl * self.kl_weight + trip * self.triplet_weight
            opt.apply(tape.backward(loss, opt.params))
        return {"repr_kl": float(kl.data), "triplet": float(trip.data)}


def sample_triplets(trip: TripletBatch, batch_size: int, rng: Rng) -> TripletBatch:
    idx = rng.integers(0, len(trip.pos), batch_size)
    return TripletBatch(trip.pos[idx], trip.neg[idx], trip.target[idx])


def train_repr_step(trainer: ReprTrainer, batch: TripletBatch, phase: str) -> dict:
    return trainer.step(batch, phase)


def train_new_task_repr(encoder: TrajectoryEncoder, wstar: OptimalRepresentations, new_data: OfflineDataset,
                        new_task_id: int, steps: int = 1000, batch_size: int = 64, lr: float = 1e-3,
                        delta: float = 1.0, mode: str = "frozen", seed: int = 0, a_max: float = 0.25,
                        replay: OfflineDataset | None = None, init_from: int | None = None):
    """Learn ``w*_k`` for an unseen task ``k`` from new-task preference data.

    ``mode="frozen"`` keeps the encoder fixed and trains only the new row;
    ``mode="warm"`` also continues encoder training (optionally mixing in
    ``replay`` pairs). Returns ``(encoder, wstar_extended)``; the input
    objects are not modified.
    """
    if mode not in ("frozen", "warm"):
        raise ValueError(f"unknown mode {mode!r}")
    if new_task_id != wstar.m:
        raise ValueError(f"new task id must be {wstar.m}, got {new_task_id}")
    trip = preference_triplets(new_data)
    keep = trip.target == new_task_id
    trip = TripletBatch(trip.pos[keep], trip.neg[keep], trip.target[keep])
    if len(trip.pos) == 0:
        raise ValueError(f"no preference data for new task {new_task_id}")
    rng = Rng(seed)
    enc = TrajectoryEncoder(encoder.h, encoder.w_dim, encoder.d_model, encoder.in_dim,
                            feature_mean=encoder.feature_mean, feature_std=encoder.feature_std)
    enc.load_state_dict(encoder.state_dict())
    ext = OptimalRepresentations(wstar.m + 1, wstar.w_dim, rng)
    init = ext.state_dict()
    old = wstar.state_dict()
    for key in ("mu", "log_var"):
        init[key][: wstar.m] = old[key]
        if init_from is not None:
            init[key][wstar.m] = old[key][init_from]
    ext.load_state_dict(init)

    features = segment_features(new_data.segments, a_max)
    if replay is not None:
        offset = len(new_data.segments)
        rt = preference_triplets(replay)
        trip = TripletBatch(np.concatenate([trip.pos, rt.pos + offset]),
                            np.concatenate([trip.neg, rt.neg + offset]),
                            np.concatenate([trip.target, rt.target]))
        features = np.concatenate([features, segment_features(replay.segments, a_max)])

    if mode == "frozen":
        # only the new row may move: train it through a masked copy
        trainer = ReprTrainer(enc, ext, features, lr=lr, delta=delta, train_encoder=False)
        for _ in range(steps):
            before = {k: v.copy() for k, v in ext.state_dict().items()}
            trainer.step(sample_triplets(trip, batch_size, rng), "optimal")
            after = ext.state_dict()
            for k in after:
                after[k][: wstar.m] = before[k][: wstar.m]
            ext.load_state_dict(after)
    else:
        trainer = ReprTrainer(enc, ext, features, lr=lr, delta=delta)
        for _ in range(steps):
            b = sample_triplets(trip, batch_size, rng)
            trainer.step(b, "encoder")
            trainer.step(b, "optimal")
    return enc, ext
