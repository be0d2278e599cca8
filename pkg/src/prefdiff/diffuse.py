"""Conditional DDPM over state sequences with classifier-free guidance.

Trajectories are flattened ``(h+1) * state_dim`` vectors in normalised
coordinates. Training draws ``k ~ U{1..K}``, ``eps ~ N(0, I)`` and a dropout
flag ``beta ~ Bernoulli(p)`` per sample; dropped samples see the learned null
embedding instead of the condition. The MI regulariser feeds the predicted
noise to a variational predictor ``q_phi`` and penalises
``KL(p_psi(w) || q_phi(w | eps_theta))``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ndgrad as nd
from .ndgrad import Adam, Rng, Tensor
from .nn import Linear, MLP, Module, gaussian_head
from .prefrep import LOG_VAR_MAX, LOG_VAR_MIN, kl_diag_gauss


# ------------------------------------------------------------------ schedule

@dataclass(frozen=True, eq=False)
class DiffusionSchedule:
    alphas: np.ndarray
    alpha_bars: np.ndarray
    kind: str = "cosine"
    posterior_var: np.ndarray = field(init=False)
    likelihood_var: np.ndarray = field(init=False)

    def __post_init__(self):
        a, ab = np.asarray(self.alphas, float), np.asarray(self.alpha_bars, float)
        if a.ndim != 1 or a.shape != ab.shape or len(a) < 2:
            raise ValueError("schedule needs matching alpha / alpha_bar vectors of length >= 2")
        if np.any(a <= 0) or np.any(a > 1):
            raise ValueError("alphas must lie in (0, 1]")
        if np.any(np.diff(ab) >= 0):
            raise ValueError("alpha_bar must be strictly decreasing")
        if np.max(np.abs(ab - np.cumprod(a))) > 1e-12:
            raise ValueError("alpha_bar is not the running product of alphas")
        if ab[-1] >= 1e-3:
            raise ValueError(f"alpha_bar_K = {ab[-1]:.3g} leaves too much signal (need < 1e-3)")
        prev = np.concatenate([[1.0], ab[:-1]])
        post = (1.0 - prev) / (1.0 - ab) * (1.0 - a)
        lik = post.copy()
        lik[0] = 1.0 - a[0]
        object.__setattr__(self, "alphas", a)
        object.__setattr__(self, "alpha_bars", ab)
        object.__setattr__(self, "posterior_var", post)
        object.__setattr__(self, "likelihood_var", lik)

    @property
    def K(self) -> int:
        return len(self.alphas)

    def check_step(self, k) -> np.ndarray:
        k = np.asarray(k, dtype=np.int64)
        if np.any(k < 1) or np.any(k > self.K):
            raise ValueError(f"diffusion step outside [1, {self.K}]: {k.min()}..{k.max()}")
        return k

    def to_meta(self) -> dict:
        return {"kind": self.kind, "alphas": self.alphas.tolist(), "alpha_bars": self.alpha_bars.tolist()}

    @classmethod
    def from_meta(cls, meta: dict) -> "DiffusionSchedule":
        return cls(np.array(meta["alphas"]), np.array(meta["alpha_bars"]), meta.get("kind", "cosine"))


def make_schedule(K: int = 200, kind: str = "cosine", s: float = 0.008, max_beta: float = 0.999):
    """Cosine alpha-bar schedule with betas clipped at ``max_beta``."""
    if K < 2:
        raise ValueError(f"need K >= 2 diffusion steps, got {K}")
    if kind != "cosine":
        raise ValueError(f"unknown schedule kind {kind!r}")
    t = np.arange(K + 1) / K
    f = np.cos((t + s) / (1 + s) * np.pi / 2) ** 2
    betas = np.clip(1.0 - f[1:] / f[:-1], 0.0, max_beta)
    alphas = 1.0 - betas
    return DiffusionSchedule(alphas, np.cumprod(alphas), kind)


def q_sample(schedule: DiffusionSchedule, x0, k, eps) -> np.ndarray:
    """``sqrt(ab_k) x0 + sqrt(1 - ab_k) eps`` per row."""
    k = schedule.check_step(k)
    ab = schedule.alpha_bars[k - 1]
    x0, eps = np.asarray(x0, float), np.asarray(eps, float)
    if x0.shape != eps.shape:
        raise nd.ShapeError(f"q_sample: x0 {x0.shape} and noise {eps.shape} differ")
    if ab.ndim:
        ab = ab.reshape((-1,) + (1,) * (x0.ndim - 1))
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


# -------------------------------------------------------------------- models

def timestep_embedding(k, dim: int = 64) -> np.ndarray:
    k = np.asarray(k, dtype=np.float64).reshape(-1, 1)
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    ang = k * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


class NoisePredictor(Module):
    """MLP over [x_k, timestep embedding, condition embedding]."""

    def __init__(self, x_dim: int, cond_dim: int, rng: Rng, t_dim: int = 64, c_dim: int = 64,
                 hidden=(256, 256)):
        self.x_dim, self.cond_dim, self.t_dim, self.c_dim = x_dim, cond_dim, t_dim, c_dim
        self.hidden = tuple(hidden)
        self.cond_proj = Linear(max(cond_dim, 1), c_dim, rng)
        self.null = nd.parameter(0.1 * rng.normal(c_dim))
        self.net = MLP([x_dim + t_dim + c_dim, *hidden, x_dim], rng)

    def cond_embedding(self, cond, drop):
        n = len(drop)
        keep = (1.0 - np.asarray(drop, dtype=np.float64)).reshape(n, 1)
        if cond is None:
            cond = np.zeros((n, max(self.cond_dim, 1)))
        return self.cond_proj(cond) * keep + nd.reshape(self.null, (1, self.c_dim)) * (1.0 - keep)

    def __call__(self, x_k, k, cond=None, drop=None):
        x_k = nd.as_tensor(x_k)
        n = x_k.shape[0]
        if x_k.shape[1:] != (self.x_dim,):
            raise nd.ShapeError(f"noise predictor expects (batch, {self.x_dim}), got {x_k.shape}")
        if drop is None:
            drop = np.zeros(n, bool) if cond is not None else np.ones(n, bool)
        temb = timestep_embedding(k, self.t_dim)
        h = nd.concat([x_k, temb, self.cond_embedding(cond, drop)], axis=-1)
        return self.net(h)

    def config(self) -> dict:
        return dict(x_dim=self.x_dim, cond_dim=self.cond_dim, t_dim=self.t_dim, c_dim=self.c_dim,
                    hidden=list(self.hidden))


class CondPredictor(Module):
    """q_phi(w | eps_theta): predicted noise -> diagonal Gaussian over w."""

    def __init__(self, x_dim: int, w_dim: int, rng: Rng, hidden=(128, 128)):
        self.x_dim, self.w_dim, self.hidden = x_dim, w_dim, tuple(hidden)
        self.net = MLP([x_dim, *hidden, 2 * w_dim], rng)

    def __call__(self, x):
        return gaussian_head(self.net(x), self.w_dim, LOG_VAR_MIN, LOG_VAR_MAX)

    def config(self) -> dict:
        return dict(x_dim=self.x_dim, w_dim=self.w_dim, hidden=list(self.hidden))


# -------------------------------------------------------------------- losses

@dataclass
class NoiseDraw:
    k: np.ndarray
    eps: np.ndarray
    drop: np.ndarray


def draw_noise(rng: Rng, n: int, x_dim: int, K: int, p: float) -> NoiseDraw:
    k = rng.integers(1, K + 1, n)
    eps = rng.normal((n, x_dim))
    drop = rng.bernoulli(p, n)
    return NoiseDraw(k, eps, drop)


def noisy_input(schedule, x0, draw: NoiseDraw, first_dim: int = 0) -> np.ndarray:
    """q_sample with the first ``first_dim`` entries reset to their clean values."""
    x_k = q_sample(schedule, x0, draw.k, draw.eps)
    if first_dim:
        x_k[:, :first_dim] = np.asarray(x0)[:, :first_dim]
    return x_k


def score_weight(schedule: DiffusionSchedule, k) -> np.ndarray:
    """Per-step coefficient ``(1-a_k)^2 / (2 s_k^2 (1-ab_k) a_k)`` of the weighted loss."""
    k = schedule.check_step(k)
    a, ab, var = schedule.alphas[k - 1], schedule.alpha_bars[k - 1], schedule.likelihood_var[k - 1]
    return (1 - a) ** 2 / (2 * var * (1 - ab) * a)


def _sm_from_prediction(eps_hat, draw: NoiseDraw, schedule=None, weighted: bool = False) -> Tensor:
    per = nd.sum(nd.square(nd.as_tensor(draw.eps) - eps_hat), axis=-1)
    if weighted:
        per = per * score_weight(schedule, draw.k)
    return nd.mean(per)


def score_matching_loss(theta: NoisePredictor, schedule: DiffusionSchedule, x0, cond, draw: NoiseDraw,
                        first_dim: int = 0, weighted: bool = False) -> Tensor:
    """Batch mean of ``||eps - eps_theta(x_k, cond or null, k)||^2``."""
    if len(x0) == 0:
        raise ValueError("score_matching_loss: empty batch")
    eps_hat = theta(noisy_input(schedule, x0, draw, first_dim), draw.k, cond, draw.drop)
    return _sm_from_prediction(eps_hat, draw, schedule, weighted)


def batch_prior(w_mu, w_lv):
    """Moment-matched Gaussian of the batch mixture of posteriors."""
    mu = np.asarray(w_mu).mean(axis=0, keepdims=True)
    var = np.exp(np.asarray(w_lv)).mean(axis=0, keepdims=True) + np.asarray(w_mu).var(axis=0, keepdims=True)
    n = len(w_mu)
    return np.repeat(mu, n, 0), np.repeat(np.clip(np.log(var), LOG_VAR_MIN, LOG_VAR_MAX), n, 0)


def mi_kl_term(phi: CondPredictor, eps_hat, w_mu, w_lv, prior: str = "posterior") -> Tensor:
    """Batch mean of ``KL(p_psi(w) || q_phi(w | eps_hat))``; ``w`` moments carry no gradient."""
    w_mu, w_lv = nd.detach(w_mu).data, nd.detach(w_lv).data
    if prior == "batch":
        w_mu, w_lv = batch_prior(w_mu, w_lv)
    elif prior != "posterior":
        raise ValueError(f"unknown MI prior estimator {prior!r}")
    q_mu, q_lv = phi(eps_hat)
    return nd.mean(kl_diag_gauss(w_mu, w_lv, q_mu, q_lv))


def combined_loss(theta, phi, schedule, x0, w_mu, w_lv, draw: NoiseDraw, zeta: float = 0.1,
                  first_dim: int = 0, weighted: bool = False, prior: str = "posterior", cond=None):
    """Score matching plus ``zeta`` times the MI KL term; returns (total, sm, mi).

    ``cond`` overrides the condition fed to ``theta`` (e.g. a noise-augmented
    copy); the MI target always uses the clean moments.
    """
    if zeta < 0:
        raise ValueError(f"zeta must be non-negative, got {zeta}")
    if len(x0) == 0:
        raise ValueError("combined_loss: empty batch")
    if cond is None:
        cond = np.concatenate([nd.detach(w_mu).data, nd.detach(w_lv).data], axis=-1)
    eps_hat = theta(noisy_input(schedule, x0, draw, first_dim), draw.k, cond, draw.drop)
    sm = _sm_from_prediction(eps_hat, draw, schedule, weighted)
    if zeta == 0:
        return sm, sm, None
    mi = mi_kl_term(phi, eps_hat, w_mu, w_lv, prior)
    return sm + mi * zeta, sm, mi


# ------------------------------------------------------------------ sampling

def guided_eps(theta: NoisePredictor, x_k, k, cond, guidance: float) -> np.ndarray:
    """``(1 - s) * eps_uncond + s * eps_cond``."""
    x_k = np.asarray(x_k, float)
    n = len(x_k)
    kk = np.broadcast_to(np.asarray(k), (n,))
    if cond is None:
        return theta(x_k, kk, None, np.ones(n, bool)).data
    both = theta(np.concatenate([x_k, x_k]), np.concatenate([kk, kk]),
                 np.concatenate([cond, cond]), np.concatenate([np.ones(n, bool), np.zeros(n, bool)])).data
    eps_u, eps_c = both[:n], both[n:]
    return (1.0 - guidance) * eps_u + guidance * eps_c


def posterior_step(schedule: DiffusionSchedule, x_k, k: int, eps_hat, z=None, clip_x0=None) -> np.ndarray:
    """DDPM ancestral step from x_k given a noise estimate; z is ignored at k = 1."""
    k = int(schedule.check_step(k))
    a, ab = schedule.alphas[k - 1], schedule.alpha_bars[k - 1]
    ab_prev = schedule.alpha_bars[k - 2] if k > 1 else 1.0
    with np.errstate(over="ignore", invalid="ignore"):   # callers check finiteness
        x0_hat = (x_k - np.sqrt(1 - ab) * eps_hat) / np.sqrt(ab)
    if clip_x0 is not None:
        x0_hat = np.clip(x0_hat, -clip_x0, clip_x0)
    mean = (np.sqrt(ab_prev) * (1 - a) / (1 - ab)) * x0_hat + (np.sqrt(a) * (1 - ab_prev) / (1 - ab)) * x_k
    if k == 1:
        return mean
    return mean + np.sqrt(schedule.posterior_var[k - 1]) * z


def guided_denoise_step(theta, schedule, x_k, k: int, cond, guidance: float, z=None, clip_x0=None):
    eps_hat = guided_eps(theta, x_k, k, cond, guidance)
    if z is None:
        z = np.zeros_like(np.asarray(x_k, float))
    return posterior_step(schedule, np.asarray(x_k, float), k, eps_hat, z, clip_x0)


def sample_trajectory(theta: NoisePredictor, schedule: DiffusionSchedule, first_state, cond,
                      guidance: float = 1.2, seed: int = 0, n: int | None = None, clip_x0=None,
                      temperature: float = 1.0) -> np.ndarray:
    """Run the full reverse chain.

    ``first_state`` (``(n, d)`` or ``None``) is written into the leading slots
    of the sample before the chain and after every step. ``cond`` is
    ``(n, cond_dim)`` or ``None`` for unconditional sampling. ``temperature``
    scales the fresh noise injected at each reverse step (1 is ancestral
    sampling).
    """
    rng = Rng(seed)
    if first_state is not None:
        first_state = np.atleast_2d(np.asarray(first_state, float))
        n = len(first_state)
    elif cond is not None:
        n = len(cond)
    if n is None:
        raise ValueError("sample count unknown: pass first_state, cond or n")
    d = 0 if first_state is None else first_state.shape[1]
    with nd.no_tape():
        x = rng.normal((n, theta.x_dim))
        if d:
            x[:, :d] = first_state
        for k in range(schedule.K, 0, -1):
            z = temperature * rng.normal((n, theta.x_dim)) if k > 1 else None
            try:
                x = guided_denoise_step(theta, schedule, x, k, cond, guidance, z, clip_x0)
            except nd.NonFiniteError as exc:
                raise nd.NonFiniteError(f"non-finite sample at denoising step {k}: {exc}") from None
            if not np.isfinite(x).all():
                raise nd.NonFiniteError(f"non-finite sample at denoising step {k}")
            if d:
                x[:, :d] = first_state
    return x


# -------------------------------------------------------------- ELBO terms

def _gauss_kl_to_std(mean, var):
    return 0.5 * nd.sum(nd.square(mean) + var - 1.0 - np.log(var), axis=-1)


def elbo_terms(theta: NoisePredictor, schedule: DiffusionSchedule, x0, cond, w_mu, w_lv, eps_by_step,
               drop=None):
    """Single-sample estimates of the four ELBO terms of a conditional chain.

    ``eps_by_step[k-1]`` is the noise that generates ``x_k`` from ``x0``.
    Returns batch means of: reconstruction ``log p(x0 | x1, c)``, prior
    matching for ``x_K``, prior matching for ``c`` and the summed denoising
    matching KLs for ``k = 2..K``.
    """
    x0 = np.asarray(x0, float)
    n, dim = x0.shape
    K = schedule.K

    def mu_theta(x_k, k, eps_hat):
        a, ab = schedule.alphas[k - 1], schedule.alpha_bars[k - 1]
        return (nd.as_tensor(x_k) - eps_hat * ((1 - a) / np.sqrt(1 - ab))) * (1.0 / np.sqrt(a))

    x1 = q_sample(schedule, x0, np.full(n, 1), eps_by_step[0])
    eps1 = theta(x1, np.full(n, 1), cond, drop)
    var1 = schedule.likelihood_var[0]
    resid = nd.as_tensor(x0) - mu_theta(x1, 1, eps1)
    recon = nd.mean(nd.sum(nd.square(resid), axis=-1) * (-0.5 / var1)
                    - 0.5 * dim * np.log(2 * np.pi * var1))

    abK = schedule.alpha_bars[-1]
    prior_x = nd.mean(_gauss_kl_to_std(Tensor(np.sqrt(abK) * x0), np.full((n, dim), 1 - abK)))
    prior_c = nd.mean(kl_diag_gauss(w_mu, w_lv, np.zeros_like(w_mu), np.zeros_like(w_lv)))

    denoise = Tensor(0.0)
    for k in range(2, K + 1):
        x_k = q_sample(schedule, x0, np.full(n, k), eps_by_step[k - 1])
        a, ab, ab_prev = schedule.alphas[k - 1], schedule.alpha_bars[k - 1], schedule.alpha_bars[k - 2]
        mu_q = (np.sqrt(ab_prev) * (1 - a) / (1 - ab)) * x0 + (np.sqrt(a) * (1 - ab_prev) / (1 - ab)) * x_k
        eps_k = theta(x_k, np.full(n, k), cond, drop)
        var = schedule.posterior_var[k - 1]
        denoise = denoise + nd.mean(nd.sum(nd.square(mu_theta(x_k, k, eps_k) - mu_q), axis=-1) * (0.5 / var))
    return {"reconstruction": recon, "prior_xK": prior_x, "prior_c": prior_c, "denoising": denoise}


# ----------------------------------------------------------------- training

class DiffusionTrainer:
    def __init__(self, theta: NoisePredictor, phi: CondPredictor, schedule: DiffusionSchedule,
                 lr: float = 2e-4, zeta: float = 0.1, dropout: float = 0.25, first_dim: int = 0,
                 weighted: bool = False, prior: str = "posterior", phi_lr: float | None = None,
                 cond_noise: tuple = (0.0, 0.0), ema_decay: float = 0.0):
        if not 0.0 <= ema_decay < 1.0:
            raise ValueError(f"ema_decay must lie in [0, 1), got {ema_decay}")
        if zeta < 0:
            raise ValueError("zeta must be non-negative")
        if min(cond_noise) < 0:
            raise ValueError("cond_noise scales must be non-negative")
        self.cond_noise = tuple(cond_noise)
        self.theta, self.phi, self.schedule = theta, phi, schedule
        self.zeta, self.dropout, self.first_dim = zeta, dropout, first_dim
        self.weighted, self.prior = weighted, prior
        self.theta_opt = Adam(theta.parameters(), lr=lr)
        self.phi_opt = Adam(phi.parameters(), lr=lr if phi_lr is None else phi_lr)
        self.ema_decay = ema_decay
        self.ema = [p.data.copy() for p in self.theta_opt.params] if ema_decay else None

    def step(self, x0, w_mu, w_lv, rng: Rng) -> dict:
        draw = draw_noise(rng, len(x0), self.theta.x_dim, self.schedule.K, self.dropout)
        cond = None
        if max(self.cond_noise) > 0:
            # mean and log-variance halves get separate noise scales
            s_mu, s_lv = self.cond_noise
            cond = np.concatenate([w_mu + s_mu * rng.normal(np.shape(w_mu)),
                                   w_lv + s_lv * rng.normal(np.shape(w_lv))], axis=-1)
        with nd.Tape() as tape:
            total, sm, mi = combined_loss(self.theta, self.phi, self.schedule, x0, w_mu, w_lv, draw,
                                          self.zeta, self.first_dim, self.weighted, self.prior, cond)
            params = self.theta_opt.params + (self.phi_opt.params if mi is not None else [])
            grads = tape.backward(total, params)
        self.theta_opt.apply(grads[:len(self.theta_opt.params)])
        if mi is not None:
            self.phi_opt.apply(grads[len(self.theta_opt.params):])
        if self.ema is not None:
            d = self.ema_decay
            for avg, p in zip(self.ema, self.theta_opt.params):
                avg *= d
                avg += (1.0 - d) * p.data
        out = {"score_matching": float(sm.data)}
        if mi is not None:
            out["mi_kl"] = float(mi.data)
        return out


    def use_ema(self) -> None:
        """Overwrite the denoiser weights with their running average (no-op without EMA)."""
        if self.ema is not None:
            for avg, p in zip(self.ema, self.theta_opt.params):
                p.data[...] = avg


def fit_cond_predictor(phi: CondPredictor, make_batch, steps: int, lr: float = 1e-3, seed: int = 0) -> list:
    """Fit ``phi`` alone by minimising the KL term on batches from ``make_batch(rng)``."""
    rng = Rng(seed)
    opt = Adam(phi.parameters(), lr=lr)
    hist = []
    for _ in range(steps):
        inputs, w_mu, w_lv = make_batch(rng)
        with nd.Tape() as tape:
            loss = mi_kl_term(phi, inputs, w_mu, w_lv)
            opt.apply(tape.backward(loss, opt.params))
        hist.append(float(loss.data))
    return hist


def predicted_noise(theta: NoisePredictor, schedule, x0, cond, draw: NoiseDraw, first_dim: int = 0):
    """eps_theta on noised inputs without recording on any tape."""
    with nd.no_tape():
        return theta(noisy_input(schedule, x0, draw, first_dim), draw.k, cond, draw.drop).data
