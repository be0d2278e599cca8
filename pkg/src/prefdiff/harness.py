"""End-to-end orchestration: training loop, control evaluation, diagnostics.

A run directory looks like::

    run/
      config.cfg        effective configuration
      dataset.sha256    hash of the dataset file used
      metrics.csv       one row per log or eval event
      checkpoints/      CAMPCKPT files (step_<n>.campckpt, final.campckpt)
      plots/            SVG figures
"""
from __future__ import annotations

import csv
import io
import math
import os
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ndgrad as nd
from .analysis import line_svg, nearest_centroid_accuracy, pca_project, scatter_svg, spearman, PALETTE
from .analysis import triplet_satisfaction
from .config import RunConfig, serialize_config, parse_config
from .diffuse import (CondPredictor, DiffusionSchedule, DiffusionTrainer, NoisePredictor, fit_cond_predictor,
                      make_schedule, mi_kl_term, predicted_noise, draw_noise, q_sample, sample_trajectory)
from .envgen import OfflineDataset, PointMassTask, build_dataset, expert_action, make_tasks
from .invdyn import InverseDynamics, InvDynTrainer, heldout_mse
from .io import file_sha256, load_checkpoint, load_dataset, save_checkpoint
from .ndgrad import Rng, derive_seed
from .prefrep import (OptimalRepresentations, ReprTrainer, TrajectoryEncoder, kl_diag_gauss,
                      preference_triplets, sample_triplets, segment_features)

STATE_DIM = 2
METRIC_COLUMNS = ["step", "event", "repr_kl", "triplet", "score_matching", "mi_kl", "invdyn_mse",
                  "success_rate", "mean_return", "probe_accuracy", "triplet_satisfaction", "alignment_corr"]


class RunError(RuntimeError):
    pass


# ------------------------------------------------------------------ metrics

class RunMetrics:
    """Append-only metric records, optionally mirrored to a CSV file as they arrive."""

    def __init__(self, path=None):
        self.rows: list[dict] = []
        self.path = None if path is None else Path(path)
        if self.path is not None:
            self.path.write_text(",".join(METRIC_COLUMNS) + "\n", encoding="utf-8")

    def append(self, step: int, event: str, **values) -> None:
        if self.rows and step < self.rows[-1]["step"]:
            raise ValueError(f"metric step {step} goes backwards (last {self.rows[-1]['step']})")
        unknown = set(values) - set(METRIC_COLUMNS)
        if unknown:
            raise ValueError(f"unknown metric columns: {sorted(unknown)}")
        row = {"step": int(step), "event": event, **values}
        self.rows.append(row)
        if self.path is not None:
            with self.path.open("a", encoding="utf-8", newline="") as fh:
                fh.write(_csv_line(row))

    def column(self, name: str, event: str | None = None) -> np.ndarray:
        return np.array([r[name] for r in self.rows if name in r and (event is None or r["event"] == event)])

    def to_csv(self) -> str:
        return ",".join(METRIC_COLUMNS) + "\n" + "".join(_csv_line(r) for r in self.rows)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _csv_line(row: dict) -> str:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerow([_fmt(row.get(c)) for c in METRIC_COLUMNS])
    return buf.getvalue()


def read_metrics(path) -> list[dict]:
    """Rows of a metrics CSV with empty cells dropped and numbers parsed."""
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        for raw in csv.DictReader(fh):
            row = {k: v for k, v in raw.items() if v != ""}
            row["step"] = int(row["step"])
            for k in row:
                if k not in ("step", "event"):
                    row[k] = float(row[k])
            out.append(row)
    return out


# ------------------------------------------------------------------ pipeline

@dataclass
class Pipeline:
    """Every trained component plus the normalisation needed to use them."""

    config: RunConfig
    encoder: TrajectoryEncoder
    wstar: OptimalRepresentations
    theta: NoisePredictor
    phi: CondPredictor
    inv: InverseDynamics
    schedule: DiffusionSchedule
    state_mean: np.ndarray
    state_std: np.ndarray
    step: int = 0

    @property
    def m(self) -> int:
        return self.wstar.m

    def tasks(self) -> list[PointMassTask]:
        return make_tasks(self.m, self.config.horizon, self.config.dt)

    def normalize(self, states):
        return (np.asarray(states) - self.state_mean) / self.state_std

    def denormalize(self, states):
        return np.asarray(states) * self.state_std + self.state_mean

    def condition(self, task_id: int) -> np.ndarray:
        if not 0 <= task_id < self.m:
            raise ValueError(f"unknown task id {task_id} (have {self.m} tasks)")
        return self.wstar.condition(task_id)

    def segment_conditions(self, segments) -> np.ndarray:
        return self.encoder.encode(segments, self.config.a_max).condition()

    def tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for prefix, mod in (("encoder", self.encoder), ("wstar", self.wstar), ("theta", self.theta),
                            ("phi", self.phi), ("inv", self.inv)):
            out.update({f"{prefix}.{k}": v for k, v in mod.state_dict().items()})
        out["norm.state_mean"] = np.asarray(self.state_mean, float)
        out["norm.state_std"] = np.asarray(self.state_std, float)
        out["norm.feature_mean"] = np.asarray(self.encoder.feature_mean, float)
        out["norm.feature_std"] = np.asarray(self.encoder.feature_std, float)
        return out

    def save(self, path) -> None:
        meta = {"kind": "pipeline", "step": int(self.step), "m": self.m, "config": serialize_config(self.config),
                "schedule": self.schedule.to_meta()}
        save_checkpoint(path, self.tensors(), meta)


def build_pipeline(cfg: RunConfig, m: int, rng: Rng) -> Pipeline:
    x_dim = (cfg.h + 1) * STATE_DIM
    encoder = TrajectoryEncoder(cfg.h, cfg.w_dim, cfg.d_model, rng=rng)
    wstar = OptimalRepresentations(m, cfg.w_dim, rng)
    theta = NoisePredictor(x_dim, 2 * cfg.w_dim, rng)
    phi = CondPredictor(x_dim, cfg.w_dim, rng)
    inv = InverseDynamics(STATE_DIM, STATE_DIM, rng, a_max=cfg.a_max)
    return Pipeline(cfg, encoder, wstar, theta, phi, inv, make_schedule(cfg.K, cfg.schedule),
                    np.zeros(STATE_DIM), np.ones(STATE_DIM))


def load_pipeline(path) -> Pipeline:
    tensors, meta = load_checkpoint(path)
    if meta.get("kind") != "pipeline":
        raise RunError(f"{path}: not a pipeline checkpoint")
    cfg = parse_config(meta["config"])
    p = build_pipeline(cfg, int(meta["m"]), Rng(0))
    for prefix, mod in (("encoder", p.encoder), ("wstar", p.wstar), ("theta", p.theta), ("phi", p.phi),
                        ("inv", p.inv)):
        mod.load_state_dict({k[len(prefix) + 1:]: v for k, v in tensors.items() if k.startswith(prefix + ".")})
    p.encoder.feature_mean = tensors["norm.feature_mean"]
    p.encoder.feature_std = tensors["norm.feature_std"]
    p.state_mean, p.state_std = tensors["norm.state_mean"], tensors["norm.state_std"]
    p.schedule = DiffusionSchedule.from_meta(meta["schedule"])
    p.step = int(meta["step"])
    return p


def _flat_states(p: Pipeline, states) -> np.ndarray:
    s = p.normalize(states)
    return s.reshape(len(s), -1)


class _Window:
    """Running means of loss values between log events."""

    def __init__(self):
        self.sums: dict[str, float] = {}
        self.counts: dict[str, int] = {}

    def add(self, values: dict) -> None:
        for k, v in values.items():
            self.sums[k] = self.sums.get(k, 0.0) + v
            self.counts[k] = self.counts.get(k, 0) + 1

    def flush(self) -> dict:
        out = {k: self.sums[k] / self.counts[k] for k in self.sums}
        self.sums, self.counts = {}, {}
        return out


def train_pipeline(cfg: RunConfig, ds: OfflineDataset, metrics: RunMetrics | None = None,
                   checkpoint_dir=None, stages=("repr", "diffusion", "invdyn")) -> Pipeline:
    """Joint training in the per-batch order encoder, w*, diffusion, inverse dynamics.

    Each component runs for its own step budget; once the representation
    budget is spent the encoder is frozen and segment conditions are cached.
    """
    cfg.validate()
    ds.validate()
    if ds.h != cfg.h:
        raise RunError(f"dataset segment length {ds.h} does not match config h={cfg.h}")
    metrics = metrics if metrics is not None else RunMetrics()
    rng = Rng(derive_seed(cfg.seed, "train"))
    p = build_pipeline(cfg, ds.m, Rng(derive_seed(cfg.seed, "init")))
    feats = segment_features(ds.segments, cfg.a_max)
    p.encoder.set_normalization(feats)
    states = ds.states()
    p.state_mean = states.reshape(-1, STATE_DIM).mean(axis=0)
    p.state_std = states.reshape(-1, STATE_DIM).std(axis=0)
    x0_all = _flat_states(p, states)
    s, a, s2 = ds.transitions()

    trip = preference_triplets(ds)
    repr_steps = cfg.repr_steps if "repr" in stages else 0
    diff_steps = cfg.diff_steps if "diffusion" in stages else 0
    inv_steps = cfg.inv_steps if "invdyn" in stages else 0
    if repr_steps and len(trip.pos) == 0:
        raise RunError("dataset has no strict preference pairs to learn representations from")
    repr_tr = ReprTrainer(p.encoder, p.wstar, feats, lr=cfg.repr_lr, delta=cfg.delta, kl_weight=cfg.kl_weight,
                          triplet_weight=cfg.triplet_weight, eps_recip=cfg.eps_recip)
    diff_tr = DiffusionTrainer(p.theta, p.phi, p.schedule, lr=cfg.diff_lr, zeta=cfg.zeta,
                               dropout=cfg.cond_dropout, first_dim=STATE_DIM, weighted=cfg.weighted_loss,
                               prior=cfg.mi_prior, cond_noise=(cfg.cond_noise_mu, cfg.cond_noise_log_var),
                               ema_decay=cfg.ema_decay)
    inv_tr = InvDynTrainer(p.inv, lr=cfg.inv_lr)

    cache = None
    window = _Window()
    total = max(repr_steps, diff_steps, inv_steps)
    if checkpoint_dir is not None:
        p.save(Path(checkpoint_dir) / "step_0.campckpt")
    for t in range(1, total + 1):
        if t <= repr_steps:
            batch = sample_triplets(trip, cfg.repr_batch, rng)
            enc_losses = repr_tr.step(batch, "encoder")
            opt_losses = repr_tr.step(batch, "optimal")
            window.add({"repr_kl": enc_losses["repr_kl"], "triplet": opt_losses["triplet"]})
        if t <= diff_steps:
            idx = rng.integers(0, len(x0_all), cfg.diff_batch)
            if t > repr_steps:
                if cache is None:
                    cache = p.encoder.encode_features(feats)
                emb_mu, emb_lv = cache.mean[idx], cache.log_var[idx]
            else:
                emb = p.encoder.encode_features(feats[idx])
                emb_mu, emb_lv = emb.mean, emb.log_var
            window.add(diff_tr.step(x0_all[idx], emb_mu, emb_lv, rng))
        if t <= inv_steps:
            idx = rng.integers(0, len(s), cfg.inv_batch)
            window.add({"invdyn_mse": inv_tr.step(s[idx], a[idx], s2[idx])})
        p.step = t
        if t % cfg.log_every == 0 or t == total:
            metrics.append(t, "train", **window.flush())
        if checkpoint_dir is not None and cfg.checkpoint_every and t % cfg.checkpoint_every == 0:
            p.save(Path(checkpoint_dir) / f"step_{t}.campckpt")
    if diff_steps:
        diff_tr.use_ema()
    return p


# ------------------------------------------------------------------ run directory

@contextmanager
def run_lock(run_dir):
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    lock = run_dir / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise RunError(f"run directory {run_dir} is locked by another process ({lock})") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield run_dir
    finally:
        lock.unlink(missing_ok=True)


@dataclass
class RunResult:
    pipeline: Pipeline
    metrics: RunMetrics
    run_dir: Path
    dataset: OfflineDataset
    dataset_sha256: str


def run_training(cfg: RunConfig, run_dir=None) -> RunResult:
    """Train every component from ``cfg.dataset`` and lay out the run directory."""
    cfg.validate()
    if not cfg.dataset:
        raise RunError("no dataset path configured (set 'dataset')")
    if not Path(cfg.dataset).is_file():
        raise RunError(f"dataset file not found: {cfg.dataset}")
    ds = load_dataset(cfg.dataset)
    run_dir = Path(run_dir or cfg.run_dir)
    with run_lock(run_dir):
        (run_dir / "checkpoints").mkdir(exist_ok=True)
        (run_dir / "plots").mkdir(exist_ok=True)
        (run_dir / "config.cfg").write_text(serialize_config(cfg), encoding="utf-8")
        sha = file_sha256(cfg.dataset)
        (run_dir / "dataset.sha256").write_text(f"{sha}  {Path(cfg.dataset).name}\n", encoding="utf-8")
        metrics = RunMetrics(run_dir / "metrics.csv")
        p = train_pipeline(cfg, ds, metrics, run_dir / "checkpoints")
        p.save(run_dir / "checkpoints" / "final.campckpt")
        write_loss_plots(metrics, run_dir / "plots")
    return RunResult(p, metrics, run_dir, ds, sha)


def write_loss_plots(metrics: RunMetrics, plot_dir) -> list[Path]:
    out = []
    rows = [r for r in metrics.rows if r["event"] == "train"]
    for name in ("repr_kl", "triplet", "score_matching", "mi_kl", "invdyn_mse"):
        pts = [(r["step"], r[name]) for r in rows if name in r]
        if len(pts) < 2:
            continue
        xs, ys = zip(*pts)
        path = Path(plot_dir) / f"{name}.svg"
        path.write_text(line_svg(xs, ys, title=name, xlabel="step", ylabel=name), encoding="utf-8")
        out.append(path)
    return out


# ------------------------------------------------------------------ control

@dataclass
class ControlResult:
    success_rate: float
    mean_return: float
    returns: np.ndarray
    final_distance: np.ndarray

    @property
    def return_ci(self) -> float:
        """Half-width of a normal-approximation 95% interval on the mean return."""
        n = len(self.returns)
        return 1.96 * float(np.std(self.returns, ddof=1)) / math.sqrt(n) if n > 1 else math.inf


def episode_starts(seed: int, task_id: int, n: int) -> np.ndarray:
    return np.stack([Rng(derive_seed(seed, "episode", task_id, e)).uniform(STATE_DIM, -1.0, 1.0)
                     for e in range(n)])


def _summarize(task: PointMassTask, rewards: np.ndarray, final: np.ndarray, threshold: float) -> ControlResult:
    dist = np.linalg.norm(final - np.asarray(task.goal), axis=1)
    returns = rewards.sum(axis=1)
    return ControlResult(float(np.mean(dist < threshold)), float(returns.mean()), returns, dist)


def run_policy(task: PointMassTask, policy, starts: np.ndarray, threshold: float = 0.1) -> ControlResult:
    """Batched closed-loop rollout of ``policy(pos, t) -> actions`` over all starts."""
    pos = np.array(starts, dtype=np.float64)
    goal = np.asarray(task.goal)
    rewards = np.empty((len(pos), task.horizon))
    for t in range(task.horizon):
        pos = pos + task.dt * np.asarray(policy(pos, t), dtype=np.float64)
        if not np.isfinite(pos).all():
            raise nd.NonFiniteError(f"non-finite state at env step {t + 1}")
        rewards[:, t] = -np.linalg.norm(pos - goal, axis=1)
    return _summarize(task, rewards, pos, threshold)


def planner_policy(p: Pipeline, cond: np.ndarray, seed: int, guidance: float | None = None):
    """Receding-horizon policy: replan a full segment at every env step, act on its first transition."""
    guidance = p.config.guidance if guidance is None else guidance
    cond = np.asarray(cond, dtype=np.float64)

    def policy(pos, t):
        c = np.repeat(cond[None], len(pos), 0) if cond.ndim == 1 else cond
        if p.config.sample_condition:
            c = _sample_condition(c, Rng(derive_seed(seed, "cond", t)))
        x = sample_trajectory(p.theta, p.schedule, p.normalize(pos), c, guidance,
                              seed=derive_seed(seed, "plan", t), clip_x0=p.config.clip_x0 or None,
                              temperature=p.config.plan_temperature)
        plan = p.denormalize(x.reshape(len(pos), -1, STATE_DIM))
        return p.inv.predict_action(pos, plan[:, 1])

    return policy


def _sample_condition(cond: np.ndarray, rng: Rng) -> np.ndarray:
    d = cond.shape[1] // 2
    w = cond[:, :d] + np.exp(0.5 * cond[:, d:]) * rng.normal((len(cond), d))
    return np.concatenate([w, cond[:, d:]], axis=1)


def evaluate_control(p: Pipeline, task_id: int, episodes: int | None = None, seed: int = 0,
                     cond=None, guidance: float | None = None) -> ControlResult:
    """Success rate and mean return on task ``task_id``.

    The planner is conditioned on ``w*_task_id`` unless ``cond`` (a condition
    vector, or an int naming another task's ``w*``) is given.
    """
    tasks = p.tasks()
    if not 0 <= task_id < len(tasks):
        raise ValueError(f"unknown task id {task_id} (have {len(tasks)} tasks)")
    if cond is None:
        cond = p.condition(task_id)
    elif isinstance(cond, (int, np.integer)):
        cond = p.condition(int(cond))
    n = episodes or p.config.eval_episodes
    starts = episode_starts(seed, task_id, n)
    return run_policy(tasks[task_id], planner_policy(p, cond, seed, guidance), starts, p.config.success_threshold)


def expert_baseline(task: PointMassTask, episodes: int = 50, seed: int = 0, kappa: float = 0.5,
                    a_max: float = 0.25, threshold: float = 0.1) -> ControlResult:
    starts = episode_starts(seed, task.task_id, episodes)
    return run_policy(task, lambda pos, t: expert_action(pos, task.goal, kappa, a_max), starts, threshold)


def random_baseline(task: PointMassTask, episodes: int = 50, seed: int = 0, a_max: float = 0.25,
                    threshold: float = 0.1) -> ControlResult:
    starts = episode_starts(seed, task.task_id, episodes)
    rng = Rng(derive_seed(seed, "random-policy", task.task_id))
    return run_policy(task, lambda pos, t: rng.uniform(pos.shape, -a_max, a_max), starts, threshold)


# ------------------------------------------------------------------ alignment

@dataclass
class AlignmentResult:
    task_id: int
    coefficients: np.ndarray
    mean_returns: np.ndarray
    success_rates: np.ndarray
    spearman: float

    def to_csv(self) -> str:
        lines = ["coefficient,mean_return,success_rate"]
        lines += [f"{c!r},{r!r},{s!r}" for c, r, s in zip(self.coefficients.tolist(), self.mean_returns.tolist(),
                                                            self.success_rates.tolist())]
        return "\n".join(lines) + "\n"


def heldout_dataset(cfg: RunConfig, m: int, episodes_per_task: int = 20, pairs_per_task: int = 200):
    """Fresh data from an independent seed for held-out diagnostics."""
    return build_dataset(m, episodes_per_task, cfg.quality_mix, pairs_per_task,
                         seed=derive_seed(cfg.seed, "heldout"), h=cfg.h, horizon=cfg.horizon, dt=cfg.dt,
                         a_max=cfg.a_max, kappa=cfg.kappa)


def low_return_condition(p: Pipeline, heldout: OfflineDataset, task_id: int) -> np.ndarray:
    tid = heldout.task_ids()
    idx = np.flatnonzero(tid == task_id)
    if len(idx) == 0:
        raise ValueError(f"held-out data has no segments for task {task_id}")
    worst = idx[np.argmin(heldout.returns()[idx])]
    return p.segment_conditions([heldout.segments[worst]])[0]


def alignment_sweep(p: Pipeline, task_id: int, low_cond=None, coefficients=(0.0, 0.25, 0.5, 0.75, 1.0),
                    episodes: int | None = None, seed: int = 0, heldout: OfflineDataset | None = None,
                    plot_path=None) -> AlignmentResult:
    """Realized return along the line from a low-return embedding to ``w*_task_id``."""
    coefs = np.asarray(coefficients, dtype=np.float64)
    if coefs.size < 2 or np.unique(coefs).size < 2:
        raise ValueError("alignment grid needs at least two distinct coefficients")
    target = p.condition(task_id)
    if low_cond is None:
        low_cond = low_return_condition(p, heldout or heldout_dataset(p.config, p.m), task_id)
    rets, succ = [], []
    for c in coefs:
        r = evaluate_control(p, task_id, episodes, seed, cond=(1.0 - c) * low_cond + c * target)
        rets.append(r.mean_return)
        succ.append(r.success_rate)
    res = AlignmentResult(task_id, coefs, np.array(rets), np.array(succ), spearman(coefs, rets))
    if plot_path is not None:
        Path(plot_path).write_text(line_svg(coefs, res.mean_returns, title=f"task {task_id}: return vs condition",
                                            xlabel="interpolation toward w*", ylabel="mean return"),
                                   encoding="utf-8")
    return res


# ------------------------------------------------------------------ embeddings

@dataclass
class EmbeddingReport:
    coords: np.ndarray
    star_coords: np.ndarray
    task_ids: np.ndarray
    returns: np.ndarray
    svg: str

    def to_csv(self) -> str:
        lines = ["kind,index,task_id,return,pc1,pc2"]
        for i, (xy, t, r) in enumerate(zip(self.coords, self.task_ids, self.returns)):
            lines.append(f"segment,{i},{int(t)},{float(r)!r},{float(xy[0])!r},{float(xy[1])!r}")
        for i, xy in enumerate(self.star_coords):
            lines.append(f"wstar,{i},{i},,{float(xy[0])!r},{float(xy[1])!r}")
        return "\n".join(lines) + "\n"


def embedding_report(encoder: TrajectoryEncoder, wstar: OptimalRepresentations | None, ds: OfflineDataset,
                     a_max: float = 0.25, seed: int = 0, out_dir=None) -> EmbeddingReport:
    """PCA of embedding means, colored by task and shaded by return, w* overplotted."""
    emb = encoder.encode(ds.segments, a_max)
    coords, comps, mean = pca_project(emb.mean, 2, seed)
    stars = np.zeros((0, 2)) if wstar is None else (wstar.mu.data - mean) @ comps
    tid, ret = ds.task_ids(), ds.returns()
    shade = np.zeros(len(ret))
    for t in np.unique(tid):
        sel = tid == t
        lo, hi = ret[sel].min(), ret[sel].max()
        shade[sel] = (ret[sel] - lo) / (hi - lo) if hi > lo else 1.0
    colors = [PALETTE[int(t) % len(PALETTE)] for t in tid]
    svg = scatter_svg(coords, colors, shade, stars if len(stars) else None,
                      [PALETTE[i % len(PALETTE)] for i in range(len(stars))], title="embedding means (PCA)")
    rep = EmbeddingReport(coords, stars, tid, ret, svg)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "embedding_pca.svg").write_text(svg, encoding="utf-8")
        (out / "embedding_pca.csv").write_text(rep.to_csv(), encoding="utf-8")
    return rep


# ------------------------------------------------------------------ representation diagnostics

def representation_metrics(encoder: TrajectoryEncoder, wstar: OptimalRepresentations, train: OfflineDataset,
                           heldout: OfflineDataset, a_max: float = 0.25, n_near: int = 10) -> dict:
    """Held-out probe accuracy, held-out triplet satisfaction and the near-w* return lift per task."""
    e_tr = encoder.encode(train.segments, a_max)
    e_ho = encoder.encode(heldout.segments, a_max)
    probe = nearest_centroid_accuracy(e_tr.mean, train.task_ids(), e_ho.mean, heldout.task_ids())
    trip = preference_triplets(heldout)
    sat = triplet_satisfaction(e_ho.mean, trip.pos, trip.neg, trip.target, wstar.mu.data)
    tid, ret = train.task_ids(), train.returns()
    near, task_mean = [], []
    for i in range(wstar.m):
        d = np.linalg.norm(e_tr.mean - wstar.mu.data[i], axis=1)
        near.append(float(ret[np.argsort(d)[:n_near]].mean()))
        task_mean.append(float(ret[tid == i].mean()))
    return {"probe_accuracy": probe, "triplet_satisfaction": sat, "near_wstar_return": near,
            "task_mean_return": task_mean}


# ------------------------------------------------------------------ information diagnostics

def condition_prediction_kl(p: Pipeline, train: OfflineDataset, heldout: OfflineDataset, steps: int = 1500,
                            batch: int = 256, seed: int = 0, lr: float = 1e-3) -> float:
    """Held-out ``KL(p_psi(w|tau) || q(w|eps_theta))`` for a freshly fitted condition predictor.

    A new predictor is fitted on conditional noise predictions of the frozen
    denoiser over training segments, then scored on held-out segments with
    shared noise draws, so models trained with different ``zeta`` compare on
    equal footing.
    """
    def inputs(ds, idx, rng):
        x0 = _flat_states(p, ds.states()[idx])
        draw = draw_noise(rng, len(idx), p.theta.x_dim, p.schedule.K, 0.0)
        emb = p.encoder.encode([ds.segments[i] for i in idx], p.config.a_max)
        eps = predicted_noise(p.theta, p.schedule, x0, emb.condition(), draw, STATE_DIM)
        return eps, emb.mean, emb.log_var

    n_tr = len(train.segments)
    phi = CondPredictor(p.theta.x_dim, p.config.w_dim, Rng(derive_seed(seed, "phi-init")))
    fit_cond_predictor(phi, lambda rng: inputs(train, rng.integers(0, n_tr, batch), rng), steps, lr,
                       seed=derive_seed(seed, "phi-fit"))
    rng = Rng(derive_seed(seed, "phi-eval"))
    eps, mu, lv = inputs(heldout, np.arange(len(heldout.segments)), rng)
    with nd.no_tape():
        return float(mi_kl_term(phi, eps, mu, lv).data)


def noisy_trajectory_kl(encoder: TrajectoryEncoder, schedule: DiffusionSchedule, train: OfflineDataset,
                        heldout: OfflineDataset, k: int, state_mean, state_std, steps: int = 1500,
                        batch: int = 256, seed: int = 0, lr: float = 1e-3, a_max: float = 0.25) -> float:
    """Held-out KL of a predictor of ``w`` fitted on ``tau_k``, the trajectory noised ``k`` steps."""
    def prep(ds):
        x0 = ((ds.states() - state_mean) / state_std).reshape(len(ds.segments), -1)
        emb = encoder.encode(ds.segments, a_max)
        return x0, emb.mean, emb.log_var

    x_tr, mu_tr, lv_tr = prep(train)
    x_ho, mu_ho, lv_ho = prep(heldout)

    def noised(x0, rng):
        return q_sample(schedule, x0, np.full(len(x0), k), rng.normal(x0.shape))

    def make_batch(rng):
        idx = rng.integers(0, len(x_tr), batch)
        return noised(x_tr[idx], rng), mu_tr[idx], lv_tr[idx]

    phi = CondPredictor(x_tr.shape[1], encoder.w_dim, Rng(derive_seed(seed, "dpi-init")))
    fit_cond_predictor(phi, make_batch, steps, lr, seed=derive_seed(seed, "dpi-fit", k))
    with nd.no_tape():
        return float(mi_kl_term(phi, noised(x_ho, Rng(derive_seed(seed, "dpi-eval", k))), mu_ho, lv_ho).data)


def retrain_diffusion(p: Pipeline, ds: OfflineDataset, zeta: float | None = None, seed: int | None = None,
                      steps: int | None = None) -> Pipeline:
    """Fresh denoiser and condition predictor trained on the frozen encoder of ``p``.

    Encoder, w* and inverse dynamics are shared with ``p``; only the diffusion
    stage reruns, so cells of a zeta or seed sweep differ in nothing else.
    """
    cfg = p.config.replace(**{k: v for k, v in (("zeta", zeta), ("seed", seed), ("diff_steps", steps))
                              if v is not None})
    init = Rng(derive_seed(cfg.seed, "retrain-init"))
    x_dim = (cfg.h + 1) * STATE_DIM
    q = Pipeline(cfg, p.encoder, p.wstar, NoisePredictor(x_dim, 2 * cfg.w_dim, init),
                 CondPredictor(x_dim, cfg.w_dim, init), p.inv, p.schedule, p.state_mean, p.state_std, p.step)
    tr = DiffusionTrainer(q.theta, q.phi, q.schedule, lr=cfg.diff_lr, zeta=cfg.zeta, dropout=cfg.cond_dropout,
                          first_dim=STATE_DIM, weighted=cfg.weighted_loss, prior=cfg.mi_prior,
                          cond_noise=(cfg.cond_noise_mu, cfg.cond_noise_log_var), ema_decay=cfg.ema_decay)
    x0 = _flat_states(q, ds.states())
    emb = p.encoder.encode(ds.segments, cfg.a_max)
    rng = Rng(derive_seed(cfg.seed, "retrain"))
    for _ in range(cfg.diff_steps):
        idx = rng.integers(0, len(x0), cfg.diff_batch)
        tr.step(x0[idx], emb.mean[idx], emb.log_var[idx], rng)
    tr.use_ema()
    return q


# ------------------------------------------------------------------ ablations

REPR_FIELDS = {"w_dim", "d_model", "delta", "kl_weight", "triplet_weight", "eps_recip", "repr_lr", "repr_batch",
               "repr_steps"}


def ablation_runner(cfg: RunConfig, name: str, values, ds: OfflineDataset, dataset_sha256: str = "",
                    control: bool = False, csv_path=None) -> list[dict]:
    """One metrics row per sweep value, all cells sharing ``ds`` and ``cfg.seed``.

    Representation fields train the representation stage only. Other fields
    train the full pipeline and report the held-out condition-prediction KL,
    plus control success and alignment when ``control`` is set.
    """
    values = list(values)
    if not values:
        raise ValueError("empty sweep")
    heldout = heldout_dataset(cfg, ds.m)
    rows = []
    for v in values:
        cell = cfg.replace(**{name: v})
        row = {"param": name, "value": v, "dataset_sha256": dataset_sha256}
        if name in REPR_FIELDS:
            p = train_pipeline(cell, ds, stages=("repr",))
            rm = representation_metrics(p.encoder, p.wstar, ds, heldout, cell.a_max)
            row.update(probe_accuracy=rm["probe_accuracy"], triplet_satisfaction=rm["triplet_satisfaction"],
                       near_wstar_lift=float(np.mean(np.subtract(rm["near_wstar_return"],
                                                                 rm["task_mean_return"]))))
        else:
            p = train_pipeline(cell, ds)
            row["cond_pred_kl"] = condition_prediction_kl(p, ds, heldout, seed=cell.seed)
            if control:
                own = [evaluate_control(p, i, seed=cell.seed) for i in range(p.m)]
                row["success_rate"] = float(np.mean([r.success_rate for r in own]))
                row["alignment_corr"] = float(np.mean([alignment_sweep(p, i, seed=cell.seed,
                                                                       heldout=heldout).spearman
                                                       for i in range(p.m)]))
        rows.append(row)
    if csv_path is not None:
        write_rows_csv(rows, csv_path)
    return rows


def write_rows_csv(rows: list[dict], path) -> None:
    cols = []
    for r in rows:
        cols += [k for k in r if k not in cols]
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: _fmt(v) for k, v in r.items()})
    Path(path).write_text(buf.getvalue(), encoding="utf-8")
