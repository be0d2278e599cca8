"""Point-mass tasks, behaviour rollouts and scripted multi-task preferences."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .ndgrad import Rng, derive_seed

STATE_DIM = 2
ACTION_DIM = 2
TIE_TOL = 1e-9
DEFAULT_QUALITY_MIX = (0.0, 0.25, 0.5, 0.75, 1.0)

INTRA_TASK = 0
INTER_TASK = 1
KIND_NAMES = {INTRA_TASK: "intra_task", INTER_TASK: "inter_task"}


@dataclass(frozen=True)
class PointMassTask:
    task_id: int
    goal: tuple[float, float]
    horizon: int = 32
    dt: float = 1.0

    def __post_init__(self):
        if self.horizon < 1 or self.dt <= 0:
            raise ValueError("horizon must be >= 1 and dt > 0")


def make_tasks(m: int, horizon: int = 32, dt: float = 1.0) -> list[PointMassTask]:
    """``m`` tasks with goals evenly spaced on the unit circle."""
    if m < 1:
        raise ValueError("need at least one task")
    return [PointMassTask(i, (float(np.cos(2 * np.pi * i / m)), float(np.sin(2 * np.pi * i / m))),
                          horizon, dt) for i in range(m)]


def task_at_angle(task_id: int, angle: float, horizon: int = 32, dt: float = 1.0) -> PointMassTask:
    return PointMassTask(task_id, (float(np.cos(angle)), float(np.sin(angle))), horizon, dt)


@dataclass(frozen=True, eq=False)
class TrajectorySegment:
    states: np.ndarray   # (h+1, 2)
    actions: np.ndarray  # (h, 2)
    rewards: np.ndarray  # (h,)
    task_id: int

    @property
    def h(self) -> int:
        return len(self.actions)

    def __post_init__(self):
        h = len(self.actions)
        if len(self.rewards) != h or len(self.states) != h + 1:
            raise ValueError(f"inconsistent segment lengths: states {len(self.states)}, "
                             f"actions {h}, rewards {len(self.rewards)}")


@dataclass(frozen=True)
class PreferencePair:
    first: int
    second: int
    label: float   # 1: first preferred, 0: second preferred, 0.5: equal
    kind: int
    target_task: int


@dataclass
class OfflineDataset:
    segments: list[TrajectorySegment]
    pairs: list[PreferencePair]
    meta: dict = field(default_factory=dict)

    @property
    def m(self) -> int:
        return self.meta["m"]

    @property
    def h(self) -> int:
        return self.meta["h"]

    def task_ids(self) -> np.ndarray:
        return np.array([s.task_id for s in self.segments], dtype=np.int64)

    def returns(self) -> np.ndarray:
        return np.array([segment_return(s) for s in self.segments])

    def states(self) -> np.ndarray:
        return np.stack([s.states for s in self.segments])

    def transitions(self):
        """(s, a, s') arrays pooled over every segment."""
        st = self.states()
        act = np.stack([s.actions for s in self.segments])
        return (st[:, :-1].reshape(-1, STATE_DIM), act.reshape(-1, ACTION_DIM),
                st[:, 1:].reshape(-1, STATE_DIM))

    def validate(self) -> None:
        n = len(self.segments)
        for p in self.pairs:
            if not (0 <= p.first < n and 0 <= p.second < n):
                raise ValueError(f"pair references missing segment ({p.first}, {p.second})")
        present = set(int(t) for t in self.task_ids())
        for t in self.meta.get("task_ids", range(self.meta.get("m", 0))):
            if t not in present:
                raise ValueError(f"task {t} contributes no segments")


def expert_action(pos, goal, kappa: float = 0.5, a_max: float = 0.25) -> np.ndarray:
    return np.clip(kappa * (np.asarray(goal) - pos), -a_max, a_max)


def step(pos, action, task: PointMassTask):
    nxt = pos + task.dt * action
    reward = -float(np.linalg.norm(nxt - np.asarray(task.goal)))
    return nxt, reward


def run_episode(task: PointMassTask, policy, start) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Roll ``policy(pos, t) -> action`` for ``task.horizon`` steps."""
    T = task.horizon
    states = np.empty((T + 1, STATE_DIM))
    actions = np.empty((T, ACTION_DIM))
    rewards = np.empty(T)
    states[0] = start
    for t in range(T):
        a = np.asarray(policy(states[t], t), dtype=np.float64)
        actions[t] = a
        states[t + 1], rewards[t] = step(states[t], a, task)
        if not np.isfinite(states[t + 1]).all():
            raise FloatingPointError(f"non-finite state at step {t + 1}")
    return states, actions, rewards


def rollout(task: PointMassTask, policy_quality: float, seed: int, h: int = 16,
            a_max: float = 0.25, kappa: float = 0.5, start=None) -> list[TrajectorySegment]:
    """One behaviour episode cut into consecutive length-``h`` segments.

    The action is the convex blend ``q * expert + (1 - q) * uniform`` of a
    clipped proportional controller and a uniform random command.
    """
    if not 0.0 <= policy_quality <= 1.0:
        raise ValueError(f"policy_quality must lie in [0, 1], got {policy_quality}")
    if task.horizon % h:
        raise ValueError(f"episode horizon {task.horizon} is not a multiple of h={h}")
    rng = Rng(seed)
    start = rng.uniform(STATE_DIM, -1.0, 1.0) if start is None else np.asarray(start, dtype=np.float64)
    noise = rng.uniform((task.horizon, ACTION_DIM), -a_max, a_max)
    q = float(policy_quality)

    def policy(pos, t):
        a = q * expert_action(pos, task.goal, kappa, a_max) + (1.0 - q) * noise[t]
        return np.clip(a, -a_max, a_max)

    states, actions, rewards = run_episode(task, policy, start)
    return [TrajectorySegment(states[i:i + h + 1].copy(), actions[i:i + h].copy(),
                              rewards[i:i + h].copy(), task.task_id)
            for i in range(0, task.horizon, h)]


def segment_return(seg: TrajectorySegment) -> float:
    return float(np.sum(seg.rewards))


def scripted_preference(a: TrajectorySegment, b: TrajectorySegment, target_task: int,
                        first: int = 0, second: int = 1) -> PreferencePair:
    """Label ``(a, b)`` for ``target_task``.

    Same task: the higher return wins, ties within 1e-9 give 0.5.
    Different tasks: the segment from the target task wins.
    """
    in_a, in_b = a.task_id == target_task, b.task_id == target_task
    if in_a and in_b:
        ra, rb = segment_return(a), segment_return(b)
        y = 0.5 if abs(ra - rb) <= TIE_TOL else (1.0 if ra > rb else 0.0)
        return PreferencePair(first, second, y, INTRA_TASK, target_task)
    if in_a or in_b:
        return PreferencePair(first, second, 1.0 if in_a else 0.0, INTER_TASK, target_task)
    raise ValueError(f"neither segment belongs to target task {target_task} "
                     f"(tasks {a.task_id}, {b.task_id})")


def build_dataset(m: int = 3, episodes_per_task: int = 200, quality_mix=DEFAULT_QUALITY_MIX,
                  pairs_per_task: int = 2000, seed: int = 0, h: int = 16, horizon: int = 32,
                  dt: float = 1.0, a_max: float = 0.25, kappa: float = 0.5,
                  inter_task: bool = True, tasks: list[PointMassTask] | None = None,
                  target_tasks=None) -> OfflineDataset:
    """Roll out every task and emit intra- and inter-task preference pairs.

    ``pairs_per_task`` is split evenly between the two kinds; an odd
    remainder goes to intra-task pairs. ``tasks``/``target_tasks`` allow
    building data for a new task against existing ones.
    """
    tasks = make_tasks(m, horizon, dt) if tasks is None else list(tasks)
    m = len(tasks)
    if m < 1:
        raise ValueError("need at least one task")
    if episodes_per_task < 1:
        raise ValueError("episodes_per_task must be >= 1")
    targets = [t.task_id for t in tasks] if target_tasks is None else list(target_tasks)
    if inter_task and m == 1 and pairs_per_task > 1:
        raise ValueError("inter-task pairs requested but only one task exists")
    quality_mix = tuple(float(q) for q in quality_mix)

    segments: list[TrajectorySegment] = []
    by_task: dict[int, list[int]] = {}
    qualities = []
    for task in tasks:
        qrng = Rng(derive_seed(seed, 1, task.task_id))
        picks = qrng.integers(0, len(quality_mix), episodes_per_task)
        for ep in range(episodes_per_task):
            q = quality_mix[int(picks[ep])]
            qualities.append(q)
            for seg in rollout(task, q, derive_seed(seed, 2, task.task_id, ep), h, a_max, kappa):
                by_task.setdefault(task.task_id, []).append(len(segments))
                segments.append(seg)

    pairs: list[PreferencePair] = []
    for target in targets:
        own = by_task.get(target, [])
        if len(own) < 2:
            raise ValueError(f"task {target} needs at least 2 segments for intra-task pairs")
        others = [i for t, idx in by_task.items() if t != target for i in idx]
        n_inter = pairs_per_task // 2 if inter_task else 0
        n_intra = pairs_per_task - n_inter
        prng = Rng(derive_seed(seed, 3, target))
        for _ in range(n_intra):
            i, j = prng.choice(len(own), 2, replace=False)
            a, b = own[int(i)], own[int(j)]
            pairs.append(scripted_preference(segments[a], segments[b], target, a, b))
        for _ in range(n_inter):
            a = own[int(prng.integers(0, len(own)))]
            b = others[int(prng.integers(0, len(others)))]
            if prng.uniform() < 0.5:
                a, b = b, a
            pairs.append(scripted_preference(segments[a], segments[b], target, a, b))

    meta = dict(m=m, h=h, state_dim=STATE_DIM, action_dim=ACTION_DIM, seed=int(seed),
                horizon=horizon, dt=dt, a_max=a_max, kappa=kappa,
                task_ids=[t.task_id for t in tasks], goals=[list(t.goal) for t in tasks],
                quality_mix=list(quality_mix),
                mixture_weights=[1.0 / len(quality_mix)] * len(quality_mix))
    ds = OfflineDataset(segments, pairs, meta)
    ds.validate()
    return ds
