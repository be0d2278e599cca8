"""Learn w* for a fourth goal with the encoder frozen and see where it lands.

A goal placed between two existing ones should get a w* between theirs; a
copy of an existing goal should get a w* on top of the original.
"""
import numpy as np

from prefdiff import ndgrad as nd
from prefdiff.envgen import build_dataset, make_tasks, task_at_angle
from prefdiff.prefrep import (OptimalRepresentations, ReprTrainer, TrajectoryEncoder, preference_triplets,
                              sample_triplets, segment_features, train_new_task_repr)


def train_base(ds, steps=1500, seed=0):
    rng = nd.Rng(seed)
    feats = segment_features(ds.segments)
    enc = TrajectoryEncoder(ds.h, 16, 64, rng=rng)
    enc.set_normalization(feats)
    ws = OptimalRepresentations(ds.m, 16, rng)
    tr = ReprTrainer(enc, ws, feats, lr=1e-3)
    trip = preference_triplets(ds)
    for _ in range(steps):
        b = sample_triplets(trip, 64, rng)
        tr.step(b, "encoder")
        tr.step(b, "optimal")
    return enc, ws


def main():
    base = make_tasks(3)
    ds = build_dataset(m=3, episodes_per_task=100, pairs_per_task=1000, seed=0)
    enc, ws = train_base(ds)
    mu = ws.mu.data
    print("pairwise w* distances among the original tasks:")
    print(np.round(np.linalg.norm(mu[:, None] - mu[None], axis=-1), 3))

    for label, angle, others in [("between goals 0 and 1", np.pi / 3, base),
                                 ("duplicate of goal 0", 0.0, base[1:])]:
        new = task_at_angle(3, angle)
        data = build_dataset(episodes_per_task=60, pairs_per_task=1000, seed=21, tasks=[*others, new],
                             target_tasks=[3])
        _, ext = train_new_task_repr(enc, ws, data, 3, steps=1500, mode="frozen", seed=2)
        d = np.linalg.norm(ext.mu.data[3] - mu, axis=1)
        print(f"new task {label}: distance to each original w* = {np.round(d, 3)}")


if __name__ == "__main__":
    main()
