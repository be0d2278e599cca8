"""Generate data, train every stage, then drive each task with its own w* and a wrong one.

    python demos/quickstart.py            # default budgets, about 10 minutes on one core
    python demos/quickstart.py --quick    # smoke run; too short to reach every goal
"""
import argparse
import tempfile
import time
from pathlib import Path

import numpy as np

from prefdiff.config import RunConfig
from prefdiff.envgen import build_dataset
from prefdiff.harness import evaluate_control, expert_baseline, random_baseline, run_training
from prefdiff.io import save_dataset


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--quick", action="store_true")
    ap.add_argument("--out", default=None, help="run directory (default: a temp dir)")
    ap.add_argument("--episodes", type=int, default=20)
    args = ap.parse_args()

    root = Path(args.out or tempfile.mkdtemp(prefix="prefdiff-"))
    root.mkdir(parents=True, exist_ok=True)
    cfg = RunConfig(dataset=str(root / "data.campds"), run_dir=str(root / "run"))
    if args.quick:
        cfg = cfg.replace(episodes_per_task=100, pairs_per_task=1000, repr_steps=1000, diff_steps=12000,
                          inv_steps=1500)
    save_dataset(cfg.dataset, build_dataset(cfg.m, cfg.episodes_per_task, cfg.quality_mix, cfg.pairs_per_task,
                                            seed=cfg.seed))
    t0 = time.time()
    res = run_training(cfg)
    print(f"trained in {time.time() - t0:.0f}s -> {res.run_dir}")

    p = res.pipeline
    print("success rate (rows: task, columns: w* used as condition)")
    for i, task in enumerate(p.tasks()):
        row = [evaluate_control(p, i, args.episodes, cond=j).success_rate for j in range(p.m)]
        ex = expert_baseline(task, args.episodes).success_rate
        rn = random_baseline(task, args.episodes).success_rate
        print(f"  task {i}: {np.round(row, 2)}   expert {ex:.2f}  random {rn:.2f}")


if __name__ == "__main__":
    main()
