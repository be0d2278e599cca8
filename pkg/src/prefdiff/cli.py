"""``prefdiff`` command line.

Exit codes: 0 success, 1 runtime failure, 2 usage error. Failures print a
single line ``prefdiff: error[<code>]: <message>`` on stderr.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
from pathlib import Path
from xml.etree import ElementTree

import numpy as np

from .config import ConfigError, FIELD_TYPES, RunConfig, format_value, load_config, parse_value, serialize_config
from .envgen import build_dataset
from .io import FormatError, inspect_file, load_dataset, save_dataset

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add_config_flags(p: argparse.ArgumentParser, skip=()) -> None:
    g = p.add_argument_group("configuration (override --config values)")
    g.add_argument("--config", metavar="PATH", help="key = value config file")
    for f in dataclasses.fields(RunConfig):
        if f.name in skip:
            continue
        kind = FIELD_TYPES[f.name].__name__
        g.add_argument("--" + f.name.replace("_", "-"), dest=f.name, metavar=kind.upper(), default=None,
                       help=f"{f.name} ({kind}, default {format_value(f.default)})")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="prefdiff", description="Preference-conditioned diffusion planning toolkit.")
    sub = ap.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("gen-data", help="generate an offline preference dataset")
    p.add_argument("--tasks", type=int, dest="m_tasks", metavar="M", help="number of tasks (same as --m)")
    p.add_argument("--out", required=True, metavar="PATH")
    _add_config_flags(p)

    p = sub.add_parser("train", help="train every component and write a run directory")
    _add_config_flags(p)

    p = sub.add_parser("eval", help="closed-loop control success of a trained pipeline")
    p.add_argument("--checkpoint", required=True, metavar="PATH")
    p.add_argument("--task", type=int, action="append", metavar="I", help="task id (repeatable; default all)")
    p.add_argument("--cond-task", type=int, metavar="J", help="condition on w*_J instead of the evaluated task")
    p.add_argument("--episodes", type=int, metavar="N")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--guidance", type=float)
    p.add_argument("--baselines", action="store_true", help="also report expert and random policies")

    p = sub.add_parser("align", help="return along the interpolation from a low-return embedding to w*")
    p.add_argument("--checkpoint", required=True, metavar="PATH")
    p.add_argument("--task", type=int, default=0, metavar="I")
    p.add_argument("--coefficients", default="0,0.25,0.5,0.75,1", metavar="LIST")
    p.add_argument("--episodes", type=int, metavar="N")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", metavar="CSV")
    p.add_argument("--plot", metavar="SVG")

    p = sub.add_parser("embed-report", help="PCA scatter of segment embeddings")
    p.add_argument("--checkpoint", required=True, metavar="PATH")
    p.add_argument("--data", required=True, metavar="PATH", help="dataset file to embed")
    p.add_argument("--out-dir", required=True, metavar="DIR")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("ablate", help="sweep one config field and tabulate metrics")
    p.add_argument("--param", required=True, help="config field to sweep, e.g. w_dim or zeta")
    p.add_argument("--values", required=True, metavar="LIST", help="comma-separated values")
    p.add_argument("--control", action="store_true", help="also evaluate control and alignment per cell")
    p.add_argument("--out", required=True, metavar="CSV")
    _add_config_flags(p)

    p = sub.add_parser("inspect", help="describe any file the tools write (dataset, checkpoint, config, csv, hash, svg)")
    p.add_argument("path")
    return ap


def _effective_config(args) -> RunConfig:
    base = RunConfig()
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file not found: {path}")
        base = load_config(path)
    changes = {}
    for name in FIELD_TYPES:
        raw = getattr(args, name, None)
        if raw is None:
            continue
        try:
            changes[name] = parse_value(name, raw)
        except ValueError as exc:
            raise UsageError(f"--{name.replace('_', '-')}: {exc}") from None
    if getattr(args, "m_tasks", None) is not None:
        changes["m"] = args.m_tasks
    try:
        return base.replace(**changes)
    except ConfigError as exc:
        raise UsageError(str(exc)) from None


def _require_file(path, what: str) -> Path:
    if not path or not Path(path).is_file():
        raise UsageError(f"{what} not found: {path or '(unset)'}")
    return Path(path)


def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True))


def cmd_gen_data(args) -> int:
    cfg = _effective_config(args)
    ds = build_dataset(cfg.m, cfg.episodes_per_task, cfg.quality_mix, cfg.pairs_per_task, seed=cfg.seed,
                       h=cfg.h, horizon=cfg.horizon, dt=cfg.dt, a_max=cfg.a_max, kappa=cfg.kappa)
    sha = save_dataset(args.out, ds)
    _emit({"out": args.out, "sha256": sha, "segments": len(ds.segments), "pairs": len(ds.pairs)})
    return EXIT_OK


def cmd_train(args) -> int:
    from .harness import run_training
    cfg = _effective_config(args)
    _require_file(cfg.dataset, "dataset")
    res = run_training(cfg)
    _emit({"run_dir": str(res.run_dir), "dataset_sha256": res.dataset_sha256, "steps": res.pipeline.step})
    return EXIT_OK


def cmd_eval(args) -> int:
    from .harness import evaluate_control, expert_baseline, load_pipeline, random_baseline
    p = load_pipeline(_require_file(args.checkpoint, "checkpoint"))
    tasks = args.task if args.task else list(range(p.m))
    out = []
    for i in tasks:
        if not 0 <= i < p.m:
            raise UsageError(f"unknown task id {i} (checkpoint has {p.m} tasks)")
        cond = args.cond_task if args.cond_task is not None else i
        r = evaluate_control(p, i, args.episodes, args.seed, cond=cond, guidance=args.guidance)
        row = {"task": i, "cond_task": cond, "success_rate": r.success_rate, "mean_return": r.mean_return,
               "return_ci95": r.return_ci}
        if args.baselines:
            n = args.episodes or p.config.eval_episodes
            task = p.tasks()[i]
            ex = expert_baseline(task, n, args.seed, p.config.kappa, p.config.a_max, p.config.success_threshold)
            rn = random_baseline(task, n, args.seed, p.config.a_max, p.config.success_threshold)
            row.update(expert_success=ex.success_rate, expert_return=ex.mean_return,
                       random_success=rn.success_rate, random_return=rn.mean_return)
        out.append(row)
        _emit(row)
    return EXIT_OK


def cmd_align(args) -> int:
    from .harness import alignment_sweep, load_pipeline
    p = load_pipeline(_require_file(args.checkpoint, "checkpoint"))
    if not 0 <= args.task < p.m:
        raise UsageError(f"unknown task id {args.task} (checkpoint has {p.m} tasks)")
    try:
        coefs = [float(c) for c in args.coefficients.split(",") if c.strip()]
    except ValueError as exc:
        raise UsageError(f"--coefficients: {exc}") from None
    if len(set(coefs)) < 2:
        raise UsageError("--coefficients needs at least two distinct values")
    res = alignment_sweep(p, args.task, coefficients=coefs, episodes=args.episodes, seed=args.seed,
                          plot_path=args.plot)
    if args.out:
        Path(args.out).write_text(res.to_csv(), encoding="utf-8")
    _emit({"task": args.task, "coefficients": coefs, "mean_returns": res.mean_returns.tolist(),
           "spearman": res.spearman})
    return EXIT_OK


def cmd_embed_report(args) -> int:
    from .harness import embedding_report, load_pipeline
    p = load_pipeline(_require_file(args.checkpoint, "checkpoint"))
    ds = load_dataset(_require_file(args.data, "dataset"))
    rep = embedding_report(p.encoder, p.wstar, ds, p.config.a_max, args.seed, args.out_dir)
    _emit({"out_dir": args.out_dir, "points": len(rep.coords)})
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .harness import ablation_runner
    from .io import file_sha256
    cfg = _effective_config(args)
    path = _require_file(cfg.dataset, "dataset")
    if args.param not in FIELD_TYPES:
        raise UsageError(f"unknown config key {args.param!r}")
    try:
        values = [parse_value(args.param, v) for v in args.values.split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"--values: {exc}") from None
    if not values:
        raise UsageError("--values is empty")
    rows = ablation_runner(cfg, args.param, values, load_dataset(path), file_sha256(path), args.control, args.out)
    for r in rows:
        _emit(r)
    return EXIT_OK


def cmd_inspect(args) -> int:
    path = _require_file(args.path, "file")
    head = path.read_bytes()[:8]
    if head.startswith(b"CAMPDS1") or head.startswith(b"CAMPCKPT"):
        _emit(inspect_file(path))
    elif path.suffix == ".cfg":
        _emit({"kind": "config", "config": dataclasses.asdict(load_config(path))})
    elif path.suffix == ".csv":
        with path.open(newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if not header:
                raise FormatError(f"{path}: empty csv file")
            rows = sum(1 for _ in reader)
        _emit({"kind": "csv", "rows": rows, "columns": header})
    elif path.suffix == ".sha256":
        digest, _, name = path.read_text(encoding="utf-8").strip().partition("  ")
        if len(digest) != 64 or any(c not in "0123456789abcdef" for c in digest):
            raise FormatError(f"{path}: not a sha256 digest line")
        _emit({"kind": "sha256", "digest": digest, "file": name})
    elif path.suffix == ".svg":
        try:
            root = ElementTree.parse(path).getroot()
        except ElementTree.ParseError as exc:
            raise FormatError(f"{path}: malformed svg: {exc}") from None
        _emit({"kind": "svg", "width": root.get("width"), "height": root.get("height"),
               "elements": sum(1 for _ in root.iter()) - 1})
    else:
        raise FormatError(f"{path}: not a dataset, checkpoint, config, csv, sha256 or svg file")
    return EXIT_OK


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "align": cmd_align,
            "embed-report": cmd_embed_report, "ablate": cmd_ablate, "inspect": cmd_inspect}


def _fail(code: str, message: str) -> None:
    print(f"prefdiff: error[{code}]: {' '.join(str(message).split())}", file=sys.stderr)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        _fail("usage", exc)
        return EXIT_USAGE
    except ConfigError as exc:
        _fail("usage", exc)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except (FormatError, OSError, ValueError, RuntimeError, FloatingPointError, np.linalg.LinAlgError) as exc:
        _fail("runtime", exc)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
