"""Run configuration and the ``key = value`` config grammar.

One setting per line, ``#`` starts a comment, blank lines are ignored.
Tuples are written comma-separated. Unknown or duplicate keys and values
that fail type or range checks are rejected with the offending line number.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # data
    seed: int = 0
    m: int = 3
    episodes_per_task: int = 200
    pairs_per_task: int = 2000
    horizon: int = 32
    h: int = 16
    a_max: float = 0.25
    dt: float = 1.0
    kappa: float = 0.5
    quality_mix: tuple = (0.0, 0.25, 0.5, 0.75, 1.0)
    # preference representations
    w_dim: int = 16
    d_model: int = 64
    delta: float = 1.0
    kl_weight: float = 1.0
    triplet_weight: float = 1.0
    eps_recip: float = 1e-4
    repr_lr: float = 1e-3
    repr_batch: int = 64
    repr_steps: int = 2000
    # diffusion
    K: int = 200
    schedule: str = "cosine"
    zeta: float = 0.1
    cond_dropout: float = 0.25
    guidance: float = 1.2
    diff_lr: float = 1e-3
    diff_batch: int = 256
    diff_steps: int = 20000
    mi_prior: str = "posterior"
    weighted_loss: bool = False
    sample_condition: bool = False
    cond_noise_mu: float = 0.05
    cond_noise_log_var: float = 0.5
    clip_x0: float = 3.0
    plan_temperature: float = 0.5
    ema_decay: float = 0.999
    # inverse dynamics
    inv_lr: float = 1e-3
    inv_batch: int = 256
    inv_steps: int = 3000
    # evaluation
    eval_episodes: int = 50
    success_threshold: float = 0.1
    # bookkeeping
    log_every: int = 100
    checkpoint_every: int = 0
    dataset: str = ""
    run_dir: str = "run"

    def validate(self) -> "RunConfig":
        positive = ["m", "episodes_per_task", "horizon", "h", "w_dim", "d_model", "repr_batch", "diff_batch",
                    "inv_batch", "eval_episodes", "log_every"]
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ["pairs_per_task", "repr_steps", "diff_steps", "inv_steps", "checkpoint_every"]:
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        for name in ["a_max", "dt", "kappa", "delta", "eps_recip", "repr_lr", "diff_lr", "inv_lr",
                     "success_threshold"]:
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be > 0, got {getattr(self, name)}")
        for name in ["kl_weight", "triplet_weight", "zeta", "guidance", "cond_noise_mu", "cond_noise_log_var",
                     "clip_x0", "plan_temperature"]:
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.K < 2:
            raise ConfigError(f"K must be >= 2, got {self.K}")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ConfigError(f"ema_decay must lie in [0, 1), got {self.ema_decay}")
        if not 0.0 <= self.cond_dropout <= 1.0:
            raise ConfigError(f"cond_dropout must lie in [0, 1], got {self.cond_dropout}")
        if self.horizon % self.h:
            raise ConfigError(f"horizon {self.horizon} must be a multiple of h {self.h}")
        if not self.quality_mix or any(not 0.0 <= q <= 1.0 for q in self.quality_mix):
            raise ConfigError(f"quality_mix entries must lie in [0, 1], got {self.quality_mix}")
        if self.schedule != "cosine":
            raise ConfigError(f"schedule must be 'cosine', got {self.schedule!r}")
        if self.mi_prior not in ("posterior", "batch"):
            raise ConfigError(f"mi_prior must be 'posterior' or 'batch', got {self.mi_prior!r}")
        return self

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes).validate()


FIELD_TYPES = {f.name: type(f.default) for f in fields(RunConfig)}


def parse_value(name: str, text: str):
    kind = FIELD_TYPES[name]
    text = text.strip()
    if kind is bool:
        low = text.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ValueError(f"expected a boolean, got {text!r}")
    if kind is int:
        return int(text)
    if kind is float:
        return float(text)
    if kind is tuple:
        return tuple(float(x) for x in text.split(",") if x.strip())
    return text


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(repr(float(v)) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    values = {}
    seen = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        key, val = (part.strip() for part in line.split("=", 1))
        if key not in FIELD_TYPES:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        if key in seen:
            raise ConfigError(f"line {lineno}: duplicate key {key!r} (first set on line {seen[key]})")
        seen[key] = lineno
        try:
            values[key] = parse_value(key, val)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from None
    cfg = dataclasses.replace(base or RunConfig(), **values)
    try:
        return cfg.validate()
    except ConfigError as exc:
        key = str(exc).split()[0]
        if key in seen:
            raise ConfigError(f"line {seen[key]}: {exc}") from None
        raise


def load_config(path) -> RunConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"))


def serialize_config(cfg: RunConfig) -> str:
    return "".join(f"{f.name} = {format_value(getattr(cfg, f.name))}\n" for f in fields(cfg))


def config_io(path) -> RunConfig:
    return load_config(path)
