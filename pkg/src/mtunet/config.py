"""Run configuration: typed keys, per-stage defaults and the INI-style parser."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ParseError, UsageError

STAGES = ("backbone", "pe", "matcher", "eval", "explain")

# (epochs, lr, lr_step, episodes) per stage, scaled from the reference protocol
STAGE_DEFAULTS = {
    "backbone": dict(epochs=50, lr=1e-3, lr_step=20, episodes=1000),
    "pe": dict(epochs=60, lr=1e-4, lr_step=40, episodes=1000),
    "matcher": dict(epochs=20, lr=1e-3, lr_step=10, episodes=1000),
    "eval": dict(epochs=0, lr=0.0, lr_step=1, episodes=10000),
    "explain": dict(epochs=0, lr=0.0, lr_step=1, episodes=1),
}


def _bool(text):
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _name_list(text):
    return [t.strip() for t in text.split(",") if t.strip()]


@dataclass
class TrainConfig:
    stage: str = "backbone"
    seed: int = 0
    epochs: int | None = None
    lr: float | None = None
    lr_step: int | None = None
    lr_factor: float = 10.0
    episodes: int | None = None
    val_episodes: int = 2000
    batch_size: int = 32
    way: int = 5
    shot: int = 1
    query: int = 15
    slots: int | None = None
    pe_stride: int | None = None
    pe_cats: list = field(default_factory=list)
    dim: int = 64
    iterations: int = 3
    lambda_: float = 1.0
    e: float = 1.0
    area_norm: str = "zl"
    loss: str = "bce"
    augment: bool = True
    jobs: int = 1
    global_norm: bool = False

    def resolved(self, stage=None):
        """Copy with stage-dependent defaults filled in."""
        stage = stage or self.stage
        if stage not in STAGE_DEFAULTS:
            raise UsageError(f"unknown stage {stage!r}")
        updates = {k: v for k, v in STAGE_DEFAULTS[stage].items() if getattr(self, k) is None}
        cfg = dataclasses.replace(self, stage=stage, **updates)
        cfg.validate()
        return cfg

    def validate(self):
        if self.e != 1.0:
            raise UsageError("only positive explanation (e = 1) is supported")
        if self.area_norm not in ("zl", "l"):
            raise UsageError("area_norm must be 'zl' or 'l'")
        if self.loss not in ("bce", "softmax_ce"):
            raise UsageError("loss must be 'bce' or 'softmax_ce'")
        for key in ("way", "shot", "batch_size", "dim", "iterations", "val_episodes", "jobs"):
            if getattr(self, key) < 1:
                raise UsageError(f"{key} must be >= 1")
        if self.lr_factor <= 1:
            raise UsageError("lr_factor must be > 1")

    def as_dict(self):
        out = {}
        for f in dataclasses.fields(self):
            out[config_key(f.name)] = getattr(self, f.name)
        return out


def config_key(attr):
    return "lambda" if attr == "lambda_" else attr


def attr_name(key):
    return "lambda_" if key == "lambda" else key


# key -> converter; keys are the names used in files and (dashed) on the CLI
SCHEMA = {
    "seed": int,
    "epochs": int,
    "lr": float,
    "lr_step": int,
    "lr_factor": float,
    "episodes": int,
    "val_episodes": int,
    "batch_size": int,
    "way": int,
    "shot": int,
    "query": int,
    "slots": int,
    "pe_stride": int,
    "pe_cats": _name_list,
    "dim": int,
    "iterations": int,
    "lambda": float,
    "e": float,
    "area_norm": str,
    "loss": str,
    "augment": _bool,
    "jobs": int,
    "global_norm": _bool,
}


def convert(key, text, line=None):
    if key not in SCHEMA:
        raise ParseError(f"unknown key {key!r}", line)
    try:
        value = SCHEMA[key](text.strip())
    except ValueError:
        raise ParseError(f"{key}: cannot read {text.strip()!r} as {SCHEMA[key].__name__.lstrip('_')}", line) from None
    if key == "seed" and not 0 <= value < 2 ** 64:
        raise ParseError("seed must fit in an unsigned 64-bit integer", line)
    return value


def parse_config_text(text):
    """``{key: value}`` from ``key = value`` lines; ``#`` starts a comment."""
    values, seen = {}, {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            continue  # section headers are accepted and ignored
        if "=" not in line:
            raise ParseError(f"expected 'key = value', got {raw.strip()!r}", lineno)
        key, value = (part.strip() for part in line.split("=", 1))
        if key in seen:
            raise ParseError(f"duplicate key {key!r} (first on line {seen[key]})", lineno)
        seen[key] = lineno
        values[key] = convert(key, value, lineno)
    return values


def parse_config(path):
    """TrainConfig from an INI-style file; an empty file gives all defaults."""
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"config file {path} does not exist")
    return build_config(parse_config_text(path.read_text(encoding="utf-8")))


def build_config(values, base=None):
    cfg = dataclasses.replace(base) if base is not None else TrainConfig()
    for key, value in values.items():
        setattr(cfg, attr_name(key), value)
    return cfg
