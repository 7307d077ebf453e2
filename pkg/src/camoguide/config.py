"""Flat key=value run configuration shared by the CLI commands.

One namespace covers generator, model, and training settings. Files hold
``key = value`` lines (``#`` comments and blanks allowed); CLI flags
override file values; unknown keys are rejected. Every command writes the
fully resolved config next to its outputs.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

from .dataset import GenConfig
from .model import ModelConfig
from .training import TrainConfig


@dataclass
class RunConfig:
    # dataset generation
    categories: int = 8
    train_queries: int = 400
    test_queries: int = 100
    refs_per_cat: int = 10
    size: int = 64
    contrast_lo: float = 0.05
    contrast_hi: float = 0.2
    unseen_categories: int = 2
    distractors: bool = True
    # model
    channels: int = 64
    baa_iters_top: int = 3
    share_baa: bool = False
    one_way_baa: bool = False
    guidance_mode: str = "mixture"
    no_ref_baseline: bool = False
    freeze_ref: bool = False
    bootstrap_ref: bool = True
    # training
    lr0: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    epochs: int = 20
    batch_size: int = 4
    lambda_cls: float = 0.03
    mu: float = 0.99
    refs_per_query: int = 5
    warmup_steps: int = 100
    seed: int = 0
    eval_every: int = 1
    eval_samples: int = 24
    augment: bool = True


_FIELDS = {f.name: f.type for f in dataclasses.fields(RunConfig)}


class ConfigError(ValueError):
    pass


def _parse_value(key: str, raw: str):
    kind = _FIELDS[key]
    raw = raw.strip()
    if kind == "bool":
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"key {key!r}: expected a boolean, got {raw!r}")
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"key {key!r}: cannot parse {raw!r} as {kind}") from None
    return raw


def load_config_file(path: str) -> dict:
    values = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key = value, got {line!r}")
            key, _, raw = line.partition("=")
            key = key.strip()
            if key not in _FIELDS:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
            values[key] = _parse_value(key, raw)
    return values


def resolve(file_path: str | None = None, overrides: dict | None = None) -> RunConfig:
    """File values first, then explicit overrides, on top of the defaults."""
    values = load_config_file(file_path) if file_path else {}
    for key, val in (overrides or {}).items():
        if val is None:
            continue
        if key not in _FIELDS:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = val
    try:
        return RunConfig(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def dump(cfg: RunConfig) -> str:
    lines = [f"{f.name} = {getattr(cfg, f.name)}" for f in dataclasses.fields(RunConfig)]
    return "\n".join(lines) + "\n"


def write_resolved(cfg: RunConfig, path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dump(cfg))


def gen_config(cfg: RunConfig) -> GenConfig:
    return GenConfig(categories=cfg.categories, train_queries=cfg.train_queries,
                     test_queries=cfg.test_queries, refs_per_cat=cfg.refs_per_cat,
                     size=cfg.size, contrast_lo=cfg.contrast_lo,
                     contrast_hi=cfg.contrast_hi,
                     unseen_categories=cfg.unseen_categories,
                     distractors=cfg.distractors)


def model_config(cfg: RunConfig, categories: int | None = None) -> ModelConfig:
    return ModelConfig(channels=cfg.channels,
                       categories=categories if categories is not None else cfg.categories,
                       input_size=cfg.size, baa_iters_top=cfg.baa_iters_top,
                       share_baa=cfg.share_baa, one_way_baa=cfg.one_way_baa,
                       guidance_mode=cfg.guidance_mode,
                       no_ref_baseline=cfg.no_ref_baseline,
                       freeze_ref=cfg.freeze_ref, bootstrap_ref=cfg.bootstrap_ref,
                       momentum=cfg.mu)


def train_config(cfg: RunConfig) -> TrainConfig:
    return TrainConfig(lr0=cfg.lr0, momentum=cfg.momentum,
                       weight_decay=cfg.weight_decay, epochs=cfg.epochs,
                       batch_size=cfg.batch_size, lambda_cls=cfg.lambda_cls,
                       mu=cfg.mu, refs_per_query=cfg.refs_per_query,
                       warmup_steps=cfg.warmup_steps, seed=cfg.seed,
                       eval_every=cfg.eval_every, eval_samples=cfg.eval_samples,
                       augment=cfg.augment)
