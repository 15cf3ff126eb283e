"""Flat ``key=value`` run configuration.

One setting per line, ``#`` starts a comment.  Unknown keys are errors.
Defaults: batch 16, 60 epochs, Adam at 1e-3 with weight decay 1e-4,
exponential decay 0.9.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional, Union

from .data import AugmentationSpec, NormalizationSpec
from .model import get_spec
from .training import SchedulerSpec, TrainConfig

SEED_ENV = "GPLAB_SEED"


class ConfigError(ValueError):
    pass


def _int_tuple(text: str) -> tuple:
    text = text.strip()
    return tuple(int(t) for t in text.split(",") if t.strip()) if text else ()


def _opt_int(text: str) -> Optional[int]:
    return None if text.strip().lower() in ("", "none") else int(text)


def _opt_float(text: str) -> Optional[float]:
    return None if text.strip().lower() in ("", "none", "edge") else float(text)


def _opt_str(text: str) -> Optional[str]:
    return None if text.strip().lower() in ("", "none") else text.strip()


_PARSERS = {
    "int": int, "float": float, "str": str, "tuple": _int_tuple,
    "opt_int": _opt_int, "opt_float": _opt_float, "opt_str": _opt_str,
}


def _kind(f: dataclasses.Field) -> str:
    return f.metadata.get("kind", "str")


def _k(kind: str, default, **kw):
    return dataclasses.field(default=default, metadata={"kind": kind}, **kw)


@dataclass(frozen=True)
class RunConfig:
    model: str = _k("str", "toy-B0")
    batch_size: int = _k("int", 16)
    epochs: int = _k("int", 60)
    lr: float = _k("float", 0.001)
    optimizer: str = _k("str", "adam")
    weight_decay: float = _k("float", 0.0001)
    beta1: float = _k("float", 0.9)
    beta2: float = _k("float", 0.999)
    adam_eps: float = _k("float", 1e-8)
    scheduler: str = _k("str", "exponential")
    gamma: float = _k("float", 0.9)
    step_period: int = _k("int", 10)
    milestones: tuple = _k("tuple", (30, 45))
    seed: int = _k("int", 0)
    checkpoint_epochs: tuple = _k("tuple", (20, 25, 30, 35))
    max_rotation_degrees: float = _k("float", 20.0)
    horizontal_flip_prob: float = _k("float", 0.5)
    vertical_flip_prob: float = _k("float", 0.5)
    brightness_delta: float = _k("float", 0.1)
    contrast_delta: float = _k("float", 0.1)
    rotation_fill: Optional[float] = _k("opt_float", None)
    norm_epsilon: float = _k("float", 1e-10)
    resize: Optional[int] = _k("opt_int", None)
    data: Optional[str] = _k("opt_str", None)
    split: Optional[str] = _k("opt_str", None)
    out: Optional[str] = _k("opt_str", None)
    fold: Optional[int] = _k("opt_int", None)
    jobs: int = _k("int", 1)

    def __post_init__(self):
        # surface invalid values at parse time, not mid-run
        self.train_config()
        get_spec(self.model)

    def train_config(self) -> TrainConfig:
        try:
            return TrainConfig(
                batch_size=self.batch_size, epochs=self.epochs, lr=self.lr, optimizer=self.optimizer,
                weight_decay=self.weight_decay, betas=(self.beta1, self.beta2), adam_eps=self.adam_eps,
                scheduler=SchedulerSpec(self.scheduler, self.gamma, self.step_period, self.milestones),
                seed=self.seed, checkpoint_epochs=self.checkpoint_epochs,
                augmentation=AugmentationSpec(self.max_rotation_degrees, self.horizontal_flip_prob,
                                              self.vertical_flip_prob, self.brightness_delta,
                                              self.contrast_delta, self.rotation_fill),
                normalization=NormalizationSpec(self.norm_epsilon),
                resize=self.resize,
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def render(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if v is None:
                text = "none"
            elif isinstance(v, tuple):
                text = ",".join(str(x) for x in v)
            elif isinstance(v, float):
                text = repr(v)
            else:
                text = str(v)
            lines.append(f"{f.name}={text}")
        return "\n".join(lines) + "\n"


def parse_config(text: str, base: Optional[RunConfig] = None) -> RunConfig:
    known = {f.name: f for f in fields(RunConfig)}
    values = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key=value, got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"line {n}: unknown key {key!r}")
        try:
            values[key] = _PARSERS[_kind(known[key])](value)
        except ValueError:
            raise ConfigError(f"line {n}: bad value {value!r} for {key}") from None
    try:
        return dataclasses.replace(base or RunConfig(), **values)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path: Union[str, Path, None] = None, overrides: Optional[dict] = None) -> RunConfig:
    """Defaults, then ``GPLAB_SEED``, then the config file, then explicit overrides."""
    cfg = RunConfig()
    env_seed = os.environ.get(SEED_ENV)
    if env_seed:
        try:
            cfg = cfg.replace(seed=int(env_seed))
        except ValueError:
            raise ConfigError(f"{SEED_ENV}={env_seed!r} is not an integer") from None
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file {p} not found")
        cfg = parse_config(p.read_text(), cfg)
    if overrides:
        try:
            cfg = cfg.replace(**{k: v for k, v in overrides.items() if v is not None})
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    return cfg
