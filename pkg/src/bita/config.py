"""Flat ``key = value`` run configuration.

Model keys are bare (``hidden_dim = 64``); training keys carry a stage
prefix (``stage1.lr_peak = 1e-3``, ``stage2.epochs = 40``,
``finetune.warmup_steps = 20``).  ``#`` starts a comment.  The environment
variable ``BITA_SEED`` overrides ``seed``.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

from .model import ModelConfig

__all__ = ["TrainConfig", "RunConfig", "parse_config", "load_config", "STAGES"]

STAGES = ("stage1", "stage2", "finetune")


@dataclass
class TrainConfig:
    batch_size: int = 16
    epochs: int = 10
    max_steps: int = 0
    warmup_steps: int = 100
    lr_start: float = 1e-6
    lr_peak: float = 1e-3
    lr_min: float = 1e-5
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    grad_clip: float = 0.0
    augment: str = "flip"
    temperature: float = 0.07
    pooling: str = "max"
    log_every: int = 50


def _default_stages() -> dict[str, TrainConfig]:
    return {
        "stage1": TrainConfig(epochs=750, max_steps=3000, warmup_steps=100,
                              lr_peak=1e-3, lr_min=1e-5),
        "stage2": TrainConfig(epochs=60, warmup_steps=100, lr_peak=1e-2, lr_min=1e-5),
        "finetune": TrainConfig(epochs=10, warmup_steps=20, lr_start=1e-8,
                                lr_peak=1e-3, lr_min=0.0),
    }


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    stages: dict[str, TrainConfig] = field(default_factory=_default_stages)

    @property
    def seed(self) -> int:
        return self.model.seed

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "stages": {k: dataclasses.asdict(v) for k, v in self.stages.items()},
        }

    def digest(self) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(text.encode()).hexdigest()[:16]


def _coerce(raw: str, typ, key: str, lineno: int):
    try:
        if typ in (int, "int"):
            return int(raw)
        if typ in (float, "float"):
            return float(raw)
        return raw
    except ValueError:
        raise ValueError(f"config line {lineno}: {key!r}: cannot parse {raw!r}") from None


def parse_config(text: str, env: dict | None = None) -> RunConfig:
    env = os.environ if env is None else env
    model_kwargs: dict = {}
    stage_kwargs: dict[str, dict] = {s: {} for s in STAGES}
    model_fields = {f.name: f.type for f in fields(ModelConfig)}
    train_fields = {f.name: f.type for f in fields(TrainConfig)}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if "." in key:
            stage, name = key.split(".", 1)
            if stage not in STAGES or name not in train_fields:
                raise ValueError(f"config line {lineno}: unknown key {key!r}")
            stage_kwargs[stage][name] = _coerce(raw, train_fields[name], key, lineno)
        elif key in model_fields:
            model_kwargs[key] = raw if key == "mixer" else _coerce(raw, "int", key, lineno)
        else:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
    if env.get("BITA_SEED"):
        model_kwargs["seed"] = int(env["BITA_SEED"])
    defaults = _default_stages()
    stages = {s: dataclasses.replace(defaults[s], **stage_kwargs[s]) for s in STAGES}
    return RunConfig(ModelConfig(**model_kwargs), stages)


def load_config(path, env: dict | None = None) -> RunConfig:
    return parse_config(Path(path).read_text(), env)
