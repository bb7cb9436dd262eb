"""Run configuration: one strict JSON document.

Sections ``model``, ``objective``, ``schedule``, ``data``, ``train`` plus a
top-level ``seed``. Unknown keys are rejected and missing required keys are
reported by dotted path (``schedule.peak_lr``). :meth:`RunConfig.to_dict`
materializes every default so the echoed file reproduces the run.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .encoder import ModelConfig
from .errors import ConfigError
from .objectives import ObjectiveConfig


@dataclass
class ScheduleConfig:
    peak_lr: float
    warmup_steps: int
    max_steps: int
    clip_norm: float = 2.0
    beta1: float = 0.9
    beta2: float = 0.98
    adam_eps: float = 1e-6
    weight_decay: float = 0.01

    def __post_init__(self):
        if not 0 < self.warmup_steps < self.max_steps:
            raise ConfigError(
                f"need 0 < warmup_steps ({self.warmup_steps}) < max_steps ({self.max_steps})",
                "schedule.warmup_steps",
            )
        if self.clip_norm <= 0:
            raise ConfigError("clip_norm must be > 0", "schedule.clip_norm")
        if self.peak_lr < 0:
            raise ConfigError("peak_lr must be >= 0", "schedule.peak_lr")


@dataclass
class DataConfig:
    corpus: str
    seq_len: int = 64
    batch_size: int = 16
    vocab_file: str | None = None


@dataclass
class TrainConfig:
    output_dir: str = "runs/default"
    metrics_every: int = 10
    checkpoint_every: int = 500


@dataclass
class RunConfig:
    model: ModelConfig
    objective: ObjectiveConfig
    schedule: ScheduleConfig
    data: DataConfig
    train: TrainConfig = field(default_factory=TrainConfig)
    seed: int = 0

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "objective": self.objective.to_dict(),
            "schedule": dataclasses.asdict(self.schedule),
            "data": dataclasses.asdict(self.data),
            "train": dataclasses.asdict(self.train),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> RunConfig:
        return parse_run_config(doc)


_RENAMES = {"objective": {"lambda": "loss_lambda"}}


def _build(section: str, klass, doc, extra_defaults=None):
    if not isinstance(doc, dict):
        raise ConfigError(f"{section} must be a JSON object", section)
    renames = _RENAMES.get(section, {})
    doc = {renames.get(k, k): v for k, v in doc.items()}
    inverse = {v: k for k, v in renames.items()}
    known = {f.name: f for f in dataclasses.fields(klass)}
    for key in doc:
        if key not in known:
            raise ConfigError(f"unknown key {section}.{key}", f"{section}.{key}")
    for name, f in known.items():
        if name in doc:
            continue
        if extra_defaults and name in extra_defaults:
            doc[name] = extra_defaults[name]
        elif f.default is dataclasses.MISSING and f.default_factory is dataclasses.MISSING:
            key = f"{section}.{inverse.get(name, name)}"
            raise ConfigError(f"missing required key {key}", key)
    try:
        return klass(**doc)
    except ConfigError:
        raise
    except TypeError as e:
        raise ConfigError(f"{section}: {e}", section) from None


def parse_run_config(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    sections = {"model", "objective", "schedule", "data", "train", "seed"}
    for key in doc:
        if key not in sections:
            raise ConfigError(f"unknown key {key}", key)
    for key in ("model", "schedule", "data"):
        if key not in doc:
            raise ConfigError(f"missing required key {key}", key)
    data = _build("data", DataConfig, doc["data"])
    model = _build("model", ModelConfig, doc["model"], {"max_seq_len": data.seq_len})
    if data.seq_len > model.max_seq_len:
        raise ConfigError("data.seq_len exceeds model.max_seq_len", "data.seq_len")
    seed = doc.get("seed", 0)
    if not isinstance(seed, int):
        raise ConfigError("seed must be an integer", "seed")
    return RunConfig(
        model=model,
        objective=_build("objective", ObjectiveConfig, doc.get("objective", {})),
        schedule=_build("schedule", ScheduleConfig, doc["schedule"]),
        data=data,
        train=_build("train", TrainConfig, doc.get("train", {})),
        seed=seed,
    )


def load_run_config(path) -> RunConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON: {e}") from None
    return parse_run_config(doc)
