"""Experiment configuration: one YAML file, one section per stage."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .distill import METHODS
from .schedule import WEIGHTINGS


class ConfigError(ValueError):
    def __init__(self, field_name, message):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass
class DataSection:
    n_points: int = 8000
    std: float = 0.1
    seed: int = 0


@dataclass
class ScheduleSection:
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    weighting: str = "unit"


@dataclass
class ModelSection:
    hidden: int = 128
    n_hidden: int = 3
    time_dim: int = 32
    class_dim: int = 16
    null_dropout: float = 0.1
    seed: int = 0


@dataclass
class TrainingSection:
    epochs: int = 1000
    batch_size: int = 128
    lr: float = 1e-3
    seed: int = 0
    samples: int = 2000


@dataclass
class DistillationSection:
    methods: list = field(default_factory=lambda: ["sds", "jsd"])
    steps: int = 10
    lr: float = 0.03
    guidance_scale: float = 1.0
    t_min: int = 20
    t_max: int = 980
    ratio_weight: bool = True
    inversion_steps: int = 10
    guided_inversion: bool = True
    label: int | None = None
    starts: list = field(default_factory=lambda: [[1.0, 1.0]])
    seeds: int = 100
    seed_offset: int = 0
    workers: int = 1


@dataclass
class OutputSection:
    dir: str = "runs"
    plots: bool = True


SECTIONS = {
    "data": DataSection,
    "schedule": ScheduleSection,
    "model": ModelSection,
    "training": TrainingSection,
    "distillation": DistillationSection,
    "output": OutputSection,
}


@dataclass
class ExperimentConfig:
    data: DataSection = field(default_factory=DataSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    model: ModelSection = field(default_factory=ModelSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    distillation: DistillationSection = field(default_factory=DistillationSection)
    output: OutputSection = field(default_factory=OutputSection)

    @classmethod
    def from_dict(cls, raw: dict | None) -> "ExperimentConfig":
        raw = raw or {}
        unknown = set(raw) - set(SECTIONS)
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown section")
        parts = {}
        for name, kind in SECTIONS.items():
            body = raw.get(name) or {}
            if not isinstance(body, dict):
                raise ConfigError(name, "section must be a mapping")
            known = {f.name for f in fields(kind)}
            for key in body:
                if key not in known:
                    raise ConfigError(f"{name}.{key}", "unknown field")
            parts[name] = kind(**body)
        return cls(**parts).validate()

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError("--config", f"cannot read {path}: {exc}") from exc
        return cls.from_dict(yaml.safe_load(text))

    def to_dict(self):
        return asdict(self)

    def dump(self, path):
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    def validate(self) -> "ExperimentConfig":
        d, s, m, tr, di = self.data, self.schedule, self.model, self.training, self.distillation

        def need(ok, name, msg):
            if not ok:
                raise ConfigError(name, msg)

        need(isinstance(d.n_points, int) and d.n_points >= 1, "data.n_points", "must be an integer >= 1")
        need(d.std > 0, "data.std", "must be positive")
        need(isinstance(s.T, int) and s.T >= 2, "schedule.T", "must be an integer >= 2")
        need(0 < s.beta_start <= s.beta_end < 1, "schedule.beta_start",
             "need 0 < beta_start <= beta_end < 1")
        need(s.weighting in WEIGHTINGS, "schedule.weighting", f"must be one of {WEIGHTINGS}")
        for name in ("hidden", "n_hidden", "time_dim", "class_dim"):
            need(getattr(m, name) >= 1, f"model.{name}", "must be >= 1")
        need(0 <= m.null_dropout < 1, "model.null_dropout", "must be in [0, 1)")
        need(tr.epochs >= 1, "training.epochs", "must be >= 1")
        need(tr.batch_size >= 1, "training.batch_size", "must be >= 1")
        need(tr.lr > 0, "training.lr", "must be positive")
        need(tr.samples >= 0, "training.samples", "must be >= 0")
        need(bool(di.methods) and all(x in METHODS for x in di.methods), "distillation.methods",
             f"must be a nonempty subset of {METHODS}")
        need(di.steps >= 1, "distillation.steps", "must be >= 1")
        need(di.lr > 0, "distillation.lr", "must be positive")
        need(di.guidance_scale >= 0, "distillation.guidance_scale", "must be >= 0")
        need(0 <= di.t_min < di.t_max < s.T, "distillation.t_min", f"need 0 <= t_min < t_max < {s.T}")
        need(di.inversion_steps >= 1, "distillation.inversion_steps", "must be >= 1")
        need(di.t_min >= di.inversion_steps, "distillation.t_min",
             "must be >= inversion_steps so every DDIM grid is strictly increasing")
        need(di.label is None or 0 <= di.label < 8, "distillation.label", "must be null or in [0, 8)")
        need(bool(di.starts) and all(len(p) == 2 for p in di.starts), "distillation.starts",
             "must be a nonempty list of [x, y] pairs")
        need(di.seeds >= 1, "distillation.seeds", "must be >= 1")
        need(di.workers >= 1, "distillation.workers", "must be >= 1")
        return self
