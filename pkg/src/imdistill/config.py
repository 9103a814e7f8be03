"""Run configuration: dataclasses plus a flat ``key = value`` INI file format."""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field, fields, asdict, replace
from pathlib import Path

from .losses import LossWeights

IMS = ("shape", "texture", "background")


@dataclass
class OptimizerConfig:
    name: str = "adam"
    learning_rate: float = 2e-4
    beta1: float = 0.0
    beta2: float = 0.999

    def __post_init__(self):
        if self.name != "adam":
            raise ValueError(f"unsupported optimizer {self.name!r}")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")


@dataclass
class TeacherConfig:
    kind: str = "procedural"
    mechanism: str | None = None
    source: str | None = None
    seed: int = 0


@dataclass
class DistillConfig:
    im: str = "texture"
    weights: LossWeights = field(default_factory=LossWeights)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    batch_size: int = 64
    epochs: int = 20
    disc_steps_per_gen_step: int = 2
    seed: int = 0
    teacher: TeacherConfig = field(default_factory=TeacherConfig)
    dataset: str | None = None
    holdout: str | None = None
    checkpoint_every: int = 0
    profile: str = "mnist28"
    per_class: int = 500
    mode: str = "distill"

    def __post_init__(self):
        if self.im not in IMS:
            raise ValueError(f"im must be one of {IMS}, got {self.im!r}")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.epochs < 0 or self.disc_steps_per_gen_step < 0 or self.checkpoint_every < 0:
            raise ValueError("epochs, disc_steps_per_gen_step and checkpoint_every must be >= 0")
        if self.mode not in ("distill", "baseline"):
            raise ValueError("mode must be 'distill' or 'baseline'")
        if self.teacher.mechanism is None:
            self.teacher = replace(self.teacher, mechanism=self.im)

    @property
    def mask_mode(self):
        return self.im == "shape"

    def with_weights(self, **changes):
        return replace(self, weights=replace(self.weights, **changes))


def _fmt(v):
    if isinstance(v, (list, tuple)):
        return ", ".join(repr(float(x)) for x in v)
    if v is None:
        return "none"
    return str(v)


def _coerce(raw, like, name):
    raw = raw.strip()
    if raw.lower() == "none":
        return None
    if isinstance(like, bool):
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"{name}: expected a boolean, got {raw!r}")
    if isinstance(like, int):
        return int(raw)
    if isinstance(like, float):
        return float(raw)
    return raw


_SECTION_TYPES = {"weights": LossWeights, "optimizer": OptimizerConfig, "teacher": TeacherConfig}


def config_to_ini(config: DistillConfig) -> str:
    cp = configparser.ConfigParser(interpolation=None)
    run = {f.name: getattr(config, f.name) for f in fields(config) if f.name not in _SECTION_TYPES}
    cp["run"] = {k: _fmt(v) for k, v in run.items()}
    for section in _SECTION_TYPES:
        cp[section] = {k: _fmt(v) for k, v in asdict(getattr(config, section)).items()}
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def _section(cp, name, cls):
    defaults = cls()
    out = {}
    if not cp.has_section(name):
        return out
    known = {f.name for f in fields(cls)}
    for key, raw in cp[name].items():
        if key not in known:
            raise ValueError(f"unknown key {key!r} in section [{name}]")
        like = getattr(defaults, key)
        if key == "alpha":
            out[key] = None if raw.strip().lower() == "none" else [float(x) for x in raw.split(",")]
        elif like is None:
            out[key] = None if raw.strip().lower() == "none" else raw.strip()
        else:
            out[key] = _coerce(raw, like, key)
    return out


def config_from_ini(text: str) -> DistillConfig:
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ValueError(f"malformed config: {exc}") from None
    unknown = set(cp.sections()) - {"run", *_SECTION_TYPES}
    if unknown:
        raise ValueError(f"unknown config sections: {sorted(unknown)}")
    run_defaults = DistillConfig(teacher=TeacherConfig(mechanism="texture"))
    run = {}
    if cp.has_section("run"):
        known = {f.name for f in fields(DistillConfig)} - set(_SECTION_TYPES)
        for key, raw in cp["run"].items():
            if key not in known:
                raise ValueError(f"unknown key {key!r} in section [run]")
            like = getattr(run_defaults, key)
            run[key] = (None if raw.strip().lower() == "none" else raw.strip()) if like is None else _coerce(raw, like, key)
    parts = {name: cls(**_section(cp, name, cls)) for name, cls in _SECTION_TYPES.items()}
    return DistillConfig(**run, **parts)


def save_config(config: DistillConfig, path):
    Path(path).write_text(config_to_ini(config))


def load_config(path) -> DistillConfig:
    return config_from_ini(Path(path).read_text())
