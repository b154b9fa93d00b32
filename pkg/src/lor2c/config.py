"""
Experiment configuration: one YAML file, sections mirroring the dataclasses.

    base:      BaseConfig fields
    pretrain:  PretrainConfig fields
    task:      TaskSpec fields
    train:     TrainConfig fields except ``schedule``
    schedule:  ScheduleConfig fields except ``total_epochs`` (taken from train.epochs)
    grid:      m_values, i_values
    output_dir: root for run directories (env LOR2C_OUTPUT_ROOT wins)

Unknown keys are rejected. Any key can be overridden on the command line as
``--section.key value`` or ``--section.key=value``.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Sequence

import yaml

from .errors import ConfigError
from .scheduler import ScheduleConfig
from .tasks import TaskSpec
from .training import PretrainConfig, TrainConfig
from .transformer import BaseConfig

OUTPUT_ROOT_ENV = "LOR2C_OUTPUT_ROOT"


@dataclass(frozen=True)
class GridConfig:
    m_values: tuple[int, ...] = (0, 1, 2, 3)
    i_values: tuple[int, ...] = (0, 1, 2, 3)

    def __post_init__(self):
        object.__setattr__(self, "m_values", tuple(int(v) for v in self.m_values))
        object.__setattr__(self, "i_values", tuple(int(v) for v in self.i_values))
        if not self.m_values or not self.i_values:
            raise ConfigError("grid needs at least one m and one i value")


@dataclass(frozen=True)
class ExperimentConfig:
    base: BaseConfig = field(default_factory=BaseConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    task: TaskSpec = field(default_factory=TaskSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    grid: GridConfig = field(default_factory=GridConfig)
    output_dir: str = "runs"

    @property
    def schedule(self) -> ScheduleConfig:
        return self.train.schedule

    def to_dict(self) -> dict:
        d = {
            "base": asdict(self.base),
            "pretrain": asdict(self.pretrain),
            "task": asdict(self.task),
            "train": {k: v for k, v in asdict(self.train).items() if k != "schedule"},
            "schedule": {k: v for k, v in asdict(self.train.schedule).items() if k != "total_epochs"},
            "grid": {"m_values": list(self.grid.m_values), "i_values": list(self.grid.i_values)},
            "output_dir": self.output_dir,
        }
        d["train"]["betas"] = list(d["train"]["betas"])
        return d

    def output_root(self) -> Path:
        return Path(os.environ.get(OUTPUT_ROOT_ENV) or self.output_dir)

    def with_overrides(self, **train_overrides) -> "ExperimentConfig":
        d = self.to_dict()
        for key, value in train_overrides.items():
            section, _, name = key.partition(".")
            d[section][name] = value
        return from_dict(d)


_SECTIONS = {
    "base": BaseConfig,
    "pretrain": PretrainConfig,
    "task": TaskSpec,
    "train": TrainConfig,
    "schedule": ScheduleConfig,
    "grid": GridConfig,
}
_HIDDEN = {"train": {"schedule"}, "schedule": {"total_epochs"}}


def _section_keys(name: str) -> set[str]:
    return {f.name for f in fields(_SECTIONS[name])} - _HIDDEN.get(name, set())


def _build(cls, values: dict, section: str):
    allowed = _section_keys(section)
    unknown = set(values) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(sorted(unknown))}")
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigError(f"bad value in [{section}]: {exc}") from exc


def from_dict(raw: dict[str, Any]) -> ExperimentConfig:
    raw = dict(raw or {})
    unknown = set(raw) - set(_SECTIONS) - {"output_dir"}
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(sorted(unknown))}")
    parts = {}
    for name in _SECTIONS:
        section = raw.get(name) or {}
        if not isinstance(section, dict):
            raise ConfigError(f"section [{name}] must be a mapping")
        parts[name] = section
    sched_values = dict(parts["schedule"])
    unknown = set(sched_values) - _section_keys("schedule")
    if unknown:
        raise ConfigError(f"unknown key(s) in [schedule]: {', '.join(sorted(unknown))}")
    train_values = dict(parts["train"])
    if "schedule" in train_values:
        raise ConfigError("put schedule keys in the top-level [schedule] section")
    epochs = train_values.get("epochs", TrainConfig.epochs)
    try:
        schedule = ScheduleConfig(**sched_values, total_epochs=epochs)
    except TypeError as exc:
        raise ConfigError(f"bad value in [schedule]: {exc}") from exc
    train = _build(TrainConfig, train_values, "train")
    train = dataclasses.replace(train, schedule=schedule)
    return ExperimentConfig(
        base=_build(BaseConfig, parts["base"], "base"),
        pretrain=_build(PretrainConfig, parts["pretrain"], "pretrain"),
        task=_build(TaskSpec, parts["task"], "task"),
        train=train,
        grid=_build(GridConfig, parts["grid"], "grid"),
        output_dir=str(raw.get("output_dir", "runs")),
    )


def parse_overrides(args: Sequence[str]) -> dict[str, Any]:
    """``['--train.epochs', '5', '--task.kind=parity']`` -> {'train.epochs': 5, ...}."""
    out: dict[str, Any] = {}
    i = 0
    args = list(args)
    while i < len(args):
        tok = args[i]
        if not tok.startswith("--") or "." not in tok:
            raise ConfigError(f"unexpected argument {tok!r}; overrides look like --section.key value")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
        else:
            if i + 1 >= len(args):
                raise ConfigError(f"override {tok} is missing a value")
            i += 1
            value = args[i]
        out[key] = yaml.safe_load(value)
        i += 1
    return out


def apply_overrides(raw: dict, overrides: dict[str, Any]) -> dict:
    raw = json.loads(json.dumps(raw or {}))
    for key, value in overrides.items():
        section, _, name = key.partition(".")
        if section not in _SECTIONS or not name:
            raise ConfigError(f"unknown override --{key}")
        if name not in _section_keys(section):
            raise ConfigError(f"unknown key {name!r} in [{section}] (from --{key})")
        raw.setdefault(section, {})
        if raw[section] is None:
            raw[section] = {}
        raw[section][name] = value
    return raw


def load_config(path: str | Path, overrides: dict[str, Any] | None = None) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path} must hold a mapping of sections")
    return from_dict(apply_overrides(raw, overrides or {}))


def config_hash(payload: dict) -> str:
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


def pretrain_payload(cfg: ExperimentConfig) -> dict:
    d = cfg.to_dict()
    return {"base": d["base"], "pretrain": d["pretrain"]}


def finetune_payload(cfg: ExperimentConfig) -> dict:
    d = cfg.to_dict()
    return {k: d[k] for k in ("base", "pretrain", "task", "train", "schedule")}


def dump_yaml(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=True)
