"""Experiment configuration: INI files, presets and the config hash."""

from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from .network import HourglassConfig
from .trainer import TrainConfig
from .vocab import TaskKind, TaskSet, parse_task_set


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetConfig:
    kind: str = "synthetic"  # "synthetic" or "surreal"
    root: str = ""
    n_train: int = 500
    n_test: int = 100
    size: int = 128
    n_subjects: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("synthetic", "surreal"):
            raise ConfigError(f"dataset kind must be 'synthetic' or 'surreal', got {self.kind!r}")
        if self.kind == "surreal" and not self.root:
            raise ConfigError("dataset root is required for kind 'surreal'")
        if self.n_train < 1 or self.n_test < 1:
            raise ConfigError("n_train and n_test must be positive")


@dataclass(frozen=True)
class ReportConfig:
    include_background: bool = True
    curve_part: str = ""
    thresholds_2d: str = "0:1:101"  # head lengths
    thresholds_seg: str = "0:100:101"  # 100 - IOU
    thresholds_depth: str = "0:10:101"  # bins
    thresholds_3d: str = "0:200:101"  # mm

    def thresholds(self, task: str) -> np.ndarray:
        return parse_grid(getattr(self, f"thresholds_{task}"))


def parse_grid(text: str) -> np.ndarray:
    try:
        lo, hi, n = text.split(":")
        grid = np.linspace(float(lo), float(hi), int(n))
    except ValueError as e:
        raise ConfigError(f"threshold grid must be 'start:stop:count', got {text!r}") from e
    if grid.size < 1:
        raise ConfigError(f"empty threshold grid {text!r}")
    return grid


@dataclass(frozen=True)
class ExperimentConfig:
    tasks: tuple[TaskSet, ...] = (TaskSet.of(TaskKind.POSE2D),)
    seed: int = 0
    out: str = "runs"
    jobs: int = 1
    max_steps: int | None = None
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    model: HourglassConfig = field(default_factory=HourglassConfig)
    report: ReportConfig = field(default_factory=ReportConfig)

    def semantic_dict(self) -> dict:
        """Every field that can change results; ``out`` and ``jobs`` cannot."""
        return {
            "tasks": [str(t) for t in self.tasks],
            "seed": self.seed,
            "max_steps": self.max_steps,
            "dataset": asdict(self.dataset),
            "train": self.train.to_dict(),
            "model": self.model.to_dict(),
            "report": asdict(self.report),
        }

    def with_tasks(self, tasks) -> "ExperimentConfig":
        return replace(self, tasks=tuple(tasks))


def config_hash(cfg: ExperimentConfig) -> str:
    blob = json.dumps(cfg.semantic_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


# ---------------------------------------------------------------- presets

PRESETS: dict[str, dict[str, dict]] = {
    "desk": {
        "model": {"num_stacks": 2, "features": 64, "depth": 3, "resolution": 32, "input_resolution": 128},
        "dataset": {"kind": "synthetic", "n_train": 500, "n_test": 100, "size": 128},
        "train": {"epochs": 2},
    },
    "paper": {
        "model": {"num_stacks": 2, "features": 256, "depth": 4, "resolution": 64, "input_resolution": 256},
        "dataset": {"size": 256},
        "train": {"epochs": 30},
    },
}


def preset(name: str) -> ExperimentConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return apply_sections(ExperimentConfig(), PRESETS[name])


# ---------------------------------------------------------------- INI io

_SECTIONS = ("experiment", "dataset", "train", "model", "report")
_EXPERIMENT_KEYS = ("tasks", "seed", "out", "jobs", "max_steps")


def _coerce(text: str, like, name: str):
    """Parse ``text`` into the type of the default value ``like``."""
    t = text.strip()
    try:
        if isinstance(like, bool):
            low = t.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(t)
        if isinstance(like, int):
            return int(t)
        if isinstance(like, float):
            return float(t)
        if isinstance(like, tuple):
            return tuple(float(x) for x in t.split(","))
    except ValueError as e:
        raise ConfigError(f"bad value for {name}: {text!r}") from e
    if like is None:
        if t.lower() in ("", "none"):
            return None
        try:
            return int(t)
        except ValueError:
            try:
                return float(t)
            except ValueError:
                return t
    return t


def _update(obj, values: dict, section: str):
    known = {f.name: getattr(obj, f.name) for f in fields(obj)}
    unknown = set(values) - set(known)
    if unknown:
        raise ConfigError(f"unknown keys in [{section}]: {sorted(unknown)}")
    parsed = {}
    for k, v in values.items():
        parsed[k] = _coerce(v, known[k], f"{section}.{k}") if isinstance(v, str) else v
    try:
        return replace(obj, **parsed)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid [{section}]: {e}") from e


def parse_task_list(text: str) -> tuple[TaskSet, ...]:
    items = [s.strip() for s in text.replace(";", ",").split(",") if s.strip()]
    if not items:
        raise ConfigError("no task sets given")
    try:
        sets = tuple(parse_task_set(s) for s in items)
    except ValueError as e:
        raise ConfigError(str(e)) from e
    return sets


def apply_sections(cfg: ExperimentConfig, sections: dict[str, dict]) -> ExperimentConfig:
    unknown = set(sections) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown sections: {sorted(unknown)}")
    exp = dict(sections.get("experiment", {}))
    bad = set(exp) - set(_EXPERIMENT_KEYS)
    if bad:
        raise ConfigError(f"unknown keys in [experiment]: {sorted(bad)}")
    changes = {}
    if "tasks" in exp:
        t = exp.pop("tasks")
        changes["tasks"] = parse_task_list(t) if isinstance(t, str) else tuple(t)
    for k in ("seed", "jobs"):
        if k in exp:
            changes[k] = _coerce(str(exp.pop(k)), 0, f"experiment.{k}")
    if "out" in exp:
        changes["out"] = str(exp.pop("out"))
    if "max_steps" in exp:
        changes["max_steps"] = _coerce(str(exp.pop("max_steps")), None, "experiment.max_steps")
    for name in ("dataset", "train", "model", "report"):
        if name in sections:
            changes[name] = _update(getattr(cfg, name), sections[name], name)
    out = replace(cfg, **changes)
    # Samples are generated or cropped at the network input size.
    if out.dataset.size != out.model.input_resolution:
        if "size" in sections.get("dataset", {}):
            raise ConfigError(
                f"dataset size {out.dataset.size} differs from model input_resolution {out.model.input_resolution}"
            )
        out = replace(out, dataset=replace(out.dataset, size=out.model.input_resolution))
    return out


def load_config(path, base: ExperimentConfig | None = None) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str  # keys are case-sensitive
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except (OSError, configparser.Error) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    sections = {s: dict(parser.items(s)) for s in parser.sections()}
    return apply_sections(base or ExperimentConfig(), sections)


def dump_config(cfg: ExperimentConfig) -> str:
    def fmt(v):
        if isinstance(v, bool):
            return "true" if v else "false"
        if isinstance(v, (tuple, list)):
            return ",".join(repr(float(x)) for x in v)
        if v is None:
            return "none"
        return str(v)

    lines = ["[experiment]"]
    lines.append(f"tasks = {', '.join(str(t) for t in cfg.tasks)}")
    for k in ("seed", "out", "jobs", "max_steps"):
        lines.append(f"{k} = {fmt(getattr(cfg, k))}")
    for name in ("dataset", "train", "model", "report"):
        lines.append("")
        lines.append(f"[{name}]")
        obj = getattr(cfg, name)
        for f in fields(obj):
            lines.append(f"{f.name} = {fmt(getattr(obj, f.name))}")
    return "\n".join(lines) + "\n"
