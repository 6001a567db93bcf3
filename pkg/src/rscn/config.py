"""Run configuration files: INI sections [run], [scene], [train], [weights], [eval].

Every key is optional except ``seed``; unknown sections and keys are errors.
"""

from __future__ import annotations

import configparser
import dataclasses
import io
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .losses import LossWeights
from .synthbench import SceneSpec, SpecError
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataSizes:
    source_train: int = 200
    target_train: int = 200
    target_val: int = 100

    def as_tuple(self) -> tuple[int, int, int]:
        return (self.source_train, self.target_train, self.target_val)


@dataclass(frozen=True)
class EvalSettings:
    score_thresh: float = 0.05
    iou_thresh: float = 0.5
    analysis_scenes: int = 60  # source_train scenes used for the feature-space metrics


@dataclass
class RunConfig:
    seed: int
    scene: SceneSpec = field(default_factory=SceneSpec)
    sizes: DataSizes = field(default_factory=DataSizes)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalSettings = field(default_factory=EvalSettings)

    def __post_init__(self):
        self.train = dataclasses.replace(self.train, seed=self.seed)

    def with_weights(self, weights: LossWeights) -> "RunConfig":
        return RunConfig(self.seed, self.scene, self.sizes,
                         dataclasses.replace(self.train, weights=weights), self.eval)

    def to_text(self) -> str:
        parser = configparser.ConfigParser(interpolation=None)
        parser["run"] = {"seed": str(self.seed)}
        parser["scene"] = {**_section(self.scene), **_section(self.sizes)}
        train = _section(self.train, skip=("seed", "weights"))
        parser["train"] = train
        parser["weights"] = _section(self.train.weights)
        parser["eval"] = _section(self.eval)
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()


def _format(value) -> str:
    if isinstance(value, (tuple, list)):
        return ", ".join(_format(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def _section(obj, skip=()) -> dict[str, str]:
    return {f.name: _format(getattr(obj, f.name)) for f in dataclasses.fields(obj)
            if f.name not in skip}


def _parse(raw: str, annotation, key: str):
    origin = typing.get_origin(annotation)
    try:
        if annotation is bool:
            low = raw.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if annotation is int:
            return int(raw)
        if annotation is float:
            return float(raw)
        if origin is tuple:
            args = typing.get_args(annotation)
            inner = args[0]
            return tuple(_parse(p, inner, key) for p in raw.split(",") if p.strip())
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {getattr(annotation, '__name__', annotation)}")
    return raw


def _build(cls, values: dict[str, str], section: str, skip=()):
    hints = typing.get_type_hints(cls)
    known = {f.name for f in dataclasses.fields(cls)} - set(skip)
    kwargs = {}
    for key, raw in values.items():
        if key not in known:
            raise ConfigError(f"unknown key {key!r} in section [{section}]")
        kwargs[key] = _parse(raw, hints[key], f"{section}.{key}")
    return kwargs


SECTIONS = ("run", "scene", "train", "weights", "eval")


def parse_config(text: str) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    for name in parser.sections():
        if name not in SECTIONS:
            raise ConfigError(f"unknown section [{name}]")
    sec = {name: dict(parser[name]) if parser.has_section(name) else {} for name in SECTIONS}

    run = sec["run"]
    if "seed" not in run:
        raise ConfigError("seed required")
    unknown = set(run) - {"seed"}
    if unknown:
        raise ConfigError(f"unknown key {sorted(unknown)[0]!r} in section [run]")
    seed = _parse(run["seed"], int, "run.seed")

    size_keys = {f.name for f in dataclasses.fields(DataSizes)}
    scene_vals = {k: v for k, v in sec["scene"].items() if k not in size_keys}
    size_vals = {k: v for k, v in sec["scene"].items() if k in size_keys}
    try:
        scene = SceneSpec(**_build(SceneSpec, scene_vals, "scene"))
        weights = LossWeights(**_build(LossWeights, sec["weights"], "weights"))
        train = TrainConfig(seed=seed, weights=weights,
                            **_build(TrainConfig, sec["train"], "train", skip=("seed", "weights")))
        sizes = DataSizes(**_build(DataSizes, size_vals, "scene"))
        ev = EvalSettings(**_build(EvalSettings, sec["eval"], "eval"))
    except (SpecError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from None
    if min(sizes.as_tuple()) < 1:
        raise ConfigError("split sizes must be >= 1")
    return RunConfig(seed, scene, sizes, train, ev)


def load_config(path: str | Path) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text)
