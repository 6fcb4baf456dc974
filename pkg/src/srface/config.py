"""Experiment configuration: nested dataclasses serialized as YAML."""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List

import yaml

from .data import AugmentConfig, SynthConfig
from .detector import PyramidConfig
from .engine import TrainConfig
from .metrics import HeightBands
from .sr_branch import SRBranchConfig


class ConfigValidationError(ValueError):
    def __init__(self, problems: List[str]):
        self.problems = problems
        super().__init__("invalid config:\n  " + "\n  ".join(problems))


@dataclass(frozen=True)
class EvalConfig:
    score_thresh: float = 0.05
    nms_thresh: float = 0.4
    iou_thresh: float = 0.5
    easy_min: float = 24.0
    medium_min: float = 16.0
    val_n: int = 200
    val_seed: int = 999
    degrade_val: bool = True

    def __post_init__(self):
        if self.medium_min > self.easy_min:
            raise ValueError("medium_min must not exceed easy_min")
        for name in ("score_thresh", "nms_thresh", "iou_thresh"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")

    @property
    def bands(self) -> HeightBands:
        return HeightBands(self.easy_min, self.medium_min)


TOY_PYRAMID = PyramidConfig(
    levels=3, base_channels=16, input_size=64, fpn_channels=16,
    max_channels=256, growth=3.0, deep_blocks=8,
)


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything one run needs. Defaults carry the published training
    hyper-parameters on the desk-scale 64 px, three-level geometry."""

    pyramid: PyramidConfig = TOY_PYRAMID
    sr: SRBranchConfig = SRBranchConfig(channels=16, reduction=4)
    sr_enabled: bool = True
    augment: AugmentConfig = AugmentConfig()
    train: TrainConfig = TrainConfig()
    synth: SynthConfig = SynthConfig()
    eval: EvalConfig = EvalConfig()

    def __post_init__(self):
        problems = []
        if self.synth.image_size != self.pyramid.input_size:
            problems.append(
                f"synth.image_size ({self.synth.image_size}) must equal pyramid.input_size ({self.pyramid.input_size})"
            )
        if self.sr.channels != self.pyramid.fpn_channels:
            problems.append(
                f"sr.channels ({self.sr.channels}) must equal pyramid.fpn_channels ({self.pyramid.fpn_channels})"
            )
        if problems:
            raise ConfigValidationError(problems)

    @classmethod
    def toy(cls) -> "ExperimentConfig":
        """Preset used by the desk-scale ablation: faster schedule than the
        published one so a CPU finishes in minutes, and a training set where
        small faces are the majority."""
        return cls(
            train=TrainConfig(lr0=1e-3, batch_size=8, epochs=15),
            synth=SynthConfig(small_fraction=0.6),
        )

    def replace(self, **sections) -> "ExperimentConfig":
        return dataclasses.replace(self, **sections)

    def with_train(self, **kw) -> "ExperimentConfig":
        return self.replace(train=dataclasses.replace(self.train, **kw))

    def to_dict(self) -> Dict[str, Any]:
        return _to_plain(self)

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def save(self, path) -> None:
        Path(path).write_text(self.dump())

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ExperimentConfig":
        problems: List[str] = []
        obj = _from_plain(cls, data or {}, "", problems)
        if problems:
            raise ConfigValidationError(problems)
        return obj

    @classmethod
    def loads(cls, text: str) -> "ExperimentConfig":
        try:
            data = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigValidationError([f"not valid YAML: {exc}"]) from exc
        if data is not None and not isinstance(data, dict):
            raise ConfigValidationError(["top level must be a mapping"])
        return cls.from_dict(data or {})

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.loads(Path(path).read_text())


def _to_plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (tuple, list)):
        return [_to_plain(v) for v in obj]
    return obj


def _coerce(tp, value, where: str, problems: List[str]):
    origin = typing.get_origin(tp)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            problems.append(f"{where}: expected a mapping")
            return None
        return _from_plain(tp, value, where + ".", problems)
    if tp is bool:
        if not isinstance(value, bool):
            problems.append(f"{where}: expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            problems.append(f"{where}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            problems.append(f"{where}: expected a number, got {value!r}")
            return value
        return float(value)
    if origin is tuple or tp is tuple:
        if not isinstance(value, (list, tuple)):
            problems.append(f"{where}: expected a list, got {value!r}")
            return value
        args = typing.get_args(tp)
        if args and args[-1] is not Ellipsis:
            if len(args) != len(value):
                problems.append(f"{where}: expected {len(args)} items, got {len(value)}")
                return tuple(value)
            return tuple(_coerce(a, v, f"{where}[{i}]", problems) for i, (a, v) in enumerate(zip(args, value)))
        return tuple(value)
    return value


def _from_plain(cls, data: Dict[str, Any], prefix: str, problems: List[str]):
    start = len(problems)
    hints = typing.get_type_hints(cls)
    names = [f.name for f in dataclasses.fields(cls)]
    for key in data:
        if key not in names:
            problems.append(f"{prefix}{key}: unknown key")
    kwargs = {}
    for name in names:
        if name in data:
            kwargs[name] = _coerce(hints[name], data[name], prefix + name, problems)
    if len(problems) > start:
        # fields already known to be bad; constructing would only add noise
        return None
    try:
        return cls(**kwargs)
    except ConfigValidationError as exc:
        problems.extend(exc.problems)
    except (ValueError, TypeError) as exc:
        problems.append(f"{prefix.rstrip('.') or cls.__name__}: {exc}")
    return None
