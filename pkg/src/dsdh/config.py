"""Experiment configuration: a JSON document with a fixed key manifest.

Unknown keys are rejected so that a config file always means exactly one run.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .boxes import DeltaScale
from .errors import ConfigError
from .heads import BranchSpec, HeadArchitecture, HeadConfig, LossWeights
from .proposals import JitterParams
from .scenes import SynthConfig


@dataclass(frozen=True)
class OptimizerConfig:
    learning_rate: float = 2e-3
    momentum: float = 0.9
    epochs: int = 13


@dataclass(frozen=True)
class ProposalConfig:
    center_noise: float = 0.25
    scale_noise: float = 0.35
    proposals_per_gt: int = 8
    background_count: int = 12
    minibatch_size: int = 64
    bg_fg_ratio: float = 3.0
    fg_iou: float = 0.5

    def jitter(self) -> JitterParams:
        return JitterParams(self.center_noise, self.scale_noise, self.proposals_per_gt, self.background_count)


@dataclass(frozen=True)
class EvalConfig:
    score_threshold: float = 0.01
    nms_iou: float = 0.5
    max_dets: int = 100
    match_iou: float = 0.5
    interpolation: str = "all_points"
    proposal_seed: int = 0
    clip_to_image: bool = False
    workers: int = 1


@dataclass(frozen=True)
class DataConfig:
    synth: SynthConfig | None = field(default_factory=SynthConfig)
    path: str | None = None


@dataclass(frozen=True)
class ModelConfig:
    output_size: int = 7
    samples_per_bin: int = 2
    class_specific: bool = False
    cascade_stages: int = 2
    cascade_thresholds: tuple[float, ...] = (0.5, 0.6)
    dtype: str = "float64"


@dataclass(frozen=True)
class ExperimentConfig:
    architecture: HeadArchitecture = HeadArchitecture.DSDH
    branch: BranchSpec = field(default_factory=BranchSpec)
    loss: LossWeights = field(default_factory=LossWeights)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    data: DataConfig = field(default_factory=DataConfig)
    proposal: ProposalConfig = field(default_factory=ProposalConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    seed: int = 7
    through_box_gradients: bool = False
    horizontal_flip: bool = True

    def head_config(self, num_classes: int) -> HeadConfig:
        return HeadConfig(
            architecture=self.architecture,
            branch=self.branch,
            num_classes=num_classes,
            output_size=self.model.output_size,
            samples_per_bin=self.model.samples_per_bin,
            scale=DeltaScale(),
            through_box_gradients=self.through_box_gradients,
            class_specific=self.model.class_specific,
            cascade_stages=self.model.cascade_stages,
            cascade_thresholds=tuple(self.model.cascade_thresholds),
            dtype=self.model.dtype,
        )

    def to_dict(self) -> dict[str, Any]:
        return _to_plain(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ExperimentConfig":
        return _from_plain(cls, d, "config")

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


def _to_plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, HeadArchitecture):
        return obj.value
    if isinstance(obj, tuple):
        return [_to_plain(v) for v in obj]
    return obj


_NESTED = {
    "branch": BranchSpec,
    "loss": LossWeights,
    "optimizer": OptimizerConfig,
    "data": DataConfig,
    "proposal": ProposalConfig,
    "eval": EvalConfig,
    "model": ModelConfig,
    "synth": SynthConfig,
}


def _from_plain(cls, d, where: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected an object, got {type(d).__name__}")
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - set(names))
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    kwargs = {}
    for key, value in d.items():
        sub = _NESTED.get(key)
        if sub is not None and value is not None:
            value = _from_plain(sub, value, f"{where}.{key}")
        elif key == "architecture":
            try:
                value = HeadArchitecture(value)
            except ValueError as exc:
                raise ConfigError(f"{where}.architecture: unknown architecture {value!r}") from exc
        elif isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def load_config(path) -> ExperimentConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return ExperimentConfig.from_dict(doc)


def save_config(config: ExperimentConfig, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")
    return path
