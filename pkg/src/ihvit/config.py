"""Run configuration: one JSON document with flag overrides.

Sections: synth, pipeline, model (vit, resnet), train, fusion.  Every
field has a default; the fully-defaulted document is valid; unknown keys
are rejected.  Precedence: --set flag > file > default.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .errors import ConfigError
from .resnet import ResNetConfig
from .synth import SynthConfig
from .train import FusionWeights, TrainConfig
from .vit import ChannelSpec, ViTConfig


@dataclass
class PipelineConfig:
    train_fraction: float = 0.8
    augment_only_defect: bool = True


@dataclass
class RunConfig:
    synth: SynthConfig = field(default_factory=SynthConfig)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    vit: ViTConfig = field(default_factory=ViTConfig)
    resnet: ResNetConfig = field(default_factory=ResNetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    fusion: FusionWeights = field(default_factory=FusionWeights)

    def to_dict(self) -> dict:
        return {
            "synth": asdict(self.synth),
            "pipeline": asdict(self.pipeline),
            "model": {"vit": asdict(self.vit), "resnet": asdict(self.resnet)},
            "train": asdict(self.train),
            "fusion": asdict(self.fusion),
        }


def default_config_dict() -> dict:
    return RunConfig().to_dict()


def _merge(base: dict, user, path: str = "") -> None:
    if not isinstance(user, dict):
        raise ConfigError(f"config section {path or '<root>'} must be an object")
    for key, value in user.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if key == "counts":  # free-form class-count map, replaced wholesale
            base[key] = dict(value)
        elif isinstance(base[key], dict):
            _merge(base[key], value, where)
        else:
            base[key] = value


def apply_override(cfg: dict, spec: str) -> None:
    """Apply one --set override of the form section.key[.key]=value."""
    if "=" not in spec:
        raise ConfigError(f"--set expects section.key=value, got {spec!r}")
    dotted, _, raw = spec.partition("=")
    keys = dotted.strip().split(".")
    node = cfg
    for k in keys[:-1]:
        if not isinstance(node, dict) or k not in node:
            raise ConfigError(f"--set: unknown config path {dotted!r}")
        node = node[k]
    leaf = keys[-1]
    if not isinstance(node, dict):
        raise ConfigError(f"--set: unknown config path {dotted!r}")
    if leaf not in node and keys[-2:-1] != ["counts"]:
        raise ConfigError(f"--set: unknown config key {dotted!r}")
    try:
        node[leaf] = json.loads(raw)
    except json.JSONDecodeError:
        node[leaf] = raw  # bare strings allowed without quotes


def run_config_from_dict(obj: dict) -> RunConfig:
    merged = default_config_dict()
    _merge(merged, obj)
    return _construct(merged)


def _construct(d: dict) -> RunConfig:
    s = dict(d["synth"])
    s["resolutions"] = tuple(tuple(r) for r in s["resolutions"])
    s["resolution_weights"] = tuple(s["resolution_weights"])
    s["classes"] = tuple(s["classes"])
    s["counts"] = dict(s["counts"])
    v = dict(d["model"]["vit"])
    v["channels"] = tuple(ChannelSpec(**c) for c in v["channels"])
    return RunConfig(
        synth=SynthConfig(**s),
        pipeline=PipelineConfig(**d["pipeline"]),
        vit=ViTConfig(**v),
        resnet=ResNetConfig(**d["model"]["resnet"]),
        train=TrainConfig(**d["train"]),
        fusion=FusionWeights(**d["fusion"]),
    )


def load_run_config(path=None, overrides: list[str] | None = None,
                    seed: int | None = None) -> RunConfig:
    """Assemble config from defaults, optional file, --set overrides, --seed."""
    merged = default_config_dict()
    if path is not None:
        obj = json.loads(Path(path).read_text())
        _merge(merged, obj)
    for spec in overrides or ():
        apply_override(merged, spec)
    if seed is not None:
        merged["synth"]["seed"] = seed
        merged["train"]["seed"] = seed
    return _construct(merged)
