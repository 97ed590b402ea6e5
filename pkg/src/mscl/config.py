"""Run configuration: TOML parsing, validation, and serialization.

The defaults mirror the reference training setup (learning rate 3e-4,
weight decay 0.02, lambda 0.8, theta 2, embedding dim 256), so a bare
config file runs the full pipeline as intended. Serialization is the
exact inverse of parsing: parse -> serialize -> parse is the identity.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import tomli

from .errors import ConfigError, MsclError
from .model import ModelConfig
from .segmenter import SegmenterConfig


@dataclass(frozen=True)
class ModelSection:
    """ModelConfig fields as configured; vocab_size 0 means 'from the data'."""

    topics: int = 6
    states: int = 4
    embed_dim: int = 256
    feature_dim: int = 128
    vocab_size: int = 0
    layers: int = 3
    heads: int = 4
    ffn_dim: int = 512
    max_report_len: int = 64
    patch_size: int = 32
    use_positions: bool = True

    def to_model_config(self, vocab_size: int | None = None) -> ModelConfig:
        size = self.vocab_size if vocab_size is None else vocab_size
        if size < 1:
            raise ConfigError("vocab_size is unset; supply one or build it from the data")
        return ModelConfig(
            topics=self.topics,
            states=self.states,
            embed_dim=self.embed_dim,
            feature_dim=self.feature_dim,
            vocab_size=size,
            layers=self.layers,
            heads=self.heads,
            ffn_dim=self.ffn_dim,
            max_report_len=self.max_report_len,
            patch_size=self.patch_size,
            use_positions=self.use_positions,
        )


@dataclass(frozen=True)
class TrainingSection:
    lam: float = 0.8
    theta: float = 2.0
    tau: float = 0.5
    lr: float = 3e-4
    weight_decay: float = 0.02
    batch_size: int = 8
    epochs: int = 30
    label_mode: str = "exact"
    single_view: bool = False
    no_cl: bool = False
    no_sam: bool = False

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"lam must lie in [0, 1], got {self.lam}")
        if self.theta < 0.0:
            raise ConfigError(f"theta must be nonnegative, got {self.theta}")
        if self.tau <= 0.0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        if self.lr <= 0.0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.weight_decay < 0.0:
            raise ConfigError(f"weight_decay must be nonnegative, got {self.weight_decay}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch_size and epochs must be positive")
        if self.label_mode not in ("exact", "overlap"):
            raise ConfigError(f"unknown label_mode '{self.label_mode}'")


@dataclass(frozen=True)
class DataSection:
    manifest: str = ""
    out_dir: str = "runs/default"
    backend: str = "builtin"
    proposals_dir: str = ""

    def __post_init__(self):
        if self.backend not in ("builtin", "proposals-dir"):
            raise ConfigError(f"unknown backend '{self.backend}'")
        if self.backend == "proposals-dir" and not self.proposals_dir:
            raise ConfigError("backend 'proposals-dir' needs proposals_dir")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    model: ModelSection = field(default_factory=ModelSection)
    segmenter: SegmenterConfig = field(default_factory=SegmenterConfig)
    training: TrainingSection = field(default_factory=TrainingSection)
    data: DataSection = field(default_factory=DataSection)

    def replace_training(self, **kwargs) -> "RunConfig":
        merged = {**asdict(self.training), **kwargs}
        return RunConfig(
            seed=self.seed,
            model=self.model,
            segmenter=self.segmenter,
            training=TrainingSection(**merged),
            data=self.data,
        )

    def as_dict(self) -> dict:
        return {
            "seed": self.seed,
            "model": asdict(self.model),
            "segmenter": asdict(self.segmenter),
            "training": asdict(self.training),
            "data": asdict(self.data),
        }


_SECTIONS = {
    "model": ModelSection,
    "segmenter": SegmenterConfig,
    "training": TrainingSection,
    "data": DataSection,
}


def config_from_dict(raw: dict) -> RunConfig:
    """Build and validate a RunConfig; unknown keys are configuration errors."""
    known_top = {"seed"} | set(_SECTIONS)
    for key in raw:
        if key not in known_top:
            raise ConfigError(f"unknown configuration key '{key}'")
    kwargs = {}
    if "seed" in raw:
        if not isinstance(raw["seed"], int) or isinstance(raw["seed"], bool):
            raise ConfigError("seed must be an integer")
        kwargs["seed"] = raw["seed"]
    for section, cls in _SECTIONS.items():
        payload = raw.get(section, {})
        if not isinstance(payload, dict):
            raise ConfigError(f"section '{section}' must be a table")
        valid = {f.name for f in fields(cls)}
        for key in payload:
            if key not in valid:
                raise ConfigError(f"unknown key '{key}' in section '{section}'")
        try:
            kwargs[section] = cls(**payload)
        except MsclError as exc:
            raise ConfigError(f"section '{section}': {exc}") from exc
    return RunConfig(**kwargs)


def parse_config(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"no configuration file at {path}")
    try:
        with open(path, "rb") as handle:
            raw = tomli.load(handle)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: invalid TOML: {exc}") from exc
    return config_from_dict(raw)


def _toml_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, float)):
        return repr(value)
    if isinstance(value, str):
        return json.dumps(value)
    if isinstance(value, tuple):
        return "[" + ", ".join(_toml_value(v) for v in value) + "]"
    raise ConfigError(f"cannot serialize config value {value!r}")


def serialize_config(config: RunConfig) -> str:
    lines = [f"seed = {_toml_value(config.seed)}", ""]
    for section in _SECTIONS:
        lines.append(f"[{section}]")
        for key, value in asdict(getattr(config, section)).items():
            lines.append(f"{key} = {_toml_value(value)}")
        lines.append("")
    return "\n".join(lines)


def write_config(config: RunConfig, path: str | Path) -> None:
    Path(path).write_text(serialize_config(config))
