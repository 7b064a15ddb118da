"""Experiment configuration: strict schema, YAML loading, defaults.

Unknown keys are rejected everywhere so a typo cannot silently fall back to
a default.  The same models double as the service's request bodies.
"""

from __future__ import annotations

from pathlib import Path
from typing import Literal

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from fedcourse.conmf import ConMFConfig
from fedcourse.encoder import EncoderConfig
from fedcourse.errors import ConfigError
from fedcourse.federation import FedConfig
from fedcourse.synth import SynthConfig


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class SyntheticSpec(_Strict):
    schools: int = 5
    students_min: int = 24
    students_max: int = 36
    courses: int = 120
    activities: int = 16
    clusters: int = 2
    noise: float = 0.1
    enroll_in: int = 8
    enroll_out: int = 2
    activities_per_student: int = 3
    rating_high: float = 0.9
    rating_low: float = 0.2
    signal: Literal["duration", "score", "mixed"] = "duration"

    def to_synth_config(self) -> SynthConfig:
        return SynthConfig(**self.model_dump())


class FilesSpec(_Strict):
    catalog: str
    schools: list[str] = Field(min_length=1)


class DataSection(_Strict):
    source: Literal["synthetic", "files"] = "synthetic"
    synthetic: SyntheticSpec = Field(default_factory=SyntheticSpec)
    files: FilesSpec | None = None

    @model_validator(mode="after")
    def _check_source(self) -> "DataSection":
        if self.source == "files" and self.files is None:
            raise ValueError("data.source 'files' needs a data.files section")
        return self


class ModelSection(_Strict):
    dim: int = 100
    heads: int = 10
    ffn_dim: int | None = None
    dropout: float = 0.2
    raw_dim: int = 512
    ngram: int = 2
    hash_seed: int = 0

    def to_encoder_config(self) -> EncoderConfig:
        return EncoderConfig(
            dim=self.dim,
            n_heads=self.heads,
            ffn_dim=self.ffn_dim,
            dropout=self.dropout,
            raw_dim=self.raw_dim,
        )


class ObjectiveSection(_Strict):
    beta: float = 0.1
    gamma: float = 0.01
    masked: bool = True
    coupling: Literal["end_to_end", "warm_start"] = "end_to_end"
    batch_size: int | None = None

    def to_conmf_config(self) -> ConMFConfig:
        return ConMFConfig(beta=self.beta, gamma=self.gamma, masked=self.masked)


class FederationSection(_Strict):
    lr_global: float = 0.0001
    rounds: int = 50
    subset_size: int | None = None
    aggregation: Literal["sum", "mean"] = "sum"
    local_epochs: int = 1
    redistribute_every: int = 1
    early_stop: bool = False
    patience: int = 5
    clip_norm: float | None = None

    def to_fed_config(self) -> FedConfig:
        return FedConfig(**self.model_dump())


class EvalSection(_Strict):
    negatives: int = 99

    @model_validator(mode="after")
    def _check(self) -> "EvalSection":
        if self.negatives < 1:
            raise ValueError("eval.negatives must be at least 1")
        return self


class ExperimentConfig(_Strict):
    seed: int = 0
    data: DataSection = Field(default_factory=DataSection)
    model: ModelSection = Field(default_factory=ModelSection)
    objective: ObjectiveSection = Field(default_factory=ObjectiveSection)
    federation: FederationSection = Field(default_factory=FederationSection)
    eval: EvalSection = Field(default_factory=EvalSection)

    def validated(self) -> "ExperimentConfig":
        """Cross-field checks that need the domain constructors."""
        self.model.to_encoder_config()
        self.objective.to_conmf_config()
        self.federation.to_fed_config()
        if self.objective.batch_size is not None:
            if self.objective.batch_size < 1:
                raise ConfigError("objective.batch_size must be at least 1")
            if not self.objective.masked:
                raise ConfigError("mini-batching requires objective.masked = true")
        if self.data.source == "synthetic":
            self.data.synthetic.to_synth_config()
        return self


def config_from_dict(data: dict) -> ExperimentConfig:
    try:
        cfg = ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(str(exc)) from None
    return cfg.validated()


def load_config_data(path: str | Path) -> dict:
    """Read a config file as a raw mapping, before validation."""
    try:
        with open(path, encoding="utf-8") as fh:
            data = yaml.safe_load(fh)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return data


def load_config(path: str | Path) -> ExperimentConfig:
    return config_from_dict(load_config_data(path))


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    """Apply ``section.key=value`` strings onto a raw config mapping."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form path=value")
        dotted, raw_value = item.split("=", 1)
        value = yaml.safe_load(raw_value)
        node = data
        parts = dotted.strip().split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {item!r} descends into a non-mapping")
        node[parts[-1]] = value
    return data
