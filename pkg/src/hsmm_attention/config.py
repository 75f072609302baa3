"""Run configuration: one versioned JSON document plus ``--set key=value`` overrides."""
from __future__ import annotations

import json
from pathlib import Path
from typing import Literal, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .datagen import GenSpec
from .train import TrainConfig

CONFIG_VERSION = 1


class ConfigError(ValueError):
    pass


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class GenSection(_Strict):
    seed: int
    n_utterances: int = Field(32, ge=1)
    offset: int = Field(0, ge=0)
    vocab_size: int = Field(5, ge=1)
    frame_dim: int = Field(4, ge=1)
    duration_mean: Union[float, list[float]] = 4.0
    duration_std: Union[float, list[float]] = 1.0
    d_max_gen: int = Field(8, ge=1)
    noise_std: float = Field(0.1, ge=0)
    min_units: int = Field(3, ge=1)
    max_units: int = Field(6, ge=1)
    target_separation: float = Field(1.0, ge=0)
    no_adjacent_repeats: bool = True

    def spec(self) -> GenSpec:
        return GenSpec(**self.model_dump(exclude={"n_utterances", "offset"}))


class NetworkSection(_Strict):
    hidden: int = Field(64, ge=1)
    layers: int = Field(2, ge=0)
    context_dim: int = Field(32, ge=1)
    shared_prior: bool = True
    seed: int = 0


class TrainSection(_Strict):
    encoder_epochs: int = Field(200, ge=0)
    decoder_epochs: int = Field(100, ge=0)
    joint_epochs: int = Field(200, ge=0)
    lr: float = Field(5e-4, gt=0)
    beta1: float = Field(0.9, ge=0, lt=1)
    beta2: float = Field(0.999, ge=0, lt=1)
    eps: float = Field(1e-8, gt=0)
    batch_size: int | None = Field(None, ge=1)
    seed: int = 0
    var_floor: float = Field(1e-4, gt=0)
    d_max: Union[int, Literal["full", "auto"]] = "full"
    clip_norm: float | None = Field(5.0, gt=0)
    record_wall_time: bool = False

    @field_validator("d_max")
    @classmethod
    def _positive_cap(cls, v):
        if isinstance(v, int) and v < 1:
            raise ValueError("d_max must be >= 1")
        return v

    def train_config(self) -> TrainConfig:
        return TrainConfig(**self.model_dump())


class GradCheckSection(_Strict):
    seed: int = 0
    n_states: int = Field(3, ge=1)
    n_frames: int = Field(8, ge=1)
    unit_dim: int = Field(4, ge=1)
    frame_dim: int = Field(2, ge=1)
    hidden: int = Field(8, ge=1)
    layers: int = Field(1, ge=0)
    context_dim: int = Field(4, ge=1)
    shared_prior: bool = True
    epsilon: float = Field(1e-5, gt=0)
    tolerance: float = Field(1e-3, gt=0)


class RunConfig(_Strict):
    format_version: int
    gen: GenSection | None = None
    network: NetworkSection = NetworkSection()
    train: TrainSection = TrainSection()
    grad_check: GradCheckSection = GradCheckSection()

    @field_validator("format_version")
    @classmethod
    def _version(cls, v):
        if v != CONFIG_VERSION:
            raise ValueError(f"unsupported config version {v}; expected {CONFIG_VERSION}")
        return v


def _parse_scalar(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(raw: dict, overrides: list[str]) -> dict:
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        node = raw
        *parents, leaf = key.split(".")
        for part in parents:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {item!r}: {part} is not a section")
        node[leaf] = _parse_scalar(value)
    return raw


def load_config(path=None, overrides: list[str] | None = None) -> RunConfig:
    raw: dict = {"format_version": CONFIG_VERSION}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
    raw = apply_overrides(raw, overrides or [])
    try:
        return RunConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigError(str(exc)) from exc
