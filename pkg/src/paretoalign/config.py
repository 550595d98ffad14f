"""Run configuration: one validated document drives every pipeline stage.

The same pydantic models back the YAML config file, the service request
bodies and ``--print-config``. The JSON schema published by
:func:`config_schema` is the authoritative description of the file format.
"""

from __future__ import annotations

from typing import Literal, Optional

import numpy as np
import yaml
from pydantic import BaseModel, Field, field_validator, model_validator

DEFAULT_PREFERENCES = [
    [0.1, 0.9],
    [0.3, 0.7],
    [0.5, 0.5],
    [0.7, 0.3],
    [0.9, 0.1],
]


class WorldSettings(BaseModel):
    """Synthetic ground-truth world used for data generation and simulation."""

    catalog_size: int = Field(default=1000, ge=50)
    latent_dim: int = Field(default=8, ge=1)
    affinity_scale: float = Field(default=0.75, gt=0)
    attract_sigma: float = Field(default=1.0, gt=0)
    convert_logit_mean: float = -2.2
    convert_logit_sigma: float = Field(default=1.5, gt=0)
    attract_convert_corr: float = Field(default=-0.5, ge=-1.0, le=0.0)
    mean_session_len: float = Field(default=5.0, ge=2.0)
    n_sessions: int = Field(default=50000, ge=1)
    train_fraction: float = Field(default=0.8, gt=0.0, lt=1.0)


class ModelSettings(BaseModel):
    embed_dim: int = Field(default=32, ge=1)
    hidden_dim: int = Field(default=64, ge=1)
    max_prefix_len: int = Field(default=20, ge=1)
    position_decay: float = Field(default=0.8, gt=0.0, le=1.0)


class LossSettings(BaseModel):
    """Scalarization and per-objective loss configuration."""

    reg_weight: float = Field(default=1.0, ge=0.0, description="weight of the non-uniformity regularizer")
    n_negatives: int = Field(default=64, ge=1)
    use_distortion: bool = False
    exact_softmax_threshold: int = Field(default=2048, ge=1)
    dirichlet_beta: list[float] = Field(default=[0.5, 0.5])
    epsilon_clip: float = Field(default=1e-4, gt=0.0, lt=0.5)

    @field_validator("dirichlet_beta")
    @classmethod
    def _beta_positive(cls, v: list[float]) -> list[float]:
        if len(v) != 2 or any(b <= 0 for b in v):
            raise ValueError("dirichlet_beta must be two positive concentrations")
        return v


class TrainSettings(BaseModel):
    epochs: int = Field(default=10, ge=0)
    batch_size: int = Field(default=128, ge=1)
    learning_rate: float = Field(default=1e-3, gt=0)
    optimizer: Literal["adam", "sgd"] = "adam"
    adam_beta1: float = Field(default=0.9, ge=0.0, lt=1.0)
    adam_beta2: float = Field(default=0.999, ge=0.0, lt=1.0)
    adam_eps: float = Field(default=1e-8, gt=0.0)
    update_position_decay: bool = False


class MetricSettings(BaseModel):
    k: int = Field(default=20, ge=1)
    preferences: list[list[float]] = Field(default_factory=lambda: [list(p) for p in DEFAULT_PREFERENCES])

    @field_validator("preferences")
    @classmethod
    def _valid_simplex_points(cls, v: list[list[float]]) -> list[list[float]]:
        if len(v) < 2:
            raise ValueError("need at least two preference vectors")
        for p in v:
            if len(p) != 2 or any(x < 0 for x in p) or abs(sum(p) - 1.0) > 1e-9:
                raise ValueError(f"preference {p} is not a point on the 2-simplex")
        if len({tuple(p) for p in v}) != len(v):
            raise ValueError("preference vectors must be distinct")
        return v


class ExperimentSettings(BaseModel):
    """Simulated A/B experiment: traffic split, serving and user behavior."""

    n_impressions: int = Field(default=250000, ge=1)
    salt: int = 9001
    shares: Optional[list[float]] = None
    click_scale: float = Field(default=1.0, gt=0)
    click_bias: Optional[float] = None
    target_ctr: float = Field(default=0.05, gt=0.0, lt=1.0)
    pilot_impressions: int = Field(default=4000, ge=100)
    mean_context_len: float = Field(default=5.0, ge=1.0)
    max_context_len: int = Field(default=12, ge=1)
    position_exponent: float = Field(default=1.0, gt=0)
    aa_mode: bool = False
    aa_preference: list[float] = Field(default=[0.5, 0.5])

    @field_validator("shares")
    @classmethod
    def _shares_sum_to_one(cls, v: Optional[list[float]]) -> Optional[list[float]]:
        if v is not None:
            if any(s < 0 for s in v):
                raise ValueError("shares must be non-negative")
            if abs(sum(v) - 1.0) > 1e-9:
                raise ValueError(f"shares sum to {sum(v)}, expected 1")
        return v


class RunConfig(BaseModel):
    """Top-level configuration binding the five pipeline stages together."""

    seed: int = 7
    alpha: float = Field(default=0.05, gt=0.0, lt=1.0)
    world: WorldSettings = Field(default_factory=WorldSettings)
    model: ModelSettings = Field(default_factory=ModelSettings)
    loss: LossSettings = Field(default_factory=LossSettings)
    train: TrainSettings = Field(default_factory=TrainSettings)
    metrics: MetricSettings = Field(default_factory=MetricSettings)
    experiment: ExperimentSettings = Field(default_factory=ExperimentSettings)

    @model_validator(mode="after")
    def _cross_checks(self) -> "RunConfig":
        g = len(self.metrics.preferences)
        if self.experiment.shares is not None and len(self.experiment.shares) != g:
            raise ValueError(
                f"experiment.shares has {len(self.experiment.shares)} entries "
                f"but metrics.preferences defines {g} groups"
            )
        return self


class ConfigError(ValueError):
    """Invalid or unreadable run configuration."""


def derive_seed(master: int, stream: int) -> int:
    """Derive an independent 64-bit stage seed from the master seed."""
    state = np.random.SeedSequence((master, stream)).generate_state(1, dtype=np.uint64)
    return int(state[0])


# fixed stream indices, one per stage that consumes randomness
STREAM_WORLD = 0
STREAM_SESSIONS = 1
STREAM_MODEL_INIT = 2
STREAM_TRAIN = 3
STREAM_EXPERIMENT = 4


def load_config(path: str) -> RunConfig:
    """Load and validate a YAML config file; raises ConfigError on any problem."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = yaml.safe_load(fh)
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"config root must be a mapping, got {type(raw).__name__}")
    try:
        return RunConfig.model_validate(raw)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def dump_config(cfg: RunConfig) -> str:
    """Render a config back to YAML with stable key order."""
    return yaml.safe_dump(cfg.model_dump(), sort_keys=False)


def config_schema() -> dict:
    return RunConfig.model_json_schema()
