"""Experiment configuration with Pydantic validation.

This module provides:
- The declarative experiment schema (regime, models, partition, loss weights,
  schedules, seeds), with unknown keys rejected at every level
- Cascading configuration from defaults, project file, run file, environment
  and command-line overrides
- Exact YAML round-tripping so every run directory can replay its config
"""

from __future__ import annotations

import copy
import json
import os
from pathlib import Path
from typing import Any, Dict, List, Literal, Mapping, Optional, Tuple

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .constants import (
    AUGMENT_FLIP_P,
    AUGMENT_SCALE,
    DEFAULT_ALPHA,
    DEFAULT_BETA,
    DEFAULT_EVAL_BATCH,
    DEFAULT_ITERATIONS,
    DEFAULT_LR_DISCRIMINATOR,
    DEFAULT_LR_GENERATOR,
    DEFAULT_LR_LATENT,
    DEFAULT_PROMPT_LR,
    DEFAULT_STORING_BATCH,
    DEFAULT_SYNTH_BATCH,
    DEFAULT_SYNTH_STEPS,
    DEFAULT_TEMPERATURE,
    DEFAULT_TWO_MODEL_SIDES,
    DEFAULT_Z_DIM,
    MAX_BANK_NEGATIVES,
    SEED_OFFSET_MAPPING,
    SEED_OFFSET_STORING,
    SEED_OFFSET_SYNTHESIS,
    SWEEP_CORE_SIDES,
)
from .exceptions import ConfigurationError, InvalidPartition
from .logging_config import get_logger
from .prompt import RingPartition, make_partition
from .resources import resource_path

logger = get_logger(__name__)

Regime = Literal["kiop-t", "kiop-b", "kiop-bf", "multi", "vanilla"]
TWO_MODEL_REGIMES = ("kiop-t", "kiop-b", "kiop-bf", "vanilla")

_STRICT = ConfigDict(extra="forbid", validate_assignment=True)


# ---------------------------------------------------------------------------
# Pydantic Configuration Models
# ---------------------------------------------------------------------------

class PartitionConfig(BaseModel):
    """Prompt geometry and initialization."""

    model_config = _STRICT

    sides: List[int] = Field(default_factory=lambda: list(DEFAULT_TWO_MODEL_SIDES))
    channels: int = Field(default=3, ge=1)
    init: Literal["zeros", "uniform"] = "zeros"
    init_low: float = -0.1
    init_high: float = 0.1
    clamp_for_display: bool = Field(
        default=True,
        description="Clamp composites to the valid pixel range when emitted as images"
    )

    @model_validator(mode="after")
    def validate_geometry(self) -> "PartitionConfig":
        try:
            make_partition(self.sides, self.channels)
        except InvalidPartition as e:
            raise ValueError(str(e)) from e
        if self.init_high < self.init_low:
            raise ValueError("init_high must be >= init_low")
        return self

    def build(self) -> RingPartition:
        return make_partition(self.sides, self.channels)


class DatasetSpec(BaseModel):
    """Where a dataset lives and how to read it."""

    model_config = _STRICT

    layout: Literal["idx", "cifar", "folder", "toy"] = "toy"
    path: Optional[str] = None
    manifest: Optional[str] = Field(
        default=None,
        description="Manifest name under configs/datasets or a path; defaults to the dataset key"
    )
    variant: int = Field(default=0, ge=0, le=2, description="Toy generator family")
    seed: int = 0
    train_size: int = Field(default=5000, ge=10)
    test_size: int = Field(default=1000, ge=10)
    train_limit: Optional[int] = Field(default=None, ge=1)


class ModelSpec(BaseModel):
    """A frozen source model."""

    model_config = _STRICT

    id: str
    arch: Literal["small_cnn", "resnet18", "resnet50", "vgg13"] = "small_cnn"
    class_count: int = Field(default=10, ge=1)
    dataset: str
    weights: Optional[str] = None
    native_side: Optional[int] = Field(default=None, ge=4, description="Synthesis resolution")
    resize_to_native: bool = False
    width: int = Field(default=32, ge=4, description="Channel width of small_cnn")
    weight: float = Field(default=1.0, ge=0.0, description="Receiver weight w_i")


class AugmentConfig(BaseModel):
    model_config = _STRICT

    scale_low: float = Field(default=AUGMENT_SCALE[0], gt=0.0, le=1.0)
    scale_high: float = Field(default=AUGMENT_SCALE[1], gt=0.0, le=1.0)
    flip_p: float = Field(default=AUGMENT_FLIP_P, ge=0.0, le=1.0)


class SynthesisConfig(BaseModel):
    """Weights and schedule of one synthesize round.

    ``omega``, ``upsilon`` and ``mu_adv`` weight the BN, class-prior and
    adversarial terms of the inversion loss; ``lambda_cr`` and ``lambda_inv``
    weight the contrastive and inversion terms of the round objective.
    """

    model_config = _STRICT

    omega: float = Field(default=1.0, ge=0.0)
    upsilon: float = Field(default=0.5, ge=0.0)
    mu_adv: float = Field(default=0.5, ge=0.0)
    lambda_cr: float = Field(default=0.8, ge=0.0)
    lambda_inv: float = Field(default=1.0, ge=0.0)
    tau: float = Field(default=DEFAULT_TEMPERATURE, gt=0.0)
    steps: int = Field(default=DEFAULT_SYNTH_STEPS, ge=1)
    batch_size: int = Field(default=DEFAULT_SYNTH_BATCH, ge=1)
    z_dim: int = Field(default=DEFAULT_Z_DIM, ge=1)
    lr_generator: float = Field(default=DEFAULT_LR_GENERATOR, gt=0.0)
    lr_latent: float = Field(default=DEFAULT_LR_LATENT, gt=0.0)
    lr_discriminator: float = Field(default=DEFAULT_LR_DISCRIMINATOR, gt=0.0)
    max_bank_negatives: int = Field(default=MAX_BANK_NEGATIVES, ge=1)
    augment: AugmentConfig = Field(default_factory=AugmentConfig)


class StoringConfig(BaseModel):
    """Prompt-update schedule and objective weights."""

    model_config = _STRICT

    alpha: float = Field(default=DEFAULT_ALPHA, ge=0.0)
    beta: float = Field(default=DEFAULT_BETA, ge=0.0)
    iterations: int = Field(default=DEFAULT_ITERATIONS, ge=1)
    prompt_lr: float = Field(default=DEFAULT_PROMPT_LR, gt=0.0)
    batch_size: int = Field(default=DEFAULT_STORING_BATCH, ge=1)
    repeats: int = Field(default=1, ge=1, description="Storing steps per outer iteration")
    exact_sum: bool = Field(default=False, description="Sum the KL over the whole bank")
    cosine_decay: bool = True
    real_data_a: bool = Field(default=False, description="Feed real core-model data instead of bank A")
    concurrent_synthesis: bool = False
    persist_banks: bool = False
    verify_frozen_every: int = Field(default=1, ge=1)
    eval_every: int = Field(
        default=0, ge=0, description="Evaluate Acc.A/Acc.B on the test splits every N iterations; 0 disables"
    )
    progress: bool = True


class VanillaConfig(BaseModel):
    """Unfrozen-student distillation baseline."""

    model_config = _STRICT

    student_lr: float = Field(default=1e-3, gt=0.0)
    iterations: Optional[int] = Field(default=None, ge=1)
    batch_size: int = Field(default=DEFAULT_STORING_BATCH, ge=1)


class PretrainConfig(BaseModel):
    """Toy source-model preparation."""

    model_config = _STRICT

    epochs: int = Field(default=5, ge=1)
    lr: float = Field(default=1e-3, gt=0.0)
    batch_size: int = Field(default=128, ge=1)


class SweepConfig(BaseModel):
    model_config = _STRICT

    core_sides: List[int] = Field(default_factory=lambda: list(SWEEP_CORE_SIDES))
    periphery_side: int = Field(default=128, ge=2)
    iterations: Optional[int] = Field(default=None, ge=1)
    jobs: int = Field(default=1, ge=1)


class EvaluationConfig(BaseModel):
    model_config = _STRICT

    batch_size: int = Field(default=DEFAULT_EVAL_BATCH, ge=1)
    gradcam_layer: Optional[str] = None
    gradcam_count: int = Field(default=8, ge=1)


class SeedConfig(BaseModel):
    """Seeds; stage seeds default to fixed offsets from the global seed."""

    model_config = ConfigDict(extra="forbid", validate_assignment=True, populate_by_name=True)

    global_seed: int = Field(default=0, alias="global")
    mapping: Optional[int] = None
    synthesis: Optional[int] = None
    storing: Optional[int] = None

    def resolved(self) -> Dict[str, int]:
        return {
            "global": self.global_seed,
            "mapping": self.mapping if self.mapping is not None else self.global_seed + SEED_OFFSET_MAPPING,
            "synthesis": self.synthesis if self.synthesis is not None else self.global_seed + SEED_OFFSET_SYNTHESIS,
            "storing": self.storing if self.storing is not None else self.global_seed + SEED_OFFSET_STORING,
        }


class ExperimentConfig(BaseModel):
    """Full declarative description of a run."""

    model_config = _STRICT

    regime: Regime = "kiop-bf"
    device: str = "cpu"
    output_dir: str = "runs/default"
    log_level: str = "INFO"
    partition: PartitionConfig = Field(default_factory=PartitionConfig)
    core: ModelSpec
    receivers: List[ModelSpec] = Field(min_length=1)
    datasets: Dict[str, DatasetSpec]
    synthesis: SynthesisConfig = Field(default_factory=SynthesisConfig)
    storing: StoringConfig = Field(default_factory=StoringConfig)
    vanilla: VanillaConfig = Field(default_factory=VanillaConfig)
    pretrain: PretrainConfig = Field(default_factory=PretrainConfig)
    sweep: SweepConfig = Field(default_factory=SweepConfig)
    evaluation: EvaluationConfig = Field(default_factory=EvaluationConfig)
    seeds: SeedConfig = Field(default_factory=SeedConfig)

    @field_validator("log_level")
    @classmethod
    def validate_log_level(cls, v: str) -> str:
        if v.upper() not in {"DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"}:
            raise ValueError(f"Unknown log level: {v}")
        return v.upper()

    @model_validator(mode="after")
    def validate_references(self) -> "ExperimentConfig":
        for spec in self.all_models():
            if spec.dataset not in self.datasets:
                raise ValueError(
                    f"Model '{spec.id}' references dataset '{spec.dataset}', "
                    f"available: {sorted(self.datasets)}"
                )
        ids = [spec.id for spec in self.all_models()]
        if len(set(ids)) != len(ids):
            raise ValueError(f"Model ids must be unique, got {ids}")

        rings = len(self.partition.sides) - 1
        if self.regime in TWO_MODEL_REGIMES and len(self.receivers) != 1:
            raise ValueError(f"Regime '{self.regime}' takes exactly one receiver")
        if self.regime == "multi" and rings != len(self.receivers) + 1:
            raise ValueError(
                f"Multi-model partition needs {len(self.receivers) + 1} rings "
                f"for {len(self.receivers)} receivers, got {rings}"
            )

        for spec in self.synthesized_models():
            side = spec.native_side or self.partition.sides[0]
            if side % 4:
                raise ValueError(
                    f"Model '{spec.id}' synthesizes at side {side}, which is not a multiple of 4; "
                    f"set partition.sides[0] or {spec.id}.native_side to a multiple of 4"
                )
        return self

    def all_models(self) -> List[ModelSpec]:
        return [self.core, *self.receivers]

    def synthesized_models(self) -> List[ModelSpec]:
        """Models a synthesis bank is inverted from under this regime."""
        core_synthesized = (
            self.regime in ("kiop-bf", "multi") and self.storing.alpha > 0 and not self.storing.real_data_a
        )
        return [self.core, *self.receivers] if core_synthesized else list(self.receivers)


# ---------------------------------------------------------------------------
# Configuration Loader
# ---------------------------------------------------------------------------

def deep_merge(base: Dict[str, Any], override: Mapping[str, Any]) -> Dict[str, Any]:
    """Recursively merge ``override`` into a copy of ``base``."""
    merged = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, Mapping) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


class ConfigLoader:
    """Cascading configuration loader with validation.

    Sources in priority order (low → high):
    1. Project config file (configs/config.yaml)
    2. Run config file (``--config``)
    3. Environment variables (KIOP_DEVICE, KIOP_OUTPUT_DIR, KIOP_SEED)
    4. Command-line overrides
    """

    ENV_KEYS = {
        "KIOP_DEVICE": ("device",),
        "KIOP_OUTPUT_DIR": ("output_dir",),
        "KIOP_SEED": ("seeds", "global"),
    }

    def __init__(self, project_config: Optional[Path] = None):
        self.project_config = project_config if project_config is not None else resource_path("configs", "config.yaml")

    def load(
        self,
        config_path: Optional[str] = None,
        overrides: Optional[Mapping[str, Any]] = None,
    ) -> ExperimentConfig:
        """Load and validate configuration.

        Args:
            config_path: Path to the run config file (YAML/JSON)
            overrides: Nested mapping applied last

        Returns:
            Validated ExperimentConfig instance

        Raises:
            ConfigurationError: If any source is unreadable or the result is invalid
        """
        data = self.merge_sources(config_path, overrides)
        return validate_config(data, source=config_path or "<defaults>")

    def merge_sources(
        self,
        config_path: Optional[str] = None,
        overrides: Optional[Mapping[str, Any]] = None,
    ) -> Dict[str, Any]:
        config: Dict[str, Any] = {}
        if self.project_config and Path(self.project_config).exists():
            config = deep_merge(config, read_config_file(str(self.project_config)))
        if config_path:
            config = deep_merge(config, read_config_file(config_path))
        config = deep_merge(config, self._load_env())
        if overrides:
            config = deep_merge(config, overrides)
        return config

    def _load_env(self) -> Dict[str, Any]:
        config: Dict[str, Any] = {}
        for env_key, path in self.ENV_KEYS.items():
            value = os.environ.get(env_key)
            if not value:
                continue
            if env_key == "KIOP_SEED":
                try:
                    value = int(value)
                except ValueError:
                    raise ConfigurationError(f"{env_key} must be an integer, got '{value}'")
            node = config
            for part in path[:-1]:
                node = node.setdefault(part, {})
            node[path[-1]] = value
        return config


def read_config_file(path: str) -> Dict[str, Any]:
    """Read a YAML or JSON mapping.

    Raises:
        ConfigurationError: file missing, unparsable, or not a mapping
    """
    file_path = Path(path)
    if not file_path.exists():
        raise ConfigurationError(f"Config file not found: {path}")
    try:
        with open(file_path, "r", encoding="utf-8") as f:
            if file_path.suffix.lower() == ".json":
                data = json.load(f)
            else:
                data = yaml.safe_load(f)
    except (yaml.YAMLError, json.JSONDecodeError) as e:
        raise ConfigurationError(f"Cannot parse config file {path}: {e}") from e
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigurationError(f"Config file {path} must contain a mapping at top level")
    return data


def validate_config(data: Mapping[str, Any], source: str = "<config>") -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(dict(data))
    except ValidationError as e:
        first = e.errors()[0]
        location = ".".join(str(part) for part in first.get("loc", ()))
        raise ConfigurationError(
            f"Invalid configuration in {source}: {location}: {first.get('msg')}",
            help_text=str(e),
        ) from e


def dump_config(config: ExperimentConfig) -> str:
    """Serialize a config to YAML text that :func:`parse_config` reads back identically."""
    return yaml.safe_dump(config.model_dump(mode="json", by_alias=True), sort_keys=False)


def parse_config(text: str) -> ExperimentConfig:
    try:
        data = yaml.safe_load(text) or {}
    except yaml.YAMLError as e:
        raise ConfigurationError(f"Cannot parse config text: {e}") from e
    return validate_config(data)


def cli_overrides(
    seed: Optional[int] = None,
    out: Optional[str] = None,
    regime: Optional[str] = None,
) -> Dict[str, Any]:
    """Translate command-line flags into a nested override mapping."""
    overrides: Dict[str, Any] = {}
    if seed is not None:
        overrides["seeds"] = {"global": seed}
    if out is not None:
        overrides["output_dir"] = out
    if regime is not None:
        overrides["regime"] = regime
    return overrides


_config_loader = ConfigLoader()


def load_config(
    path: Optional[str] = None,
    overrides: Optional[Mapping[str, Any]] = None,
) -> ExperimentConfig:
    """Load a validated experiment config through the default cascade."""
    return _config_loader.load(path, overrides)


def with_partition(config: ExperimentConfig, sides: Tuple[int, ...], **updates: Any) -> ExperimentConfig:
    """Copy of ``config`` with new partition sides and top-level updates."""
    data = config.model_dump(mode="json", by_alias=True)
    data["partition"]["sides"] = list(sides)
    data = deep_merge(data, updates)
    return validate_config(data)
