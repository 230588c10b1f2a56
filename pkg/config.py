"""
Experiment configuration.

A config file is JSON with nested sections (see CONFIG_SCHEMA.md). An optional
"preset" key seeds the generator section from one of the desk presets; keys
given in the file override the preset. The output root may be overridden
through CVRLAB_OUTPUT_ROOT and nothing else is read from the environment.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional

from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator

from behavior_graph import GraphVariant
from errors import ConfigError

logger = logging.getLogger("[LAB]")

OUTPUT_ROOT_ENV = "CVRLAB_OUTPUT_ROOT"
DEFAULT_OUTPUT_ROOT = "runs"


class RateTargets(BaseModel):
    """Marginal click rate plus post-click conditional rates."""

    click: float = Field(146 / 4900, gt=0.0, lt=1.0)
    dmi: float = Field(36 / 146, gt=0.0, lt=1.0)
    dma: float = Field(19 / 146, gt=0.0, lt=1.0)
    purchase: float = Field(5 / 146, gt=0.0, lt=1.0)


class GeneratorSettings(BaseModel):
    n_users: int = Field(10_000, ge=1)
    n_items: int = Field(10_000, ge=1)
    n_categories: int = Field(100, ge=1)
    latent_dim: int = Field(8, ge=1)
    weight_scale: float = Field(1.0, ge=0.0)
    head_correlation: float = Field(0.3, ge=0.0, le=1.0)
    # weight multipliers in slot order y1..y6; D-Ma heads dominate, purchase heads stay flat
    head_scales: List[float] = Field(default_factory=lambda: [1.0, 1.0, 1.5, 0.4, 1.5, 0.4])
    category_share: float = Field(0.5, ge=0.0, le=1.0)
    omi_shift: float = -1.5
    oma_shift: float = -3.0
    train_impressions: int = Field(1_000_000, ge=1)
    test_impressions: int = Field(200_000, ge=1)
    rates: RateTargets = Field(default_factory=RateTargets)
    calibration_pairs: int = Field(200_000, ge=1)
    calibration_tolerance: float = Field(0.005, gt=0.0, le=0.02)
    seed: int = 2021

    @field_validator("head_scales")
    @classmethod
    def _six_scales(cls, scales: List[float]) -> List[float]:
        if len(scales) != 6:
            raise ValueError(f"head_scales needs one entry per head, got {len(scales)}")
        if any(s < 0.0 for s in scales):
            raise ValueError("head_scales must be non-negative")
        return scales


class LossWeights(BaseModel):
    ctr: float = Field(1.0, ge=0.0)
    dmi: float = Field(1.0, ge=0.0)
    dma: float = Field(1.0, ge=0.0)
    ctcvr: float = Field(1.0, ge=0.0)
    # BASE only: weight of the click-subset CVR network
    cvr: float = Field(1.0, ge=0.0)


class TrainingSettings(BaseModel):
    batch_size: int = Field(1024, ge=1)
    epochs: int = Field(1, ge=1)
    learning_rate: float = Field(0.0005, gt=0.0)
    beta1: float = Field(0.9, ge=0.0, lt=1.0)
    beta2: float = Field(0.999, ge=0.0, lt=1.0)
    epsilon: float = Field(1e-8, gt=0.0)
    dtype: Literal["float32", "float64"] = "float32"
    deterministic: bool = True
    embedding_dim: int = Field(16, ge=1)
    head_widths: List[int] = Field(default_factory=lambda: [128, 64, 32])
    loss_weights: LossWeights = Field(default_factory=LossWeights)
    prior_bias_init: bool = True
    log_every: int = Field(100, ge=1)

    @field_validator("head_widths")
    @classmethod
    def _positive_widths(cls, widths: List[int]) -> List[int]:
        if any(w < 1 for w in widths):
            raise ValueError("head widths must be positive")
        return widths


def _preset_generator(users: int, items: int, categories: int, impressions: int,
                      imp: float, clicks: float, dmi: float, dma: float, pay: float) -> Dict[str, Any]:
    return {
        "n_users": users,
        "n_items": items,
        "n_categories": categories,
        "train_impressions": impressions,
        "test_impressions": impressions // 5,
        "rates": {
            "click": clicks / imp,
            "dmi": dmi / clicks,
            "dma": dma / clicks,
            "purchase": pay / clicks,
        },
    }


# Training-set volumes 4.9B / 14.8B / 31.7B scaled to desk size; rates are the
# per-set count ratios (impressions, clicks, D-Mi, D-Ma, purchases in millions).
PRESETS: Dict[str, Dict[str, Any]] = {
    "desk-S": _preset_generator(10_000, 10_000, 100, 1_000_000, 4900, 146, 36, 19, 5),
    "desk-M": _preset_generator(21_000, 15_000, 150, 3_000_000, 14800, 434, 102, 58, 16),
    "desk-L": _preset_generator(33_000, 20_000, 200, 6_500_000, 31700, 925, 235, 122, 32),
}


class ExperimentConfig(BaseModel):
    name: str = "desk-S"
    preset: Optional[str] = None
    generator: GeneratorSettings = Field(default_factory=GeneratorSettings)
    variants: List[GraphVariant] = Field(default_factory=lambda: list(GraphVariant))
    training: TrainingSettings = Field(default_factory=TrainingSettings)
    seeds: List[int] = Field(default_factory=lambda: [1, 2, 3, 4, 5])
    output_dir: Path = Path(DEFAULT_OUTPUT_ROOT)

    @field_validator("seeds")
    @classmethod
    def _seeds_present(cls, seeds: List[int]) -> List[int]:
        if not seeds:
            raise ValueError("seeds must be non-empty")
        if len(set(seeds)) != len(seeds):
            raise ValueError("seeds must be unique")
        return seeds

    @field_validator("variants")
    @classmethod
    def _variants_present(cls, variants: List[GraphVariant]) -> List[GraphVariant]:
        if not variants:
            raise ValueError("variants must be non-empty")
        return variants

    @model_validator(mode="after")
    def _output_resolvable(self) -> "ExperimentConfig":
        path = self.output_dir.expanduser().resolve()
        ancestor = path
        while not ancestor.exists() and ancestor != ancestor.parent:
            ancestor = ancestor.parent
        if not ancestor.is_dir():
            raise ValueError(f"output_dir {self.output_dir} is not under a directory")
        return self

    @property
    def vocab_sizes(self) -> List[int]:
        g = self.generator
        return [g.n_users, g.n_items, g.n_categories]

    def dataset_dir(self) -> Path:
        return self.output_dir / self.name


def config_hash(config: ExperimentConfig) -> str:
    # every field except output_dir
    canonical = json.dumps(config.model_dump(mode="json", exclude={"output_dir"}),
                           sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def _merge(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    merged = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def build_config(data: Dict[str, Any]) -> ExperimentConfig:
    """Validate a raw mapping, expanding a preset and the output-root override."""
    data = dict(data)
    preset = data.get("preset")
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        data["generator"] = _merge(PRESETS[preset], data.get("generator", {}))
        data.setdefault("name", preset)

    output_root = os.getenv(OUTPUT_ROOT_ENV)
    if output_root:
        data["output_dir"] = output_root

    try:
        config = ExperimentConfig.model_validate(data)
    except ValidationError as e:
        logger.error(f"config_invalid errors={e.error_count()}")
        raise ConfigError(str(e)) from e
    logger.info(f"config_loaded name={config.name} variants={[v.value for v in config.variants]} seeds={config.seeds}")
    return config


def load_config(path: Path, overrides: Optional[Dict[str, Any]] = None) -> ExperimentConfig:
    """Read a JSON config; `overrides` replace top-level keys before validation."""
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError("config root must be an object")
    data.update(overrides or {})
    return build_config(data)


def save_config(config: ExperimentConfig, path: Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(config.model_dump(mode="json"), f, indent=2, sort_keys=True)
        f.write("\n")
