"""
Configuration management for the genscl toolkit.
"""

import math
import os
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Union

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .errors import ConfigError
from .models import TEACHER_ONLY, LossKind, MixKind
from .utils import format_config_value, parse_key_value_text

AlphaKD = Union[float, Literal["teacher-only"]]


def _validate_alpha_kd(value: AlphaKD) -> AlphaKD:
    if value != TEACHER_ONLY and not (math.isfinite(float(value)) and float(value) >= 0.0):
        raise ValueError(f"alpha_kd must be a finite value >= 0 or 'teacher-only', got {value}")
    return value


class AugmentConfig(BaseModel):
    """Stochastic augmentation a(·): pad-then-crop, horizontal flip, pixel noise."""

    crop_pad: int = Field(default=1, ge=0, description="Zero padding before the random crop, in pixels")
    flip_prob: float = Field(default=0.5, ge=0.0, le=1.0, description="Probability of a horizontal flip")
    noise_std: float = Field(default=0.02, ge=0.0, description="Std of additive Gaussian pixel noise")
    enable_crop: bool = Field(default=True, description="Apply pad-then-crop")
    enable_flip: bool = Field(default=True, description="Apply horizontal flip")
    enable_noise: bool = Field(default=True, description="Apply pixel noise")

    @classmethod
    def disabled(cls) -> "AugmentConfig":
        """Configuration under which augmentation is the identity."""
        return cls(enable_crop=False, enable_flip=False, enable_noise=False)

    def validate_for(self, height: int, width: int) -> None:
        """Check the crop padding against image dimensions."""
        if self.enable_crop and not self.crop_pad < min(height, width) / 2:
            raise ConfigError(
                f"crop_pad={self.crop_pad} must be below half the smaller image side "
                f"({min(height, width)})"
            )


class DatasetParams(BaseModel):
    """Synthetic dataset generation parameters."""

    classes: int = Field(default=3, ge=2, description="Number of classes C")
    per_class: int = Field(default=200, ge=1, description="Examples per class")
    size: int = Field(default=8, ge=4, description="Image height and width")
    channels: int = Field(default=1, ge=1, description="Image channels")
    noise_std: float = Field(default=0.05, ge=0.0, description="Pixel noise around class templates")
    seed: int = Field(default=0, ge=0, description="Generation seed")
    name: str = Field(default="synthetic", description="Dataset name")


class TrainConfig(BaseModel):
    """Contrastive training recipe (SGD momentum, warmup + cosine schedule)."""

    epochs: int = Field(default=50, ge=0, description="Number of epochs")
    batch_size: int = Field(default=32, ge=1, description="Examples per batch N (2N views)")
    lr: float = Field(default=0.1, gt=0.0, description="Base learning rate")
    momentum: float = Field(default=0.9, ge=0.0, lt=1.0, description="SGD momentum")
    weight_decay: float = Field(default=1e-4, ge=0.0, description="L2 weight decay added to gradients")
    warmup_epochs: int = Field(default=2, ge=0, description="Linear warmup epochs")
    tau: float = Field(default=0.1, gt=0.0, description="Contrastive temperature")
    alpha_kd: AlphaKD = Field(default=0.0, description="Distillation weight, or 'teacher-only'")
    loss: LossKind = Field(default=LossKind.GENSCL, description="Contrastive objective")
    mix_kind: MixKind = Field(default=MixKind.NONE, description="Mixing operator")
    beta_alpha: float = Field(default=1.0, gt=0.0, description="Beta(a, a) parameter for mixing weights")
    seed: int = Field(default=0, ge=0, description="Run seed")
    hidden_dim: int = Field(default=64, ge=1, description="Encoder hidden width")
    embed_dim: int = Field(default=32, ge=1, description="Encoder output width E")
    proj_dim: int = Field(default=16, ge=2, description="Projection output width P")
    pos_threshold: float = Field(default=0.5, description="Label similarity above which a pair counts as positive")
    augment: AugmentConfig = Field(default_factory=AugmentConfig)

    @field_validator("alpha_kd")
    @classmethod
    def _check_alpha(cls, value: AlphaKD) -> AlphaKD:
        return _validate_alpha_kd(value)

    @model_validator(mode="after")
    def _check_recipe(self) -> "TrainConfig":
        if self.warmup_epochs > self.epochs:
            raise ValueError(f"warmup_epochs={self.warmup_epochs} exceeds epochs={self.epochs}")
        if self.mix_kind != MixKind.NONE and self.batch_size < 2:
            raise ValueError("Mixing needs batch_size >= 2 so every view has a partner")
        if self.loss == LossKind.SUPCON and self.mix_kind != MixKind.NONE:
            raise ValueError("SupCon needs one-hot labels; use loss=genscl with mixing")
        if self.loss == LossKind.SUPCON and self.uses_teacher:
            raise ValueError("Distillation is only defined for loss=genscl")
        return self

    @property
    def uses_teacher(self) -> bool:
        return self.alpha_kd == TEACHER_ONLY or float(self.alpha_kd) > 0.0


class ProbeConfig(BaseModel):
    """Linear-evaluation probe recipe."""

    epochs: int = Field(default=100, ge=0, description="Probe training epochs")
    batch_size: int = Field(default=32, ge=1, description="Probe batch size")
    lr: float = Field(default=0.1, gt=0.0, description="Constant probe learning rate")
    momentum: float = Field(default=0.9, ge=0.0, lt=1.0, description="Probe SGD momentum")
    weight_decay: float = Field(default=0.0, ge=0.0, description="Probe weight decay")
    seed: int = Field(default=0, ge=0, description="Probe shuffling seed")


class RunConfig(BaseModel):
    """
    Flat configuration consumed by the command-line surface.

    Every key can come from a ``key=value`` config file or a flag; flags win.
    Unknown keys are rejected.
    """

    model_config = ConfigDict(extra="forbid")

    seed: int = Field(default=0, ge=0, description="Seed for every stochastic step")

    # dataset generation
    classes: int = Field(default=3, ge=2, description="Number of classes")
    per_class: int = Field(default=200, ge=1, description="Examples per class")
    size: int = Field(default=8, ge=4, description="Image side length")
    channels: int = Field(default=1, ge=1, description="Image channels")
    noise_std: float = Field(default=0.05, ge=0.0, description="Dataset pixel noise")
    name: str = Field(default="synthetic", description="Dataset name")

    # files
    out: Optional[str] = Field(default=None, description="Output file")
    dataset: Optional[str] = Field(default=None, description="Training dataset file")
    test_dataset: Optional[str] = Field(default=None, description="Test dataset file (linear-eval)")
    checkpoint: Optional[str] = Field(default=None, description="Encoder/projection checkpoint")
    teacher_checkpoint: Optional[str] = Field(default=None, description="Teacher checkpoint")
    metrics: Optional[str] = Field(default=None, description="Per-epoch metrics CSV")
    inputs: List[str] = Field(default_factory=list, description="Metrics CSVs to merge (diagnose)")

    # training
    epochs: int = Field(default=50, ge=0)
    batch_size: int = Field(default=32, ge=1)
    lr: float = Field(default=0.1, gt=0.0)
    momentum: float = Field(default=0.9, ge=0.0, lt=1.0)
    weight_decay: float = Field(default=1e-4, ge=0.0)
    warmup_epochs: int = Field(default=2, ge=0)
    tau: float = Field(default=0.1, gt=0.0)
    alpha_kd: AlphaKD = Field(default=0.0)
    loss: LossKind = Field(default=LossKind.GENSCL)
    mix: MixKind = Field(default=MixKind.NONE)
    beta_alpha: float = Field(default=1.0, gt=0.0)
    hidden_dim: int = Field(default=64, ge=1)
    embed_dim: int = Field(default=32, ge=1)
    proj_dim: int = Field(default=16, ge=2)
    pos_threshold: float = Field(default=0.5)
    teacher: Literal["none", "oracle", "checkpoint"] = Field(
        default="none", description="Teacher source for distillation"
    )
    teacher_hidden_dim: int = Field(default=64, ge=1)
    teacher_tau: float = Field(default=1.0, gt=0.0, description="Teacher softening temperature")

    # augmentation
    crop_pad: int = Field(default=1, ge=0)
    flip_prob: float = Field(default=0.5, ge=0.0, le=1.0)
    aug_noise_std: float = Field(default=0.02, ge=0.0)
    enable_crop: bool = Field(default=True)
    enable_flip: bool = Field(default=True)
    enable_noise: bool = Field(default=True)

    # linear evaluation
    probe_epochs: int = Field(default=100, ge=0)
    probe_batch_size: int = Field(default=32, ge=1)
    probe_lr: float = Field(default=0.1, gt=0.0)

    # gradient check
    trials: int = Field(default=100, ge=1)
    tolerance: float = Field(default=1e-5, gt=0.0)
    mutate_sign: bool = Field(default=False, description="Inject a sign flip (mutation test)")

    @field_validator("alpha_kd")
    @classmethod
    def _check_alpha(cls, value: AlphaKD) -> AlphaKD:
        return _validate_alpha_kd(value)

    @field_validator("inputs", mode="before")
    @classmethod
    def _split_inputs(cls, value: Any) -> Any:
        if isinstance(value, str):
            return [part.strip() for part in value.split(",") if part.strip()]
        return value

    @classmethod
    def from_sources(
        cls,
        file_values: Dict[str, str],
        flag_values: Dict[str, Any],
        env_seed: Optional[int] = None,
    ) -> "RunConfig":
        """Merge config-file values, flag values and the env seed fallback (flags win)."""
        unknown = sorted(set(file_values) - set(cls.model_fields))
        if unknown:
            raise ConfigError(f"Unknown config keys: {', '.join(unknown)}")
        merged: Dict[str, Any] = {}
        if env_seed is not None:
            merged["seed"] = env_seed
        merged.update(file_values)
        merged.update(flag_values)
        try:
            return cls(**merged)
        except ValueError as exc:
            raise ConfigError(f"Invalid configuration: {exc}") from exc

    @classmethod
    def from_file(cls, file_path: Path, **overrides: Any) -> "RunConfig":
        """Load a flat key=value configuration file."""
        text = Path(file_path).read_text(encoding="utf-8")
        return cls.from_sources(parse_key_value_text(text), overrides)

    def dump(self) -> str:
        """Sorted ``key=value`` lines that reproduce this configuration."""
        lines = []
        for key, value in sorted(self.model_dump().items()):
            if value is None:
                continue
            lines.append(f"{key}={format_config_value(value)}")
        return "\n".join(lines) + "\n"

    def require_paths(self, *keys: str) -> None:
        """Ensure the named path keys are set and point at existing files."""
        for key in keys:
            value = getattr(self, key)
            values = value if isinstance(value, list) else [value]
            if not values or any(v is None for v in values):
                raise ConfigError(f"Missing required setting '{key}'")
            for path in values:
                if not Path(path).is_file():
                    raise ConfigError(f"{key}: file not found: {path}")

    def dataset_params(self) -> DatasetParams:
        return DatasetParams(
            classes=self.classes,
            per_class=self.per_class,
            size=self.size,
            channels=self.channels,
            noise_std=self.noise_std,
            seed=self.seed,
            name=self.name,
        )

    def augment_config(self) -> AugmentConfig:
        return AugmentConfig(
            crop_pad=self.crop_pad,
            flip_prob=self.flip_prob,
            noise_std=self.aug_noise_std,
            enable_crop=self.enable_crop,
            enable_flip=self.enable_flip,
            enable_noise=self.enable_noise,
        )

    def train_config(self) -> TrainConfig:
        try:
            return TrainConfig(
                epochs=self.epochs,
                batch_size=self.batch_size,
                lr=self.lr,
                momentum=self.momentum,
                weight_decay=self.weight_decay,
                warmup_epochs=self.warmup_epochs,
                tau=self.tau,
                alpha_kd=self.alpha_kd,
                loss=self.loss,
                mix_kind=self.mix,
                beta_alpha=self.beta_alpha,
                seed=self.seed,
                hidden_dim=self.hidden_dim,
                embed_dim=self.embed_dim,
                proj_dim=self.proj_dim,
                pos_threshold=self.pos_threshold,
                augment=self.augment_config(),
            )
        except ValueError as exc:
            raise ConfigError(f"Invalid training configuration: {exc}") from exc

    def teacher_train_config(self) -> TrainConfig:
        """Recipe for teacher pretraining: same optimizer keys, teacher width, no mixing."""
        return self.train_config().model_copy(
            update={"hidden_dim": self.teacher_hidden_dim, "mix_kind": MixKind.NONE}
        )

    def probe_config(self) -> ProbeConfig:
        return ProbeConfig(
            epochs=self.probe_epochs,
            batch_size=self.probe_batch_size,
            lr=self.probe_lr,
            seed=self.seed,
        )


class Config(BaseModel):
    """Process-level settings read from the environment."""

    log_level: str = Field(default="INFO", description="Logging level")
    log_file: Optional[str] = Field(default=None, description="Optional log file")
    seed: Optional[int] = Field(default=None, description="Seed fallback (GSCL_SEED)")

    @classmethod
    def from_env(cls) -> "Config":
        """Create configuration from environment variables (a .env file is honoured)."""
        load_dotenv()
        raw_seed = os.getenv("GSCL_SEED")
        try:
            seed = int(raw_seed) if raw_seed not in (None, "") else None
        except ValueError as exc:
            raise ConfigError(f"GSCL_SEED must be an integer, got {raw_seed!r}") from exc
        return cls(
            log_level=os.getenv("GSCL_LOG_LEVEL", "INFO").upper(),
            log_file=os.getenv("GSCL_LOG_FILE") or None,
            seed=seed,
        )
