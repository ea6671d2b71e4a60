"""
Validated configuration models and the YAML run file.
"""

from pathlib import Path
from typing import Annotated, List, Literal, Optional, Tuple, Union

import yaml
from more_itertools import duplicates_everseen
from pydantic import (
    BaseModel,
    BeforeValidator,
    ConfigDict,
    Field,
    ValidationError,
    field_validator,
    model_validator,
)

from dwvit.errors import ConfigurationError

BYPASS_KINDS = {"none", "identity", "dwconv"}


def validate_bypass_kind(v):
    if v not in BYPASS_KINDS:
        raise ValueError(f"Unknown bypass kind: {v}\n    Supported kinds: {sorted(BYPASS_KINDS)}")
    return v


class BypassSpec(BaseModel):
    """Which shortcut spans each group of ``group_size`` blocks."""

    model_config = ConfigDict(extra="forbid")

    kind: Annotated[
        Literal["none", "identity", "dwconv"],
        BeforeValidator(validate_bypass_kind),
    ] = "dwconv"
    kernel_sizes: List[int] = Field(default_factory=lambda: [3])
    group_size: int = Field(1, ge=1)

    @field_validator("kernel_sizes")
    @classmethod
    def validate_kernel_sizes(cls, v: List[int]) -> List[int]:
        for k in v:
            if k < 1 or k % 2 == 0:
                raise ValueError(f"kernel sizes must be odd and positive, got {k}")
        repeated = list(duplicates_everseen(v))
        if repeated:
            raise ValueError(f"parallel branches need distinct kernel sizes, {repeated} repeated")
        return v

    @model_validator(mode="after")
    def validate_branches(self) -> "BypassSpec":
        if self.kind == "dwconv" and not self.kernel_sizes:
            raise ValueError("kind 'dwconv' needs at least one kernel size")
        return self


class ModelConfig(BaseModel):
    """Full architectural description of a classifier."""

    model_config = ConfigDict(extra="forbid")

    image_size: int = Field(32, ge=1)
    patch_size: int = Field(4, ge=1)
    in_channels: int = Field(3, ge=1)
    dim: int = Field(64, ge=1)
    depth: int = Field(4, ge=1)
    heads: int = Field(2, ge=1)
    mlp_ratio: float = Field(4.0, gt=0)
    num_classes: int = Field(10, ge=1)
    use_pos_embed: bool = True
    use_class_token: bool = True
    pooling: Optional[Literal["class_token", "mean"]] = None
    bypass: BypassSpec = Field(default_factory=BypassSpec)
    seed: int = 0

    @model_validator(mode="after")
    def validate_invariants(self) -> "ModelConfig":
        if self.image_size % self.patch_size:
            raise ValueError(
                f"image_size {self.image_size} is not divisible by patch_size {self.patch_size}"
            )
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} is not divisible by heads {self.heads}")
        if self.pooling is None:
            self.pooling = "class_token" if self.use_class_token else "mean"
        if self.pooling == "class_token" and not self.use_class_token:
            raise ValueError("pooling 'class_token' needs use_class_token")
        return self

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid * self.grid

    @property
    def num_tokens(self) -> int:
        return self.num_patches + int(self.use_class_token)

    @property
    def mlp_dim(self) -> int:
        return int(self.dim * self.mlp_ratio)


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    base_lr: float = Field(5e-4, gt=0)
    weight_decay: float = Field(0.05, ge=0)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = Field(300, ge=1)
    warmup_epochs: float = 20
    min_lr: Optional[float] = None
    warmup_start_factor: float = Field(1e-3, ge=0, le=1)
    batch_size: int = Field(128, ge=1)
    seed: int = 0
    label_smoothing: float = Field(0.0, ge=0, lt=1)
    log_every: int = Field(50, ge=1)

    @model_validator(mode="after")
    def validate_schedule(self) -> "TrainConfig":
        if self.min_lr is None:
            self.min_lr = self.base_lr * 1e-2
        if not 0 < self.warmup_epochs < self.epochs:
            raise ValueError(
                f"warmup_epochs {self.warmup_epochs} must lie strictly between 0 and epochs {self.epochs}"
            )
        if self.min_lr > self.base_lr:
            raise ValueError(f"min_lr {self.min_lr} exceeds base_lr {self.base_lr}")
        return self


class DatasetSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    kind: Literal["cifar10_binary", "synthetic"] = "synthetic"
    root: Optional[Path] = None
    split: Literal["train", "test"] = "train"
    subset_size: Optional[int] = Field(None, ge=1)
    val_subset_size: Optional[int] = Field(None, ge=1)
    num_classes: int = Field(10, ge=2)
    image_size: int = Field(32, ge=4)
    synthetic_train_size: int = Field(2000, ge=1)
    synthetic_test_size: int = Field(500, ge=1)
    mean: Optional[Tuple[float, float, float]] = None
    std: Optional[Tuple[float, float, float]] = None
    augmentation: Literal["none", "flip_crop"] = "none"
    seed: int = 0

    @model_validator(mode="after")
    def validate_kind(self) -> "DatasetSpec":
        if self.kind == "cifar10_binary" and (self.num_classes != 10 or self.image_size != 32):
            raise ValueError("cifar10_binary has 10 classes of 32x32 images")
        if (self.mean is None) != (self.std is None):
            raise ValueError("mean and std must be given together")
        if self.std is not None and min(self.std) <= 0:
            raise ValueError(f"std must be positive, got {self.std}")
        return self


class RunConfig(BaseModel):
    """The three sections of a run file."""

    model_config = ConfigDict(extra="forbid")

    model: ModelConfig = Field(default_factory=ModelConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    data: DatasetSpec = Field(default_factory=DatasetSpec)

    @model_validator(mode="after")
    def validate_sections(self) -> "RunConfig":
        if self.model.num_classes != self.data.num_classes:
            raise ValueError(
                f"model.num_classes {self.model.num_classes} != data.num_classes {self.data.num_classes}"
            )
        if self.model.image_size != self.data.image_size:
            raise ValueError(
                f"model.image_size {self.model.image_size} != data.image_size {self.data.image_size}"
            )
        return self


def load_run_config(path: Union[str, Path]) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"config file not found: {path}")
    raw = yaml.safe_load(path.read_text()) or {}
    if not isinstance(raw, dict):
        raise ConfigurationError(f"{path}: expected a mapping with model/train/data sections")
    try:
        return RunConfig.model_validate(raw)
    except ValidationError as e:
        raise ConfigurationError(f"{path}: {e}")


def dump_run_config(config: RunConfig) -> str:
    return yaml.safe_dump(config.model_dump(mode="json"), sort_keys=False)
