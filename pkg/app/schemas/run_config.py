from pydantic import BaseModel, Field, field_serializer, field_validator
from typing import Literal, Optional
import math


RUN_CONFIG_VERSION = 1

_INFINITY_STRINGS = {
    "inf": math.inf, "+inf": math.inf, "infinity": math.inf, "+infinity": math.inf,
    "-inf": -math.inf, "-infinity": -math.inf,
}


def parse_threshold(value):
    """Accept the strings "inf"/"-inf" (JSON has no infinity literal)."""
    if isinstance(value, str) and value.strip().lower() in _INFINITY_STRINGS:
        return _INFINITY_STRINGS[value.strip().lower()]
    return value


def dump_threshold(value: float):
    if math.isinf(value):
        return "inf" if value > 0 else "-inf"
    return value


class GuidanceConfig(BaseModel):
    # Gate threshold on s_clip; "inf" keeps the gate closed, "-inf" opens it at once
    eta: float = 10.0
    eta_percentile: float = Field(default=60.0, ge=0.0, le=100.0)
    omega: float = 3.0
    edit_omega: float = 0.0
    lambda1: float = Field(default=0.0005, ge=0.0)
    lambda2: float = Field(default=0.0015, ge=0.0)
    loss_stop: float = Field(default=1e-4, gt=0.0)
    max_inner: int = Field(default=10, ge=1, le=100)
    lr0: float = Field(default=0.01, gt=0.0)
    lr_decay: Literal["inner", "outer"] = "inner"
    tau: float = Field(default=0.07, gt=0.0)
    rollout_stride: int = Field(default=5, ge=1)
    num_tokens: int = Field(default=4, ge=1)
    reoptimize_each_step: bool = True
    use_inherent: bool = True
    use_similar: bool = True
    optimize_tokens_enabled: bool = True

    class Config:
        extra = "forbid"

    @field_validator("eta", mode="before")
    @classmethod
    def _parse_eta(cls, value):
        return parse_threshold(value)

    @field_serializer("eta")
    def _dump_eta(self, value: float):
        return dump_threshold(value)


class SamplingConfig(BaseModel):
    num_train_steps: int = Field(default=1000, ge=2)
    beta_start: float = 1e-4
    beta_end: float = 0.02
    num_inference_steps: int = Field(default=50, ge=1)
    image_size: int = 32
    channels: int = 3
    max_prompt_len: int = 10

    class Config:
        extra = "forbid"


class DenoiserTrainingConfig(BaseModel):
    base_channels: int = 32
    token_dim: int = 64
    attention_heads: int = 4
    epochs: int = 30
    batch_size: int = 128
    lr: float = 1e-3
    cond_dropout: float = Field(default=0.1, ge=0.0, le=1.0)
    holdout_fraction: float = Field(default=0.1, gt=0.0, lt=1.0)
    # Frozen after the reference run; None skips the check
    loss_ceiling: Optional[float] = 0.12

    class Config:
        extra = "forbid"


class ClassifierTrainingConfig(BaseModel):
    epochs: int = 8
    batch_size: int = 128
    lr: float = 1e-3
    holdout_fraction: float = Field(default=0.1, gt=0.0, lt=1.0)
    noise_augment: float = Field(default=0.2, ge=0.0)
    accuracy_floor: Optional[float] = 0.9
    reduced_fraction: float = Field(default=0.25, gt=0.0, le=1.0)

    class Config:
        extra = "forbid"


class EmbedderTrainingConfig(BaseModel):
    embed_dim: int = 64
    epochs: int = 20
    batch_size: int = 128
    lr: float = 1e-3
    temperature: float = Field(default=0.07, gt=0.0)
    holdout_fraction: float = Field(default=0.1, gt=0.0, lt=1.0)
    retrieval_batch: int = 64
    retrieval_floor: Optional[float] = 0.8

    class Config:
        extra = "forbid"


class DataConfig(BaseModel):
    n: int = Field(default=8000, ge=8)
    rho: float = Field(default=0.8, ge=0.0, le=1.0)
    seed: int = 0

    class Config:
        extra = "forbid"


class PathsConfig(BaseModel):
    # None means "use the matching Settings default"
    data_dir: Optional[str] = None
    models_dir: Optional[str] = None
    output_dir: Optional[str] = None
    wheel_path: Optional[str] = None

    class Config:
        extra = "forbid"


class RunConfig(BaseModel):
    version: int = RUN_CONFIG_VERSION
    seed: int = 0
    guidance: GuidanceConfig = Field(default_factory=GuidanceConfig)
    sampling: SamplingConfig = Field(default_factory=SamplingConfig)
    denoiser: DenoiserTrainingConfig = Field(default_factory=DenoiserTrainingConfig)
    classifier: ClassifierTrainingConfig = Field(default_factory=ClassifierTrainingConfig)
    embedder: EmbedderTrainingConfig = Field(default_factory=EmbedderTrainingConfig)
    data: DataConfig = Field(default_factory=DataConfig)
    paths: PathsConfig = Field(default_factory=PathsConfig)

    class Config:
        extra = "forbid"

    @field_validator("version")
    @classmethod
    def _check_version(cls, value: int) -> int:
        if value != RUN_CONFIG_VERSION:
            raise ValueError(f"unsupported run config version {value} (expected {RUN_CONFIG_VERSION})")
        return value
