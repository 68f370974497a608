from pydantic import BaseModel
from typing import Any, Dict, Literal, Optional


ModelKind = Literal["denoiser", "classifier", "embedder"]


class ModelMetadata(BaseModel):
    """Header stored in front of every checkpoint's parameters."""
    kind: ModelKind
    arch_id: str
    seed: int
    dataset_hash: Optional[str] = None
    architecture: Dict[str, Any] = {}
    schedule: Dict[str, Any] = {}
    training: Dict[str, Any] = {}
    metrics: Dict[str, Any] = {}
    parameter_count: int = 0

    class Config:
        extra = "forbid"
