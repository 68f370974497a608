from typing import Any, Dict, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from app.exceptions import ConfigError, ShapeMismatchError
from app.models.layers import group_norm
from app.schemas.checkpoint import ModelMetadata

ARCH_IDS = ("guide", "agnostic")


class EmotionClassifier(nn.Module):
    """8-way emotion classifier on clean images.

    `guide` is deeper and average-pools; `agnostic` is shallower, wider and
    max-pools into an MLP head, so guidance and evaluation never share a
    function class.
    """

    def __init__(self, arch_id: str = "guide", num_classes: int = 8, image_channels: int = 3, image_size: int = 32):
        super().__init__()
        if arch_id not in ARCH_IDS:
            raise ConfigError(f"Unknown classifier arch_id '{arch_id}', expected one of {ARCH_IDS}")
        self.arch_id = arch_id
        self.architecture: Dict[str, Any] = {
            "arch_id": arch_id,
            "num_classes": num_classes,
            "image_channels": image_channels,
            "image_size": image_size,
        }
        self.metadata: Optional[ModelMetadata] = None
        self.image_shape = (image_channels, image_size, image_size)

        if arch_id == "guide":
            self.features = nn.Sequential(
                nn.Conv2d(image_channels, 32, 3, padding=1), group_norm(32), nn.SiLU(),
                nn.Conv2d(32, 64, 3, stride=2, padding=1), group_norm(64), nn.SiLU(),
                nn.Conv2d(64, 128, 3, stride=2, padding=1), group_norm(128), nn.SiLU(),
                nn.Conv2d(128, 128, 3, padding=1), group_norm(128), nn.SiLU(),
            )
            self.pool = nn.AdaptiveAvgPool2d(1)
            self.head = nn.Linear(128, num_classes)
        else:
            self.features = nn.Sequential(
                nn.Conv2d(image_channels, 48, 5, padding=2), nn.SiLU(),
                nn.Conv2d(48, 96, 3, stride=2, padding=1), nn.SiLU(),
            )
            self.pool = nn.AdaptiveMaxPool2d(1)
            self.head = nn.Sequential(nn.Linear(96, 64), nn.SiLU(), nn.Linear(64, num_classes))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Logits."""
        return self.head(self.pool(self.features(x)).flatten(1))


def classify(model: EmotionClassifier, z0: torch.Tensor) -> torch.Tensor:
    """Probability vector(s) over the 8 emotions; differentiable wrt z0."""
    single = z0.dim() == 3
    batch = z0[None] if single else z0
    if tuple(batch.shape[1:]) != model.image_shape:
        raise ShapeMismatchError(f"Classifier expects {model.image_shape}, got {tuple(batch.shape[1:])}")
    probs = F.softmax(model(batch), dim=-1)
    return probs[0] if single else probs
