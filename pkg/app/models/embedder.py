from typing import Any, Dict, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from app.exceptions import ShapeMismatchError
from app.models.layers import group_norm
from app.schemas.checkpoint import ModelMetadata


class JointEmbedder(nn.Module):
    """Image and prompt encoders into a shared unit sphere (CLIP stand-in)."""

    def __init__(
        self,
        vocab_size: int,
        max_prompt_len: int = 10,
        embed_dim: int = 64,
        image_channels: int = 3,
        image_size: int = 32,
    ):
        super().__init__()
        self.architecture: Dict[str, Any] = {
            "vocab_size": vocab_size,
            "max_prompt_len": max_prompt_len,
            "embed_dim": embed_dim,
            "image_channels": image_channels,
            "image_size": image_size,
        }
        self.metadata: Optional[ModelMetadata] = None
        self.image_shape = (image_channels, image_size, image_size)
        self.max_prompt_len = max_prompt_len

        self.image_encoder = nn.Sequential(
            nn.Conv2d(image_channels, 32, 3, stride=2, padding=1), group_norm(32), nn.SiLU(),
            nn.Conv2d(32, 64, 3, stride=2, padding=1), group_norm(64), nn.SiLU(),
            nn.Conv2d(64, 128, 3, stride=2, padding=1), group_norm(128), nn.SiLU(),
            nn.Flatten(),
            nn.Linear(128 * (image_size // 8) ** 2, 256), nn.SiLU(),
            nn.Linear(256, embed_dim),
        )
        self.token_embedding = nn.Embedding(vocab_size, embed_dim, padding_idx=0)
        self.position_embedding = nn.Parameter(torch.randn(max_prompt_len, embed_dim) * 0.02)
        self.text_head = nn.Sequential(nn.Linear(embed_dim, 128), nn.SiLU(), nn.Linear(128, embed_dim))

    def encode_image(self, images: torch.Tensor) -> torch.Tensor:
        return F.normalize(self.image_encoder(images), dim=-1)

    def encode_text(self, token_ids: torch.Tensor) -> torch.Tensor:
        mask = (token_ids != 0).to(self.position_embedding.dtype)[..., None]
        tokens = (self.token_embedding(token_ids) + self.position_embedding[None]) * mask
        pooled = tokens.sum(dim=1) / mask.sum(dim=1).clamp(min=1.0)
        return F.normalize(self.text_head(pooled), dim=-1)


def embed_image(model: JointEmbedder, image: torch.Tensor) -> torch.Tensor:
    single = image.dim() == 3
    batch = image[None] if single else image
    if tuple(batch.shape[1:]) != model.image_shape:
        raise ShapeMismatchError(f"Embedder expects {model.image_shape}, got {tuple(batch.shape[1:])}")
    out = model.encode_image(batch)
    return out[0] if single else out


def embed_text(model: JointEmbedder, token_ids: torch.Tensor) -> torch.Tensor:
    single = token_ids.dim() == 1
    batch = token_ids[None] if single else token_ids
    if batch.shape[1] != model.max_prompt_len:
        raise ShapeMismatchError(
            f"Prompt ids must have length {model.max_prompt_len}, got {batch.shape[1]}"
        )
    out = model.encode_text(batch)
    return out[0] if single else out
