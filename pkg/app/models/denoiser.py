from dataclasses import dataclass
from typing import Any, Dict, Optional, Union

import torch
import torch.nn as nn
import torch.nn.functional as F

from app.exceptions import ShapeMismatchError
from app.models.layers import CrossAttention, ResBlock, SinusoidalTimeEmbedding, group_norm
from app.schemas.checkpoint import ModelMetadata


@dataclass
class ConditionEmbedding:
    """Token sequence fed to cross-attention.

    `tokens` is (B, L, d). The last `tail_length` positions are the emotional
    block (either the void placeholder or the optimized tokens S).
    """
    tokens: torch.Tensor
    tail_length: int = 0
    tail_is_emotional: bool = False

    @property
    def origin_flags(self):
        """Per-token origin: False for prompt-derived, True for the emotional block."""
        length = self.tokens.shape[1]
        prompt_part = [False] * (length - self.tail_length)
        return prompt_part + [self.tail_is_emotional] * self.tail_length


class Denoiser(nn.Module):
    """Small U-shaped noise predictor with timestep embedding and token cross-attention."""

    def __init__(
        self,
        vocab_size: int,
        max_prompt_len: int = 10,
        token_dim: int = 64,
        base_channels: int = 32,
        attention_heads: int = 4,
        image_channels: int = 3,
        image_size: int = 32,
    ):
        super().__init__()
        self.architecture: Dict[str, Any] = {
            "vocab_size": vocab_size,
            "max_prompt_len": max_prompt_len,
            "token_dim": token_dim,
            "base_channels": base_channels,
            "attention_heads": attention_heads,
            "image_channels": image_channels,
            "image_size": image_size,
        }
        self.metadata: Optional[ModelMetadata] = None
        self.image_shape = (image_channels, image_size, image_size)
        self.max_prompt_len = max_prompt_len
        self.token_dim = token_dim

        # Text encoder T(P) and the reserved placeholder/null tokens
        self.token_embedding = nn.Embedding(vocab_size, token_dim)
        self.position_embedding = nn.Parameter(torch.randn(max_prompt_len, token_dim) * 0.02)
        self.void_token = nn.Parameter(torch.randn(1, token_dim) * 0.02)
        self.null_token = nn.Parameter(torch.randn(1, token_dim) * 0.02)

        c = base_channels
        time_dim = 4 * c
        self.time_embedding = SinusoidalTimeEmbedding(c)
        self.time_mlp = nn.Sequential(nn.Linear(c, time_dim), nn.SiLU(), nn.Linear(time_dim, time_dim))

        self.in_conv = nn.Conv2d(image_channels, c, 3, padding=1)
        self.enc1 = ResBlock(c, c, time_dim)
        self.down1 = nn.Conv2d(c, 2 * c, 3, stride=2, padding=1)
        self.enc2 = ResBlock(2 * c, 2 * c, time_dim)
        self.enc2_attn = CrossAttention(2 * c, token_dim, attention_heads)
        self.down2 = nn.Conv2d(2 * c, 2 * c, 3, stride=2, padding=1)

        self.mid1 = ResBlock(2 * c, 2 * c, time_dim)
        self.mid_attn = CrossAttention(2 * c, token_dim, attention_heads)
        self.mid2 = ResBlock(2 * c, 2 * c, time_dim)

        self.dec2 = ResBlock(4 * c, 2 * c, time_dim)
        self.dec2_attn = CrossAttention(2 * c, token_dim, attention_heads)
        self.dec1 = ResBlock(3 * c, c, time_dim)

        self.out_norm = group_norm(c)
        self.out_conv = nn.Conv2d(c, image_channels, 3, padding=1)
        nn.init.zeros_(self.out_conv.weight)
        nn.init.zeros_(self.out_conv.bias)

    # -- conditioning -----------------------------------------------------

    def encode_prompt(self, token_ids: torch.Tensor) -> torch.Tensor:
        """(B, Lp) padded ids -> (B, Lp, d) prompt embedding T(P)."""
        if token_ids.dim() != 2 or token_ids.shape[1] != self.max_prompt_len:
            raise ShapeMismatchError(
                f"Prompt ids must be (B, {self.max_prompt_len}), got {tuple(token_ids.shape)}"
            )
        return self.token_embedding(token_ids) + self.position_embedding[None]

    def void_block(self, batch: int, length: int) -> torch.Tensor:
        return self.void_token[None].expand(batch, length, -1)

    def condition(
        self,
        token_ids: torch.Tensor,
        tail_length: int,
        emotional_tokens: Optional[torch.Tensor] = None,
    ) -> ConditionEmbedding:
        """T(P) followed by the void block, or by the emotional tokens S when given."""
        prompt = self.encode_prompt(token_ids)
        batch = prompt.shape[0]
        if emotional_tokens is None:
            tail = self.void_block(batch, tail_length).to(prompt.dtype)
        else:
            if emotional_tokens.shape[-2:] != (tail_length, self.token_dim):
                raise ShapeMismatchError(
                    f"Emotional tokens must be ({tail_length}, {self.token_dim}), "
                    f"got {tuple(emotional_tokens.shape)}"
                )
            tail = emotional_tokens.expand(batch, -1, -1) if emotional_tokens.dim() == 2 else emotional_tokens
        return ConditionEmbedding(
            tokens=torch.cat([prompt, tail], dim=1),
            tail_length=tail_length,
            tail_is_emotional=emotional_tokens is not None,
        )

    def null_condition(self, batch: int, tail_length: int) -> ConditionEmbedding:
        """Prompt-independent condition used for the unconditional branch."""
        length = self.max_prompt_len + tail_length
        return ConditionEmbedding(
            tokens=self.null_token[None].expand(batch, length, -1),
            tail_length=tail_length,
        )

    # -- network ------------------------------------------------------------

    def forward(self, z_t: torch.Tensor, t: torch.Tensor, tokens: torch.Tensor) -> torch.Tensor:
        temb = self.time_mlp(self.time_embedding(t).to(z_t.dtype))

        h0 = self.enc1(self.in_conv(z_t), temb)
        h1 = self.enc2(self.down1(h0), temb)
        h1 = self.enc2_attn(h1, tokens)
        h = self.down2(h1)

        h = self.mid1(h, temb)
        h = self.mid_attn(h, tokens)
        h = self.mid2(h, temb)

        h = F.interpolate(h, scale_factor=2, mode="nearest")
        h = self.dec2(torch.cat([h, h1], dim=1), temb)
        h = self.dec2_attn(h, tokens)
        h = F.interpolate(h, scale_factor=2, mode="nearest")
        h = self.dec1(torch.cat([h, h0], dim=1), temb)

        return self.out_conv(F.silu(self.out_norm(h)))


def predict_noise(
    model: Denoiser,
    z_t: torch.Tensor,
    t: Union[int, torch.Tensor],
    c: ConditionEmbedding,
) -> torch.Tensor:
    """eps_theta(z_t, t, c). Accepts a single (C, H, W) latent or a batch."""
    single = z_t.dim() == 3
    batch = z_t[None] if single else z_t
    if tuple(batch.shape[1:]) != model.image_shape:
        raise ShapeMismatchError(f"Latent shape {tuple(batch.shape[1:])} != model shape {model.image_shape}")
    tokens = c.tokens
    if tokens.shape[0] != batch.shape[0]:
        if tokens.shape[0] != 1:
            raise ShapeMismatchError(
                f"Condition batch {tokens.shape[0]} does not match latent batch {batch.shape[0]}"
            )
        tokens = tokens.expand(batch.shape[0], -1, -1)
    if isinstance(t, int) or (torch.is_tensor(t) and t.dim() == 0):
        t = torch.full((batch.shape[0],), int(t), dtype=torch.long, device=batch.device)
    eps = model(batch, t, tokens)
    return eps[0] if single else eps
