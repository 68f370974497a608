import pytest
import torch
import torch.nn as nn

from app.models.checkpoints import ModelBundle
from app.models.classifiers import EmotionClassifier
from app.models.denoiser import Denoiser
from app.models.embedder import JointEmbedder
from app.schemas.run_config import (
    DenoiserTrainingConfig,
    EmbedderTrainingConfig,
    GuidanceConfig,
    RunConfig,
    SamplingConfig,
)
from app.services.diffusion_core import make_linear_schedule
from app.services.glyph_data import generate_dataset, tokenizer


@pytest.fixture(autouse=True)
def _quiet_progress(monkeypatch):
    from app.config import settings

    monkeypatch.setattr(settings, "show_progress", False)


@pytest.fixture
def tiny_config() -> RunConfig:
    return RunConfig(
        seed=0,
        guidance=GuidanceConfig(eta=float("inf"), max_inner=3, rollout_stride=2, num_tokens=2),
        sampling=SamplingConfig(num_train_steps=40, num_inference_steps=4),
        denoiser=DenoiserTrainingConfig(base_channels=8, token_dim=16, attention_heads=2),
        embedder=EmbedderTrainingConfig(embed_dim=16),
    )


@pytest.fixture
def tiny_schedule(tiny_config):
    sampling = tiny_config.sampling
    return make_linear_schedule(sampling.num_train_steps, sampling.beta_start, sampling.beta_end)


@pytest.fixture
def tiny_bundle() -> ModelBundle:
    """Untrained float64 stack; the denoiser output layer is re-drawn so noise depends on the condition."""
    torch.manual_seed(0)
    denoiser = Denoiser(tokenizer.vocab_size, token_dim=16, base_channels=8, attention_heads=2)
    nn.init.normal_(denoiser.out_conv.weight, std=0.05)
    bundle = ModelBundle(
        denoiser=denoiser.double(),
        guide=EmotionClassifier("guide").double(),
        agnostic=EmotionClassifier("agnostic").double(),
        embedder=JointEmbedder(tokenizer.vocab_size, embed_dim=16).double(),
        reduced=EmotionClassifier("guide").double(),
    )
    return bundle.frozen()


@pytest.fixture(scope="session")
def small_dataset():
    return generate_dataset(64, 0.8, seed=3)
