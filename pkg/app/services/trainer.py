import logging
import random
from typing import List, Optional

import numpy as np
import torch
import torch.nn.functional as F
from tqdm import tqdm

from app.config import settings
from app.exceptions import ConfigError, ConvergenceError, DatasetError
from app.models.classifiers import ARCH_IDS, EmotionClassifier
from app.models.denoiser import Denoiser
from app.models.embedder import JointEmbedder
from app.models.layers import parameter_count
from app.schemas.checkpoint import ModelMetadata
from app.schemas.run_config import RunConfig
from app.services.diffusion_core import forward_diffuse, make_linear_schedule
from app.services.evaluation import emotion_accuracy, retrieval_accuracy
from app.services.glyph_data import GlyphDataset, dataset_hash, tokenizer

logger = logging.getLogger(__name__)


def seed_everything(seed: int) -> torch.Generator:
    """Seed every RNG and return the run's single torch generator."""
    random.seed(seed)
    np.random.seed(seed % (2 ** 32))
    torch.manual_seed(seed)
    torch.set_num_threads(settings.num_threads)
    torch.use_deterministic_algorithms(True, warn_only=True)
    return torch.Generator().manual_seed(seed)


def _minibatches(n: int, batch_size: int, generator: torch.Generator):
    order = torch.randperm(n, generator=generator)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


class TrainerService:
    """Training loops for the denoiser, the emotion classifiers and the joint embedder"""

    def train_denoiser(self, dataset: GlyphDataset, config: RunConfig, seed: int) -> Denoiser:
        if len(dataset) == 0:
            raise DatasetError("Cannot train on an empty dataset")
        cfg = config.denoiser
        sampling = config.sampling
        tail_length = config.guidance.num_tokens
        generator = seed_everything(seed)

        sched = make_linear_schedule(sampling.num_train_steps, sampling.beta_start, sampling.beta_end)
        train_set, holdout = dataset.split(cfg.holdout_fraction, seed)
        images = train_set.image_tensor()
        token_ids = train_set.token_tensor(sampling.max_prompt_len)

        model = Denoiser(
            vocab_size=tokenizer.vocab_size,
            max_prompt_len=sampling.max_prompt_len,
            token_dim=cfg.token_dim,
            base_channels=cfg.base_channels,
            attention_heads=cfg.attention_heads,
            image_channels=sampling.channels,
            image_size=sampling.image_size,
        )
        optimizer = torch.optim.AdamW(model.parameters(), lr=cfg.lr)
        logger.info(
            f"Training denoiser on {len(train_set)} glyphs ({parameter_count(model)} params, "
            f"dropout={cfg.cond_dropout}, epochs={cfg.epochs})"
        )

        epoch_losses: List[float] = []
        for epoch in tqdm(range(cfg.epochs), desc="denoiser", disable=not settings.show_progress):
            model.train()
            total, count = 0.0, 0
            for idx in _minibatches(len(train_set), cfg.batch_size, generator):
                loss = self._denoiser_loss(model, sched, images[idx], token_ids[idx], tail_length,
                                           cfg.cond_dropout, generator)
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                total += loss.item() * len(idx)
                count += len(idx)
            epoch_losses.append(total / count)
            logger.info(f"Denoiser epoch {epoch + 1}/{cfg.epochs}: loss={epoch_losses[-1]:.5f}")

        holdout_loss = self.denoiser_holdout_loss(model, holdout, config, seed)
        model.eval()
        model.metadata = ModelMetadata(
            kind="denoiser",
            arch_id="unet-xattn",
            seed=seed,
            dataset_hash=dataset_hash(dataset),
            schedule=sched.to_dict(),
            training={"tail_length": tail_length, "cond_dropout": cfg.cond_dropout, "epochs": cfg.epochs},
            metrics={"epoch_losses": epoch_losses, "holdout_loss": holdout_loss},
        )
        logger.info(f"Denoiser held-out loss {holdout_loss:.5f}")

        if cfg.loss_ceiling is not None and holdout_loss > cfg.loss_ceiling:
            raise ConvergenceError(
                f"Denoiser held-out loss {holdout_loss:.5f} above ceiling {cfg.loss_ceiling}",
                model=model,
                details={"holdout_loss": holdout_loss, "ceiling": cfg.loss_ceiling},
            )
        return model

    def _denoiser_loss(self, model, sched, x0, ids, tail_length, dropout, generator) -> torch.Tensor:
        t = torch.randint(1, sched.T + 1, (x0.shape[0],), generator=generator)
        eps = torch.randn(x0.shape, generator=generator)
        z_t = forward_diffuse(x0, t, eps, sched)
        tokens = model.condition(ids, tail_length).tokens
        if dropout > 0:
            drop = torch.rand(x0.shape[0], generator=generator) < dropout
            null = model.null_condition(x0.shape[0], tail_length).tokens
            tokens = torch.where(drop[:, None, None], null, tokens)
        return F.mse_loss(model(z_t, t, tokens), eps)

    @torch.no_grad()
    def denoiser_holdout_loss(self, model: Denoiser, holdout: GlyphDataset, config: RunConfig, seed: int) -> float:
        sampling = config.sampling
        sched = make_linear_schedule(sampling.num_train_steps, sampling.beta_start, sampling.beta_end)
        generator = torch.Generator().manual_seed(seed + 1)
        model.eval()
        loss = self._denoiser_loss(
            model, sched, holdout.image_tensor(), holdout.token_tensor(sampling.max_prompt_len),
            config.guidance.num_tokens, 0.0, generator,
        )
        return float(loss)

    def train_classifier(
        self,
        dataset: GlyphDataset,
        arch_id: str,
        seed: int,
        config: Optional[RunConfig] = None,
        subset_fraction: float = 1.0,
    ) -> EmotionClassifier:
        if arch_id not in ARCH_IDS:
            raise ConfigError(f"arch_id must be one of {ARCH_IDS}, got '{arch_id}'")
        if not 0.0 < subset_fraction <= 1.0:
            raise ConfigError(f"subset_fraction must be in (0, 1], got {subset_fraction}")
        config = config or RunConfig()
        cfg = config.classifier
        generator = seed_everything(seed)

        # Hold-out split is shared by full and reduced classifiers so accuracies compare
        train_set, holdout = dataset.split(cfg.holdout_fraction, config.data.seed)
        if subset_fraction < 1.0:
            keep = max(8, int(round(len(train_set) * subset_fraction)))
            order = np.random.default_rng(seed).permutation(len(train_set))[:keep]
            train_set = train_set.subset(sorted(order.tolist()))

        images = train_set.image_tensor()
        labels = train_set.label_tensor()
        model = EmotionClassifier(arch_id=arch_id, image_channels=config.sampling.channels,
                                  image_size=config.sampling.image_size)
        optimizer = torch.optim.AdamW(model.parameters(), lr=cfg.lr)
        logger.info(f"Training {arch_id} classifier on {len(train_set)} glyphs ({parameter_count(model)} params)")

        for epoch in tqdm(range(cfg.epochs), desc=f"classifier-{arch_id}", disable=not settings.show_progress):
            model.train()
            total, count = 0.0, 0
            for idx in _minibatches(len(train_set), cfg.batch_size, generator):
                x = images[idx]
                if cfg.noise_augment > 0:
                    sigma = torch.rand(x.shape[0], 1, 1, 1, generator=generator) * cfg.noise_augment
                    x = x + sigma * torch.randn(x.shape, generator=generator)
                loss = F.cross_entropy(model(x), labels[idx])
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                total += loss.item() * len(idx)
                count += len(idx)
            logger.debug(f"Classifier {arch_id} epoch {epoch + 1}: loss={total / count:.4f}")

        model.eval()
        accuracy = emotion_accuracy(holdout.image_tensor(), holdout.label_tensor(), model)
        model.metadata = ModelMetadata(
            kind="classifier",
            arch_id=arch_id,
            seed=seed,
            dataset_hash=dataset_hash(dataset),
            training={"subset_fraction": subset_fraction, "epochs": cfg.epochs, "train_size": len(train_set)},
            metrics={"holdout_accuracy": accuracy},
        )
        logger.info(f"Classifier {arch_id} (subset {subset_fraction}) held-out accuracy {accuracy:.4f}")

        if cfg.accuracy_floor is not None and subset_fraction == 1.0 and accuracy < cfg.accuracy_floor:
            raise ConvergenceError(
                f"Classifier {arch_id} accuracy {accuracy:.4f} below floor {cfg.accuracy_floor}",
                model=model,
                details={"accuracy": accuracy, "floor": cfg.accuracy_floor},
            )
        return model

    def train_embedder(self, dataset: GlyphDataset, config: RunConfig, seed: int) -> JointEmbedder:
        cfg = config.embedder
        generator = seed_everything(seed)
        train_set, holdout = dataset.split(cfg.holdout_fraction, seed)
        images = train_set.image_tensor()
        token_ids = train_set.token_tensor(config.sampling.max_prompt_len)

        model = JointEmbedder(
            vocab_size=tokenizer.vocab_size,
            max_prompt_len=config.sampling.max_prompt_len,
            embed_dim=cfg.embed_dim,
            image_channels=config.sampling.channels,
            image_size=config.sampling.image_size,
        )
        optimizer = torch.optim.AdamW(model.parameters(), lr=cfg.lr)
        logger.info(f"Training joint embedder on {len(train_set)} pairs (tau={cfg.temperature})")

        epoch_losses: List[float] = []
        for epoch in tqdm(range(cfg.epochs), desc="embedder", disable=not settings.show_progress):
            model.train()
            total, count = 0.0, 0
            for idx in _minibatches(len(train_set), cfg.batch_size, generator):
                if len(idx) < 2:
                    continue
                image_emb = model.encode_image(images[idx])
                text_emb = model.encode_text(token_ids[idx])
                logits = image_emb @ text_emb.T / cfg.temperature
                targets = torch.arange(len(idx))
                loss = 0.5 * (F.cross_entropy(logits, targets) + F.cross_entropy(logits.T, targets))
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                total += loss.item() * len(idx)
                count += len(idx)
            epoch_losses.append(total / max(count, 1))
            logger.info(f"Embedder epoch {epoch + 1}/{cfg.epochs}: loss={epoch_losses[-1]:.4f}")

        model.eval()
        retrieval_set = holdout.subset(range(min(cfg.retrieval_batch, len(holdout))))
        retrieval = retrieval_accuracy(retrieval_set.image_tensor(), retrieval_set.prompts, model)
        model.metadata = ModelMetadata(
            kind="embedder",
            arch_id="dual-encoder",
            seed=seed,
            dataset_hash=dataset_hash(dataset),
            training={"temperature": cfg.temperature, "epochs": cfg.epochs},
            metrics={"epoch_losses": epoch_losses, "retrieval_top1": retrieval},
        )
        logger.info(f"Embedder top-1 retrieval on {len(retrieval_set)} held-out pairs: {retrieval:.3f}")

        if cfg.retrieval_floor is not None and retrieval < cfg.retrieval_floor:
            raise ConvergenceError(
                f"Embedder retrieval {retrieval:.3f} below floor {cfg.retrieval_floor}",
                model=model,
                details={"retrieval": retrieval, "floor": cfg.retrieval_floor},
            )
        return model


# Global trainer instance
trainer_service = TrainerService()
