from dataclasses import dataclass, field
from typing import Optional, Union
from pathlib import Path
import logging

import torch
from pydantic import ValidationError

from app.exceptions import CheckpointError
from app.models.classifiers import EmotionClassifier
from app.models.denoiser import Denoiser
from app.models.embedder import JointEmbedder
from app.models.layers import parameter_count
from app.schemas.checkpoint import ModelMetadata
from app.services.diffusion_core import LatentCodec, PixelCodec

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT_VERSION = 1

BUNDLE_FILES = {
    "denoiser": "denoiser.pt",
    "guide": "classifier_guide.pt",
    "agnostic": "classifier_agnostic.pt",
    "reduced": "classifier_reduced.pt",
    "embedder": "embedder.pt",
}

ToyModel = Union[Denoiser, EmotionClassifier, JointEmbedder]


def _kind_of(model: ToyModel) -> str:
    if isinstance(model, Denoiser):
        return "denoiser"
    if isinstance(model, EmotionClassifier):
        return "classifier"
    if isinstance(model, JointEmbedder):
        return "embedder"
    raise CheckpointError(f"Cannot checkpoint object of type {type(model).__name__}")


def save_checkpoint(model: ToyModel, path: str) -> Path:
    """Single-file archive: format version, metadata header, architecture, parameters."""
    metadata = model.metadata or ModelMetadata(kind=_kind_of(model), arch_id=_kind_of(model), seed=-1)
    metadata = metadata.model_copy(update={
        "architecture": dict(model.architecture),
        "parameter_count": parameter_count(model),
    })
    archive = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "header": metadata.model_dump(mode="json"),
        "state_dict": {k: v.detach().cpu() for k, v in model.state_dict().items()},
    }
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    torch.save(archive, target)
    logger.info(f"Saved {metadata.kind} checkpoint ({metadata.arch_id}) to {target}")
    return target


def load_checkpoint(path: str, device: str = "cpu") -> ToyModel:
    target = Path(path)
    if not target.exists():
        raise CheckpointError(f"Checkpoint not found: {path}")
    try:
        archive = torch.load(target, map_location=device, weights_only=True)
    except Exception as e:
        logger.error(f"Error reading checkpoint {path}: {e}")
        raise CheckpointError(f"Unreadable checkpoint {path}: {e}")

    version = archive.get("format_version") if isinstance(archive, dict) else None
    if version != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(
            f"Unsupported checkpoint format version {version!r} in {path} "
            f"(expected {CHECKPOINT_FORMAT_VERSION})"
        )
    try:
        metadata = ModelMetadata.model_validate(archive["header"])
    except (KeyError, ValidationError) as e:
        raise CheckpointError(f"Invalid checkpoint header in {path}: {e}")

    architecture = dict(metadata.architecture)
    if metadata.kind == "denoiser":
        model = Denoiser(**architecture)
    elif metadata.kind == "classifier":
        model = EmotionClassifier(**architecture)
    else:
        model = JointEmbedder(**architecture)

    try:
        model.load_state_dict(archive["state_dict"])
    except (KeyError, RuntimeError) as e:
        raise CheckpointError(f"Parameters in {path} do not match the recorded architecture: {e}")
    model.metadata = metadata
    model.eval()
    return model.to(device)


@dataclass
class ModelBundle:
    """Trained stack shared read-only by synthesis runs."""
    denoiser: Denoiser
    guide: EmotionClassifier
    agnostic: EmotionClassifier
    embedder: JointEmbedder
    reduced: Optional[EmotionClassifier] = None
    codec: LatentCodec = field(default_factory=PixelCodec)

    def frozen(self) -> "ModelBundle":
        for module in (self.denoiser, self.guide, self.agnostic, self.embedder, self.reduced):
            if module is not None:
                module.eval()
                module.requires_grad_(False)
        return self

    def with_guide(self, classifier: EmotionClassifier) -> "ModelBundle":
        return ModelBundle(
            denoiser=self.denoiser, guide=classifier, agnostic=self.agnostic,
            embedder=self.embedder, reduced=self.reduced, codec=self.codec,
        )


def load_bundle(models_dir: str, device: str = "cpu") -> ModelBundle:
    directory = Path(models_dir)
    loaded = {}
    for role, filename in BUNDLE_FILES.items():
        path = directory / filename
        if role == "reduced" and not path.exists():
            logger.warning(f"No reduced-data classifier in {directory}; reduced-data accuracy will be empty")
            loaded[role] = None
            continue
        loaded[role] = load_checkpoint(str(path), device=device)
    return ModelBundle(**loaded).frozen()


def save_bundle(bundle: ModelBundle, models_dir: str) -> None:
    directory = Path(models_dir)
    for role, filename in BUNDLE_FILES.items():
        model = getattr(bundle, role)
        if model is not None:
            save_checkpoint(model, str(directory / filename))
