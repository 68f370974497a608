"""Metrics shared by training checks, reports and ablations.

Batches are processed in a fixed order and reduced in float64 so results are
bit-stable in single-threaded mode.
"""
from typing import Dict, List, Optional, Sequence
import logging

import numpy as np
import torch
from scipy import linalg

from app.exceptions import MetricError
from app.models.classifiers import EmotionClassifier, classify
from app.models.embedder import JointEmbedder, embed_image, embed_text
from app.services.emotion_space import EmotionWheel, emotion
from app.services.glyph_data import tokenizer

logger = logging.getLogger(__name__)

EVAL_BATCH_SIZE = 256
DEFAULT_SHRINKAGE = 0.1


def _batches(images: torch.Tensor, batch_size: int = EVAL_BATCH_SIZE):
    for start in range(0, images.shape[0], batch_size):
        yield images[start:start + batch_size]


@torch.no_grad()
def predict_emotions(images: torch.Tensor, classifier: EmotionClassifier) -> torch.Tensor:
    if images.shape[0] == 0:
        raise MetricError("Cannot classify an empty image set")
    was_training = classifier.training
    classifier.eval()
    predictions = [classify(classifier, batch).argmax(dim=-1) for batch in _batches(images)]
    classifier.train(was_training)
    return torch.cat(predictions)


def emotion_accuracy(images: torch.Tensor, targets, classifier: EmotionClassifier) -> float:
    """Fraction of images whose argmax emotion equals the target."""
    targets = torch.as_tensor(targets, dtype=torch.long).flatten()
    if images.shape[0] == 0:
        raise MetricError("emotion_accuracy needs a nonempty set")
    if targets.shape[0] != images.shape[0]:
        raise MetricError(f"{images.shape[0]} images but {targets.shape[0]} targets")
    predictions = predict_emotions(images, classifier)
    return float((predictions == targets).to(torch.float64).mean())


@torch.no_grad()
def image_features(images: torch.Tensor, embedder: JointEmbedder) -> np.ndarray:
    was_training = embedder.training
    embedder.eval()
    features = [embed_image(embedder, batch).to(torch.float64) for batch in _batches(images)]
    embedder.train(was_training)
    return torch.cat(features).cpu().numpy()


@torch.no_grad()
def text_features(prompts: Sequence[str], embedder: JointEmbedder) -> np.ndarray:
    ids = tokenizer.batch(prompts, embedder.max_prompt_len, allow_emotion_words=True)
    return embed_text(embedder, ids).to(torch.float64).cpu().numpy()


def _psd_sqrt(matrix: np.ndarray) -> np.ndarray:
    eigenvalues, eigenvectors = linalg.eigh(matrix)
    eigenvalues = np.clip(eigenvalues, 0.0, None)
    return (eigenvectors * np.sqrt(eigenvalues)) @ eigenvectors.T


def _moments(features: np.ndarray, shrinkage: float):
    n, d = features.shape
    if n < 2:
        raise MetricError(f"Need at least 2 feature vectors, got {n}")
    mu = features.mean(axis=0)
    sigma = np.atleast_2d(np.cov(features, rowvar=False))
    if n <= d:
        if shrinkage <= 0.0:
            raise MetricError(f"Covariance of {n} samples in {d} dims is degenerate and shrinkage is off")
        logger.warning(f"Only {n} samples for {d}-dim features; shrinking covariance by {shrinkage}")
        sigma = (1.0 - shrinkage) * sigma + shrinkage * (np.trace(sigma) / d) * np.eye(d)
    return mu, sigma


def frechet_distance(feats_a, feats_b, shrinkage: float = DEFAULT_SHRINKAGE) -> float:
    """Frechet distance between Gaussian fits of two feature sets."""
    a = np.asarray(feats_a, dtype=np.float64)
    b = np.asarray(feats_b, dtype=np.float64)
    a = a[:, None] if a.ndim == 1 else a
    b = b[:, None] if b.ndim == 1 else b
    if a.shape[1] != b.shape[1]:
        raise MetricError(f"Feature dims differ: {a.shape[1]} vs {b.shape[1]}")

    mu_a, sigma_a = _moments(a, shrinkage)
    mu_b, sigma_b = _moments(b, shrinkage)

    # tr sqrt(Sa Sb) via the symmetric form sqrt(Sa) Sb sqrt(Sa)
    sqrt_a = _psd_sqrt(sigma_a)
    product = sqrt_a @ sigma_b @ sqrt_a
    product = (product + product.T) / 2.0
    eigenvalues = np.clip(linalg.eigvalsh(product), 0.0, None)
    trace_sqrt = float(np.sqrt(eigenvalues).sum())

    diff = mu_a - mu_b
    distance = float(diff @ diff + np.trace(sigma_a) + np.trace(sigma_b) - 2.0 * trace_sqrt)
    return max(distance, 0.0)


def semantic_score(images: torch.Tensor, prompts: Sequence[str], embedder: JointEmbedder) -> float:
    """Mean cosine similarity between each image and its prompt (no temperature)."""
    if images.shape[0] != len(prompts):
        raise MetricError(f"{images.shape[0]} images but {len(prompts)} prompts")
    if len(prompts) == 0:
        raise MetricError("semantic_score needs a nonempty set")
    cosines = (image_features(images, embedder) * text_features(prompts, embedder)).sum(axis=1)
    return float(cosines.mean())


def intra_class_variance_from_features(features: np.ndarray, labels: Sequence[int]) -> float:
    labels = np.asarray(labels)
    variances = []
    for label in sorted(set(labels.tolist())):
        members = features[labels == label]
        if members.shape[0] < 2:
            raise MetricError(f"Class {emotion(int(label)).name} has a single sample")
        centroid = members.mean(axis=0)
        variances.append(float(((members - centroid) ** 2).sum(axis=1).mean()))
    return float(np.mean(variances))


def intra_class_variance(images: torch.Tensor, labels: Sequence[int], embedder: JointEmbedder) -> float:
    """Mean over classes of the mean squared distance of unit features to the class centroid."""
    return intra_class_variance_from_features(image_features(images, embedder), labels)


def similar_confusion_rate(predictions: Sequence[int], targets: Sequence[int], wheel: EmotionWheel) -> float:
    """Derived metric: fraction of outputs classified as a wheel neighbour of their target."""
    if len(predictions) == 0:
        raise MetricError("similar_confusion_rate needs a nonempty set")
    hits = 0
    for predicted, target in zip(predictions, targets):
        neighbour_ids = {label.id for label in wheel.neighbours(int(target))}
        hits += int(int(predicted) in neighbour_ids)
    return hits / len(predictions)


def inherent_capture_rate(
    predictions: Sequence[int],
    targets: Sequence[int],
    inherent: Sequence[Optional[int]],
) -> Optional[float]:
    """Derived metric: fraction of outputs that ended in their (non-target) inherent emotion."""
    eligible = [
        (int(p), int(i)) for p, t, i in zip(predictions, targets, inherent)
        if i is not None and int(i) != int(t)
    ]
    if not eligible:
        return None
    return sum(p == i for p, i in eligible) / len(eligible)


def accuracy_by_classifier(images: torch.Tensor, targets, classifiers: Dict[str, Optional[EmotionClassifier]]) -> Dict[str, Optional[float]]:
    return {
        name: (emotion_accuracy(images, targets, model) if model is not None else None)
        for name, model in classifiers.items()
    }


def retrieval_accuracy(images: torch.Tensor, prompts: List[str], embedder: JointEmbedder) -> float:
    """Top-1 image->prompt retrieval within the batch; identical prompt strings count as hits."""
    sims = image_features(images, embedder) @ text_features(prompts, embedder).T
    best = sims.argmax(axis=1)
    return float(np.mean([prompts[j] == prompts[i] for i, j in enumerate(best)]))
