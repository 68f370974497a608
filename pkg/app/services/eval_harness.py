"""Report-level evaluation: generated sets, eta sweeps and ablations."""
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence
import logging
import math

import numpy as np
import torch
from scipy import stats
from tqdm import tqdm

from app.config import config_hash, settings
from app.exceptions import ConfigError, MetricError
from app.models.checkpoints import ModelBundle
from app.models.denoiser import predict_noise
from app.schemas.glyph import IndexRecord
from app.schemas.report import EvalReport, EvalRow, SweepResult, TrendStatistics
from app.schemas.run_config import RunConfig
from app.services import evaluation
from app.services.emotion_space import EMOTION_NAMES, NUM_EMOTIONS, EmotionWheel, default_wheel, emotion
from app.services.glyph_data import (
    GlyphDataset,
    inherent_emotion_of_prompt,
    sample_prompts,
    save_png,
    tensor_to_image,
    tokenizer,
)
from app.services.muse_synthesis import draw_initial_latent, edit, generate, model_dtype, prompt_ids

logger = logging.getLogger(__name__)

SAMPLERS = ("muse", "cfg", "cg")


@dataclass
class GeneratedSet:
    images: torch.Tensor  # (N, C, H, W), clamped to [-1, 1]
    prompts: List[str]
    targets: List[int]
    inherent: List[Optional[int]] = field(default_factory=list)
    seeds: List[int] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.prompts)

    @classmethod
    def from_dataset(cls, dataset: GlyphDataset) -> "GeneratedSet":
        """Wrap a loaded set; inherent emotions come from the shape each prompt names."""
        inherent = []
        for prompt in dataset.prompts:
            name = inherent_emotion_of_prompt(prompt)
            inherent.append(emotion(name).id if name else None)
        return cls(
            images=dataset.image_tensor(),
            prompts=list(dataset.prompts),
            targets=[int(e) for e in dataset.emotions],
            inherent=inherent,
        )


def generate_set(
    models: ModelBundle,
    config: RunConfig,
    emotions: Sequence = tuple(EMOTION_NAMES),
    seeds: Sequence[int] = range(25),
    sampler: str = "muse",
    emotion_only: bool = False,
    wheel: Optional[EmotionWheel] = None,
    out_dir: Optional[str] = None,
) -> GeneratedSet:
    """One sample per (emotion, seed); seed s always pairs with the same neutral prompt."""
    if sampler not in SAMPLERS:
        raise ConfigError(f"Unknown sampler '{sampler}', expected one of {SAMPLERS}")
    seeds = list(seeds)
    prompts = [prompt for prompt, _ in sample_prompts(max(seeds) + 1, config.data.seed)] if seeds else []

    images, texts, targets, inherent, used_seeds, records = [], [], [], [], [], []
    cells = [(emotion(e), s) for e in emotions for s in seeds]
    for label, seed in tqdm(cells, desc=f"generate-{sampler}", disable=not settings.show_progress):
        prompt = None if emotion_only else prompts[seed]
        trace_path = None
        if out_dir:
            trace_path = str(Path(out_dir) / f"{label.name}_{seed:04d}.trace.jsonl")
        result = generate(prompt, label.id, models, config, seed, sampler=sampler, wheel=wheel, trace_path=trace_path)
        image = result.image.detach().clamp(-1.0, 1.0).to(torch.float32)

        captured = result.trace.header.inherent
        if captured is None and prompt is not None:
            captured = inherent_emotion_of_prompt(prompt)
        images.append(image)
        texts.append(result.trace.header.prompt)
        targets.append(label.id)
        inherent.append(emotion(captured).id if captured else None)
        used_seeds.append(seed)

        if out_dir:
            filename = f"{label.name}_{seed:04d}.png"
            save_png(tensor_to_image(image), Path(out_dir) / filename)
            records.append(IndexRecord(
                filename=filename, prompt=result.trace.header.prompt,
                emotion_id=label.id, emotion=label.name,
            ))

    if not images:
        raise MetricError("Generated set is empty")
    if out_dir:
        index = Path(out_dir) / "index.jsonl"
        index.write_text("\n".join(r.model_dump_json() for r in records) + "\n")
        logger.info(f"Wrote {len(records)} {sampler} samples to {out_dir}")
    return GeneratedSet(
        images=torch.stack(images), prompts=texts, targets=targets, inherent=inherent, seeds=used_seeds
    )


def evaluate_set(
    generated: GeneratedSet,
    models: ModelBundle,
    condition: str,
    reference: Optional[torch.Tensor] = None,
    wheel: Optional[EmotionWheel] = None,
    eta: Optional[float] = None,
) -> EvalRow:
    """All metrics for one condition, always scored by both guide and agnostic classifiers."""
    wheel = wheel or default_wheel()
    images = generated.images.to(next(models.guide.parameters()).dtype)
    targets = torch.as_tensor(generated.targets, dtype=torch.long)

    accuracies = evaluation.accuracy_by_classifier(
        images, targets, {"guide": models.guide, "agnostic": models.agnostic, "reduced": models.reduced}
    )
    predictions = evaluation.predict_emotions(images, models.agnostic).tolist()
    features = evaluation.image_features(images, models.embedder)

    frechet = None
    if reference is not None:
        reference_features = evaluation.image_features(reference.to(images.dtype), models.embedder)
        frechet = evaluation.frechet_distance(features, reference_features)

    variance = None
    counts = np.bincount(np.asarray(generated.targets), minlength=len(EMOTION_NAMES))
    if counts[counts > 0].min() >= 2:
        variance = evaluation.intra_class_variance_from_features(features, generated.targets)

    return EvalRow(
        condition=condition,
        samples=len(generated),
        accuracy_guide=accuracies["guide"],
        accuracy_agnostic=accuracies["agnostic"],
        accuracy_reduced=accuracies["reduced"],
        frechet_distance=frechet,
        semantic_score=evaluation.semantic_score(images, generated.prompts, models.embedder),
        intra_class_variance=variance,
        similar_confusion_rate=evaluation.similar_confusion_rate(predictions, generated.targets, wheel),
        inherent_capture_rate=evaluation.inherent_capture_rate(predictions, generated.targets, generated.inherent),
        eta=eta,
    )


def _with_guidance(config: RunConfig, **updates) -> RunConfig:
    return config.model_copy(update={"guidance": config.guidance.model_copy(update=updates)})


def rank_correlation(x: Sequence[float], y: Sequence[float]) -> float:
    """Spearman rho; a constant series has no defined rank and scores 0."""
    finite_x = [v if math.isfinite(v) else math.copysign(1e300, v) for v in x]
    rho, _ = stats.spearmanr(finite_x, y)
    if not math.isfinite(rho):
        logger.warning("Rank correlation undefined (constant series); reporting 0")
        return 0.0
    return float(rho)


def sweep_eta(
    eta_grid: Sequence[float],
    models: ModelBundle,
    config: RunConfig,
    seeds: Sequence[int] = range(5),
    emotions: Sequence = tuple(EMOTION_NAMES),
    reference: Optional[torch.Tensor] = None,
    wheel: Optional[EmotionWheel] = None,
) -> SweepResult:
    """Metrics per eta plus rank correlations of accuracy and semantic score against eta."""
    if not eta_grid:
        raise MetricError("eta grid is empty")
    grid = sorted(float(e) for e in eta_grid)
    if len(grid) < 3:
        raise ConfigError(f"eta sweep needs at least 3 values, got {len(grid)}")
    if not (grid[0] == -math.inf and grid[-1] == math.inf):
        raise ConfigError(
            f"eta grid must run from -inf (always open) to inf (never open), got {grid[0]:g}..{grid[-1]:g}"
        )

    rows = []
    for eta in grid:
        logger.info(f"Sweeping eta={eta}")
        generated = generate_set(models, _with_guidance(config, eta=eta), emotions, seeds, wheel=wheel)
        rows.append(evaluate_set(generated, models, f"eta={eta:g}", reference, wheel, eta=eta))

    accuracy = [row.accuracy_guide for row in rows]
    semantic = [row.semantic_score for row in rows]
    trend = TrendStatistics(
        accuracy_vs_eta=rank_correlation(grid, accuracy),
        semantic_vs_eta=rank_correlation(grid, semantic),
        accuracy_gap=accuracy[0] - accuracy[-1],
    )
    report = EvalReport(
        title="eta sweep", config_hash=config_hash(config), rows=rows,
        notes=["FD (toy): Frechet distance on joint-embedder image features"],
    )
    return SweepResult(report=report, trend=trend)


LOSS_ABLATIONS = {
    "target-only": dict(use_inherent=False, use_similar=False),
    "+L_sim": dict(use_inherent=False, use_similar=True),
    "+L_inh": dict(use_inherent=True, use_similar=False),
    "full": dict(use_inherent=True, use_similar=True),
    "no token optimization": dict(optimize_tokens_enabled=False),
}


def ablate_losses(
    models: ModelBundle,
    config: RunConfig,
    seeds: Sequence[int] = range(25),
    emotions: Sequence = tuple(EMOTION_NAMES),
    wheel: Optional[EmotionWheel] = None,
) -> EvalReport:
    """Loss-term combinations; confusion and capture rates are derived metrics."""
    rows = []
    for name, updates in LOSS_ABLATIONS.items():
        logger.info(f"Loss ablation row '{name}'")
        generated = generate_set(models, _with_guidance(config, **updates), emotions, seeds, wheel=wheel)
        rows.append(evaluate_set(generated, models, name, wheel=wheel, eta=config.guidance.eta))
    return EvalReport(
        title="loss ablation", config_hash=config_hash(config), rows=rows,
        notes=["similar_confusion_rate and inherent_capture_rate are derived metrics"],
    )


def ablate_guidance_classifier(
    models: ModelBundle,
    config: RunConfig,
    seeds: Sequence[int] = range(10),
    emotions: Sequence = tuple(EMOTION_NAMES),
    wheel: Optional[EmotionWheel] = None,
) -> EvalReport:
    """Guide with each classifier in turn; every row is still scored by all three."""
    candidates: Dict[str, object] = {"guide": models.guide, "agnostic": models.agnostic, "reduced": models.reduced}
    rows = []
    for name, classifier in candidates.items():
        if classifier is None:
            logger.warning(f"Skipping '{name}' guidance row: classifier not available")
            continue
        generated = generate_set(models.with_guide(classifier), config, emotions, seeds, wheel=wheel)
        rows.append(evaluate_set(generated, models, f"guided by {name}", wheel=wheel, eta=config.guidance.eta))
    return EvalReport(title="guidance classifier ablation", config_hash=config_hash(config), rows=rows)


def baseline_comparison(
    models: ModelBundle,
    config: RunConfig,
    seeds: Sequence[int] = range(10),
    emotions: Sequence = tuple(EMOTION_NAMES),
    reference: Optional[torch.Tensor] = None,
    wheel: Optional[EmotionWheel] = None,
) -> EvalReport:
    """Vanilla CFG vs classifier guidance vs emotional tokens on the same prompts and seeds."""
    labels = {"cfg": "vanilla CFG", "cg": "classifier guidance", "muse": "emotional tokens"}
    rows = []
    for sampler in ("cfg", "cg", "muse"):
        generated = generate_set(models, config, emotions, seeds, sampler=sampler, wheel=wheel)
        rows.append(evaluate_set(generated, models, labels[sampler], reference, wheel, eta=config.guidance.eta))
    return EvalReport(title="baseline comparison", config_hash=config_hash(config), rows=rows)


@dataclass
class EditingResult:
    samples: int
    reconstruction_mse: float
    source_accuracy: float
    edited_accuracy: float
    semantic_score: float
    edited_mse: float  # edited output vs source


def edit_targets(emotions: Sequence[int]) -> List[int]:
    """Each source is edited toward the emotion four places on, which flips polarity."""
    return [(int(e) + NUM_EMOTIONS // 2) % NUM_EMOTIONS for e in emotions]


def evaluate_editing(
    sources: GlyphDataset,
    models: ModelBundle,
    config: RunConfig,
    seed: int = 0,
    wheel: Optional[EmotionWheel] = None,
    targets: Optional[Sequence[int]] = None,
) -> EditingResult:
    """Closed-gate reconstruction error plus accuracy and alignment of guided edits.

    Targets default to the polarity-flipped source emotions; pass the source emotions
    themselves to measure how far an edit toward what is already there drifts.
    """
    dtype = model_dtype(models)
    images = sources.image_tensor().to(dtype)
    targets = edit_targets(sources.emotions) if targets is None else [int(y) for y in targets]
    if len(targets) != len(sources):
        raise MetricError(f"{len(targets)} edit targets for {len(sources)} sources")
    closed = _with_guidance(config, eta=math.inf)

    reconstructions, edits = [], []
    for image, prompt, target in tqdm(
        list(zip(images, sources.prompts, targets)), desc="edit", disable=not settings.show_progress
    ):
        reconstructions.append(edit(image, prompt, target, models, closed, seed).image.detach().clamp(-1.0, 1.0))
        edits.append(edit(image, prompt, target, models, config, seed, wheel=wheel).image.detach().clamp(-1.0, 1.0))

    reconstructed = torch.stack(reconstructions)
    edited = torch.stack(edits)
    result = EditingResult(
        samples=len(sources),
        reconstruction_mse=float(((reconstructed - images) ** 2).to(torch.float64).mean()),
        source_accuracy=evaluation.emotion_accuracy(images, targets, models.agnostic),
        edited_accuracy=evaluation.emotion_accuracy(edited, targets, models.agnostic),
        semantic_score=evaluation.semantic_score(edited, sources.prompts, models.embedder),
        edited_mse=float(((edited - images) ** 2).to(torch.float64).mean()),
    )
    logger.info(
        f"Editing on {result.samples} sources: reconstruction MSE {result.reconstruction_mse:.5f}, "
        f"accuracy {result.source_accuracy:.3f} -> {result.edited_accuracy:.3f}"
    )
    return result


def captured_inherent(
    models: ModelBundle,
    config: RunConfig,
    prompts: Sequence[str],
    y_target,
    seed: int = 0,
) -> List[Optional[str]]:
    """Inherent emotion recorded at gate opening, per prompt; None where the gate never opened."""
    captured = []
    for prompt in tqdm(prompts, desc="inherent", disable=not settings.show_progress):
        captured.append(generate(prompt, y_target, models, config, seed).trace.header.inherent)
    opened = [name for name in captured if name is not None]
    logger.info(f"Gate opened on {len(opened)}/{len(captured)} prompts")
    return captured


@torch.no_grad()
def conditioning_gap(
    models: ModelBundle,
    config: RunConfig,
    prompts: Sequence[str],
    t: Optional[int] = None,
    seed: int = 0,
) -> float:
    """Mean ||eps_cond - eps_uncond|| / ||eps_uncond|| over prompts, at one noise level (default t=T)."""
    if not prompts:
        raise MetricError("No prompts to measure the conditioning gap on")
    denoiser = models.denoiser
    t = config.sampling.num_train_steps if t is None else t
    k = config.guidance.num_tokens
    generator = torch.Generator().manual_seed(seed)
    gaps = []
    for prompt in prompts:
        z_t = draw_initial_latent(models, generator)
        ids = prompt_ids(tokenizer.tokenize(prompt), denoiser.max_prompt_len)
        eps_cond = predict_noise(denoiser, z_t, t, denoiser.condition(ids, k))
        eps_uncond = predict_noise(denoiser, z_t, t, denoiser.null_condition(1, k))
        gaps.append(float((eps_cond - eps_uncond).to(torch.float64).norm() / eps_uncond.to(torch.float64).norm()))
    gap = float(np.mean(gaps))
    logger.info(f"Conditioning gap at t={t} over {len(gaps)} prompts: {gap:.4f}")
    return gap
