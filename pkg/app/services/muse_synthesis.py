"""Emotion-guided sampling.

Each outer DDIM step measures how well the current trajectory already matches
the prompt (a strided rollout to t=0 scored by the joint embedder). Once that
score reaches `eta` the gate latches open, the emotion the trajectory had
drifted into is recorded, and a small block of emotional tokens appended to
the prompt condition is optimized against the guidance classifier.
"""
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, List, NamedTuple, Optional, Sequence
import json
import logging
import math

import numpy as np
import torch
from pydantic import ValidationError

from app.config import config_hash, settings
from app.exceptions import (
    ContractViolationError,
    GuidanceDivergenceError,
    MuseError,
    ProbabilityError,
    ScheduleError,
    ShapeMismatchError,
)
from app.models.checkpoints import ModelBundle, load_bundle
from app.models.classifiers import EmotionClassifier, classify
from app.models.denoiser import ConditionEmbedding, predict_noise
from app.models.embedder import embed_image, embed_text
from app.schemas.emotion import EmotionLabel
from app.schemas.glyph import PromptTokens
from app.schemas.guidance import SynthesisTrace, TraceHeader, TraceRecord
from app.schemas.run_config import GuidanceConfig, RunConfig
from app.services.diffusion_core import (
    LatentState,
    NoiseSchedule,
    cfg_combine,
    cg_combine,
    ddim_invert_step,
    ddim_step,
    inference_timesteps,
    make_linear_schedule,
    predict_clean,
)
from app.services.emotion_space import EmotionWheel, NUM_EMOTIONS, default_wheel, emotion, similar_emotions
from app.services.glyph_data import emotion_only_prompt, tokenizer

logger = logging.getLogger(__name__)

PROB_FLOOR = 1e-6
SIMPLEX_TOLERANCE = 1e-4
LR_HORIZON = 100.0
DEFAULT_TAIL_LENGTH = 4


@dataclass
class SynthesisResult:
    image: torch.Tensor  # (C, H, W) decoded, unclamped
    trace: SynthesisTrace


class EmoLoss(NamedTuple):
    total: torch.Tensor
    target: torch.Tensor
    inherent: torch.Tensor
    similar: torch.Tensor


@dataclass
class EmotionalTokens:
    """The optimizable block S plus its Adam state."""
    S: torch.Tensor
    optimizer: torch.optim.Adam
    iterations: int = 0

    @classmethod
    def initialize(
        cls,
        num_tokens: int,
        dim: int,
        scale: float,
        generator: torch.Generator,
        dtype: torch.dtype = torch.float32,
        lr: float = 0.01,
    ) -> "EmotionalTokens":
        S = torch.randn((num_tokens, dim), generator=generator, dtype=torch.float64) * scale
        S = S.to(dtype).requires_grad_(True)
        return cls(S=S, optimizer=torch.optim.Adam([S], lr=lr))

    @property
    def num_tokens(self) -> int:
        return int(self.S.shape[0])

    def value(self) -> torch.Tensor:
        return self.S.detach()


# ---------------------------------------------------------------------------
# Shared helpers

def prompt_ids(prompt: PromptTokens, max_len: int) -> torch.Tensor:
    return torch.tensor([tokenizer.pad(prompt, max_len)], dtype=torch.long)


def tail_length_of(models: ModelBundle) -> int:
    metadata = models.denoiser.metadata
    if metadata is not None and "tail_length" in metadata.training:
        return int(metadata.training["tail_length"])
    return DEFAULT_TAIL_LENGTH


def model_dtype(models: ModelBundle) -> torch.dtype:
    return next(models.denoiser.parameters()).dtype


def guided_noise(
    models: ModelBundle,
    z_t: torch.Tensor,
    t: int,
    condition: ConditionEmbedding,
    omega: float,
    eps_uncond: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """CFG noise; every sampler in this module denoises through here."""
    denoiser = models.denoiser
    eps_cond = predict_noise(denoiser, z_t, t, condition)
    if omega == 0.0:
        return eps_cond
    if eps_uncond is None:
        eps_uncond = predict_noise(denoiser, z_t, t, denoiser.null_condition(1, condition.tail_length))
    return cfg_combine(eps_cond, eps_uncond, omega)


def draw_initial_latent(models: ModelBundle, generator: torch.Generator) -> torch.Tensor:
    shape = models.denoiser.image_shape
    return torch.randn(shape, generator=generator, dtype=torch.float64).to(model_dtype(models))


def learning_rate(lr0: float, index: int) -> float:
    """lr0 * (1 - index/100), floored at 0."""
    return lr0 * max(0.0, 1.0 - index / LR_HORIZON)


# ---------------------------------------------------------------------------
# When: semantic-similarity gate

@torch.no_grad()
def semantic_similarity(
    state: LatentState,
    prompt: PromptTokens,
    models: ModelBundle,
    sched: NoiseSchedule,
    stride: int,
    condition: Optional[ConditionEmbedding] = None,
    timesteps: Optional[Sequence[int]] = None,
    omega: float = 0.0,
    tau: float = 0.07,
) -> float:
    """Cosine between the rolled-out image and the prompt, divided by tau."""
    if stride < 1:
        raise ScheduleError(f"Rollout stride must be >= 1, got {stride}")
    denoiser = models.denoiser
    if condition is None:
        condition = denoiser.condition(prompt_ids(prompt, denoiser.max_prompt_len), tail_length_of(models))
    if timesteps is None:
        timesteps = [s for s in inference_timesteps(sched, min(50, sched.T)) if s < state.t]
        timesteps = [state.t] + timesteps
    if timesteps[0] != state.t:
        raise ScheduleError(f"Rollout must start at the current step {state.t}, got {timesteps[0]}")

    strided = list(timesteps)[::stride]
    z = state.z
    for i, t in enumerate(strided):
        t_next = strided[i + 1] if i + 1 < len(strided) else 0
        eps = guided_noise(models, z, t, condition, omega)
        z = ddim_step(z, eps, t, sched, t_next)

    image = models.codec.decode(z).clamp(-1.0, 1.0)
    embedder = models.embedder
    image_embedding = embed_image(embedder, image.to(next(embedder.parameters()).dtype))
    text_embedding = embed_text(embedder, prompt_ids(prompt, embedder.max_prompt_len)[0])
    cosine = float((image_embedding.to(torch.float64) * text_embedding.to(torch.float64)).sum())
    return cosine / tau


def gate_opens(s_clip: float, eta: float, latched: bool = False) -> bool:
    """Latching threshold: open once s_clip >= eta, then stay open."""
    return latched or s_clip >= eta


def gate(s_clip: float, eta: float, tokens: EmotionalTokens, latched: bool = False) -> Optional[torch.Tensor]:
    """Tail block for this step: None selects the void placeholder."""
    return tokens.value() if gate_opens(s_clip, eta, latched) else None


# ---------------------------------------------------------------------------
# Which: inherent capture and the multi-emotion loss

@torch.no_grad()
def capture_inherent(
    trace: SynthesisTrace,
    classifier: EmotionClassifier,
    z_prev: LatentState,
    eps_prev: torch.Tensor,
    sched: NoiseSchedule,
    step: Optional[int] = None,
) -> EmotionLabel:
    """Record the emotion of the clean estimate one step before the gate opened."""
    if trace.header.inherent is not None:
        raise ContractViolationError(
            f"Inherent emotion already captured at step {trace.header.inherent_step}",
            details={"inherent": trace.header.inherent},
        )
    z0_hat = predict_clean(z_prev.z, eps_prev, z_prev.t, sched)
    probs = classify(classifier, z0_hat.to(next(classifier.parameters()).dtype))
    label = emotion(int(probs.argmax()))
    trace.header.inherent = label.name
    trace.header.inherent_step = step
    return label


def _check_simplex(probs: torch.Tensor) -> None:
    if probs.dim() != 1 or probs.shape[0] != NUM_EMOTIONS:
        raise ProbabilityError(f"Expected {NUM_EMOTIONS} probabilities, got shape {tuple(probs.shape)}")
    values = probs.detach()
    if not torch.isfinite(values).all():
        raise ProbabilityError("Probabilities contain non-finite entries")
    if float(values.min()) < -SIMPLEX_TOLERANCE or abs(float(values.sum()) - 1.0) > SIMPLEX_TOLERANCE:
        raise ProbabilityError(
            f"Probabilities are not on the simplex (min={float(values.min()):.3e}, sum={float(values.sum()):.6f})"
        )


def emo_loss(
    probs: torch.Tensor,
    y_target,
    y_inh=None,
    y_sim_set: Iterable = (),
    lambda1: float = 0.0005,
    lambda2: float = 0.0015,
) -> EmoLoss:
    """Target cross-entropy minus weighted inherent and similar-emotion cross-entropies."""
    _check_simplex(probs)
    target = emotion(y_target).id
    log_probs = probs.clamp(min=PROB_FLOOR, max=1.0).log()
    zero = log_probs.new_zeros(())

    loss_target = torch.clamp(-log_probs[target], min=0.0)

    inherent = emotion(y_inh).id if y_inh is not None else None
    if inherent is None or inherent == target:
        loss_inherent = zero
    else:
        loss_inherent = -log_probs[inherent]

    similar = sorted({emotion(y).id for y in y_sim_set} - {target})
    loss_similar = -log_probs[similar].mean() if similar else zero

    total = loss_target - lambda1 * loss_inherent - lambda2 * loss_similar
    return EmoLoss(total=total, target=loss_target, inherent=loss_inherent, similar=loss_similar)


# ---------------------------------------------------------------------------
# How: inner-loop token optimization

@dataclass
class TokenObjective:
    """L_emo as a function of S at one frozen outer state."""
    models: ModelBundle
    sched: NoiseSchedule
    z_t: torch.Tensor
    t: int
    prompt: torch.Tensor  # (1, Lp) padded ids
    omega: float
    y_target: int
    y_inh: Optional[int] = None
    y_sim: Sequence[int] = ()
    lambda1: float = 0.0005
    lambda2: float = 0.0015
    eps_uncond: Optional[torch.Tensor] = None

    def __post_init__(self):
        self.z_t = self.z_t.detach()

    def probabilities(self, S: torch.Tensor) -> torch.Tensor:
        denoiser = self.models.denoiser
        if self.omega != 0.0 and self.eps_uncond is None:
            # S-independent, computed once per outer step
            with torch.no_grad():
                null = denoiser.null_condition(1, S.shape[0])
                self.eps_uncond = predict_noise(denoiser, self.z_t, self.t, null)
        condition = denoiser.condition(self.prompt, S.shape[0], S)
        eps = guided_noise(self.models, self.z_t, self.t, condition, self.omega, self.eps_uncond)
        z0_hat = predict_clean(self.z_t, eps, self.t, self.sched)
        return classify(self.models.guide, self.models.codec.decode(z0_hat))

    def __call__(self, S: torch.Tensor) -> EmoLoss:
        return emo_loss(
            self.probabilities(S), self.y_target, self.y_inh, self.y_sim, self.lambda1, self.lambda2
        )


@dataclass
class InnerLoopResult:
    iterations: int
    learning_rate: float
    losses: List[float] = field(default_factory=list)
    final: Optional[EmoLoss] = None


def optimize_tokens(
    tokens: EmotionalTokens,
    objective: TokenObjective,
    config: GuidanceConfig,
    outer_step: int = 0,
) -> InnerLoopResult:
    """Adam on S only; stops when L_emo < loss_stop or after max_inner updates."""
    result = InnerLoopResult(iterations=0, learning_rate=0.0)
    with torch.enable_grad():
        for i in range(config.max_inner + 1):
            loss = objective(tokens.S)
            value = float(loss.total.detach())
            if not math.isfinite(value):
                raise GuidanceDivergenceError(
                    f"L_emo became non-finite at inner iteration {i}",
                    details={"outer_step": outer_step, "inner_iteration": i},
                )
            result.losses.append(value)
            result.final = EmoLoss(*(term.detach() for term in loss))
            if value < config.loss_stop or i == config.max_inner:
                break

            lr = learning_rate(config.lr0, i if config.lr_decay == "inner" else outer_step)
            for group in tokens.optimizer.param_groups:
                group["lr"] = lr
            result.learning_rate = lr

            tokens.optimizer.zero_grad()
            loss.total.backward()
            if tokens.S.grad is None or not torch.isfinite(tokens.S.grad).all():
                raise GuidanceDivergenceError(
                    f"Non-finite gradient on emotional tokens at inner iteration {i}",
                    details={"outer_step": outer_step, "inner_iteration": i, "loss": value},
                )
            tokens.optimizer.step()
            tokens.iterations += 1
            result.iterations += 1

    logger.debug(
        f"Inner loop at step {outer_step}: {result.iterations} updates, L_emo {result.losses[0]:.5f} -> {result.losses[-1]:.5f}"
    )
    return result


# ---------------------------------------------------------------------------
# Trace persistence

def write_trace(trace: SynthesisTrace, path) -> Path:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    lines = [trace.header.model_dump_json()] + [record.model_dump_json() for record in trace.records]
    target.write_text("\n".join(lines) + "\n")
    return target


def read_trace(path) -> SynthesisTrace:
    source = Path(path)
    try:
        lines = [line for line in source.read_text().splitlines() if line.strip()]
        if not lines:
            raise MuseError(f"Trace {path} is empty")
        header = TraceHeader.model_validate_json(lines[0])
        records = [TraceRecord.model_validate_json(line) for line in lines[1:]]
    except (OSError, ValidationError, json.JSONDecodeError) as e:
        logger.error(f"Error reading trace {path}: {e}")
        raise MuseError(f"Unreadable trace {path}: {e}")
    return SynthesisTrace(header=header, records=records)


# ---------------------------------------------------------------------------
# Samplers

def _check_start(z_T: LatentState, timesteps: Sequence[int], models: ModelBundle) -> None:
    if tuple(z_T.z.shape) != models.denoiser.image_shape:
        raise ShapeMismatchError(f"Latent shape {tuple(z_T.z.shape)} != model shape {models.denoiser.image_shape}")
    if z_T.t != timesteps[0]:
        raise ScheduleError(f"Sampling starts at t={timesteps[0]}, latent is at t={z_T.t}")


def _neighbour_ids(wheel: EmotionWheel, target: EmotionLabel) -> List[int]:
    return sorted(label.id for label in similar_emotions(wheel, target))


def synthesize(
    z_T: LatentState,
    prompt: PromptTokens,
    y_target,
    models: ModelBundle,
    sched: NoiseSchedule,
    config: RunConfig,
    seed: int,
    generator: Optional[torch.Generator] = None,
    wheel: Optional[EmotionWheel] = None,
    mode: str = "generate",
    omega: Optional[float] = None,
    trace_path: Optional[str] = None,
) -> SynthesisResult:
    """Outer DDIM loop with semantic gating and emotional-token optimization."""
    guidance = config.guidance
    generator = generator if generator is not None else torch.Generator().manual_seed(seed)
    wheel = wheel or default_wheel()
    target = emotion(y_target)
    similar = _neighbour_ids(wheel, target) if guidance.use_similar else []
    omega = guidance.omega if omega is None else omega
    # Without token optimization the gate can never apply anything
    eta = guidance.eta if guidance.optimize_tokens_enabled else math.inf

    denoiser = models.denoiser
    k = guidance.num_tokens
    ids = prompt_ids(prompt, denoiser.max_prompt_len)
    void_condition = denoiser.condition(ids, k)
    timesteps = inference_timesteps(sched, config.sampling.num_inference_steps)
    _check_start(z_T, timesteps, models)

    trace = SynthesisTrace(header=TraceHeader(
        prompt=tokenizer.detokenize(prompt),
        target=target.name,
        seed=seed,
        mode=mode,
        config_hash=config_hash(config),
        similar=[emotion(i).name for i in similar],
    ))

    z = z_T.z.detach()
    tokens: Optional[EmotionalTokens] = None
    inherent: Optional[EmotionLabel] = None
    latched = False
    previous = None  # (z, eps, t) of the last outer step
    try:
        for step, t in enumerate(timesteps):
            t_prev = timesteps[step + 1] if step + 1 < len(timesteps) else 0
            condition = void_condition if not latched else denoiser.condition(ids, k, tokens.value())
            s_clip = semantic_similarity(
                LatentState(z, t), prompt, models, sched, guidance.rollout_stride,
                condition=condition, timesteps=timesteps[step:], omega=omega, tau=guidance.tau,
            )

            opening = not latched and gate_opens(s_clip, eta)
            if opening:
                latched = True
                if previous is None:
                    with torch.no_grad():
                        previous = (z, guided_noise(models, z, t, void_condition, omega), t)
                inherent = capture_inherent(
                    trace, models.guide, LatentState(previous[0], previous[2]), previous[1], sched, step
                )
                scale = float(denoiser.token_embedding.weight.detach().std())
                tokens = EmotionalTokens.initialize(
                    k, denoiser.token_dim, scale, generator, dtype=model_dtype(models), lr=guidance.lr0
                )
                logger.info(
                    f"Gate opened at step {step} (t={t}, s_clip={s_clip:.3f}); inherent emotion {inherent.name}"
                )

            inner = None
            if latched and (opening or guidance.reoptimize_each_step):
                objective = TokenObjective(
                    models=models, sched=sched, z_t=z, t=t, prompt=ids, omega=omega,
                    y_target=target.id,
                    y_inh=inherent.id if guidance.use_inherent else None,
                    y_sim=similar, lambda1=guidance.lambda1, lambda2=guidance.lambda2,
                )
                inner = optimize_tokens(tokens, objective, guidance, outer_step=step)

            tail = gate(s_clip, eta, tokens, latched) if tokens is not None else None
            condition = void_condition if tail is None else denoiser.condition(ids, k, tail)
            with torch.no_grad():
                eps = guided_noise(models, z, t, condition, omega)
                probs = classify(models.guide, models.codec.decode(predict_clean(z, eps, t, sched)))

            trace.records.append(_record(step, t, s_clip, latched, inner, probs))
            previous = (z, eps, t)
            with torch.no_grad():
                z = ddim_step(z, eps, t, sched, t_prev)
            LatentState(z, t_prev)
    except MuseError as e:
        trace.header.failed = True
        trace.header.error = e.to_record()
        logger.error(f"Synthesis failed after {len(trace.records)} steps: {e}")
        if trace_path:
            write_trace(trace, trace_path)
        raise

    if trace_path:
        write_trace(trace, trace_path)
    return SynthesisResult(image=models.codec.decode(z), trace=trace)


def _record(step, t, s_clip, gate_open, inner: Optional[InnerLoopResult], probs) -> TraceRecord:
    record = TraceRecord(
        step=step,
        t=t,
        s_clip=s_clip,
        gate_open=gate_open,
        probabilities=[float(p) for p in probs.detach().to(torch.float64)],
    )
    if inner is not None and inner.final is not None:
        record.inner_iterations = inner.iterations
        record.learning_rate = inner.learning_rate
        record.inner_losses = inner.losses
        record.loss_emo = float(inner.final.total)
        record.loss_target = float(inner.final.target)
        record.loss_inherent = float(inner.final.inherent)
        record.loss_similar = float(inner.final.similar)
    return record


@torch.no_grad()
def sample_cfg(
    z_T: LatentState,
    prompt: PromptTokens,
    models: ModelBundle,
    sched: NoiseSchedule,
    config: RunConfig,
    omega: Optional[float] = None,
) -> torch.Tensor:
    """Vanilla CFG sampler with the void tail; the closed-gate path of `synthesize`."""
    denoiser = models.denoiser
    omega = config.guidance.omega if omega is None else omega
    condition = denoiser.condition(prompt_ids(prompt, denoiser.max_prompt_len), config.guidance.num_tokens)
    timesteps = inference_timesteps(sched, config.sampling.num_inference_steps)
    _check_start(z_T, timesteps, models)
    z = z_T.z.detach()
    for step, t in enumerate(timesteps):
        t_prev = timesteps[step + 1] if step + 1 < len(timesteps) else 0
        eps = guided_noise(models, z, t, condition, omega)
        z = ddim_step(z, eps, t, sched, t_prev)
    return models.codec.decode(z)


def sample_classifier_guidance(
    z_T: LatentState,
    prompt: PromptTokens,
    y_target,
    models: ModelBundle,
    sched: NoiseSchedule,
    config: RunConfig,
    scale: Optional[float] = None,
) -> torch.Tensor:
    """Baseline: steer the predicted noise with the gradient of log p(target | z0_hat)."""
    denoiser = models.denoiser
    guidance = config.guidance
    scale = guidance.omega if scale is None else scale
    target = emotion(y_target).id
    condition = denoiser.condition(prompt_ids(prompt, denoiser.max_prompt_len), guidance.num_tokens)
    timesteps = inference_timesteps(sched, config.sampling.num_inference_steps)
    _check_start(z_T, timesteps, models)

    z = z_T.z.detach()
    for step, t in enumerate(timesteps):
        t_prev = timesteps[step + 1] if step + 1 < len(timesteps) else 0
        with torch.enable_grad():
            z_in = z.detach().requires_grad_(True)
            eps = guided_noise(models, z_in, t, condition, guidance.omega)
            probs = classify(models.guide, models.codec.decode(predict_clean(z_in, eps, t, sched)))
            log_prob = probs.clamp(min=PROB_FLOOR).log()[target]
            grad = torch.autograd.grad(log_prob, z_in)[0]
        if not torch.isfinite(grad).all():
            raise GuidanceDivergenceError(f"Non-finite classifier gradient at t={t}")
        # noise-space units: eps - sqrt(1 - alpha_bar) * grad log p
        steered = cg_combine(eps.detach(), -math.sqrt(1.0 - sched.alpha_bar(t)) * grad, scale)
        with torch.no_grad():
            z = ddim_step(z, steered, t, sched, t_prev)
    return models.codec.decode(z)


@torch.no_grad()
def invert(
    image: torch.Tensor,
    prompt: PromptTokens,
    models: ModelBundle,
    sched: NoiseSchedule,
    config: RunConfig,
) -> LatentState:
    """DDIM inversion of a clean image under the pure conditional (no CFG)."""
    denoiser = models.denoiser
    if tuple(image.shape) != denoiser.image_shape:
        raise ShapeMismatchError(f"Source image {tuple(image.shape)} != model shape {denoiser.image_shape}")
    condition = denoiser.condition(prompt_ids(prompt, denoiser.max_prompt_len), config.guidance.num_tokens)
    z = models.codec.encode(image.to(model_dtype(models)))
    t_prev = 0
    for t in reversed(inference_timesteps(sched, config.sampling.num_inference_steps)):
        eps = guided_noise(models, z, t, condition, 0.0)
        z = ddim_invert_step(z, eps, t, sched, t_prev)
        t_prev = t
    return LatentState(z, t_prev)


# ---------------------------------------------------------------------------
# Entry points

def generate(
    prompt: Optional[str],
    y_target,
    models: ModelBundle,
    config: RunConfig,
    seed: int,
    sampler: str = "muse",
    wheel: Optional[EmotionWheel] = None,
    trace_path: Optional[str] = None,
) -> SynthesisResult:
    """Generate from Gaussian noise; without a prompt, use the emotion-only template."""
    if prompt is None:
        tokens = tokenizer.tokenize(emotion_only_prompt(y_target), allow_emotion_words=True)
    else:
        tokens = tokenizer.tokenize(prompt)
    sched = schedule_for(config)
    generator = torch.Generator().manual_seed(seed)
    timesteps = inference_timesteps(sched, config.sampling.num_inference_steps)
    z_T = LatentState(draw_initial_latent(models, generator), timesteps[0])

    if sampler == "muse":
        return synthesize(
            z_T, tokens, y_target, models, sched, config, seed,
            generator=generator, wheel=wheel, trace_path=trace_path,
        )
    if sampler == "cfg":
        image = sample_cfg(z_T, tokens, models, sched, config)
    elif sampler == "cg":
        image = sample_classifier_guidance(z_T, tokens, y_target, models, sched, config)
    else:
        raise MuseError(f"Unknown sampler '{sampler}'")
    header = TraceHeader(
        prompt=tokenizer.detokenize(tokens), target=emotion(y_target).name, seed=seed,
        mode="generate", sampler=sampler, config_hash=config_hash(config),
    )
    return SynthesisResult(image=image, trace=SynthesisTrace(header=header))


def edit(
    image: torch.Tensor,
    prompt: str,
    y_target,
    models: ModelBundle,
    config: RunConfig,
    seed: int,
    wheel: Optional[EmotionWheel] = None,
    trace_path: Optional[str] = None,
) -> SynthesisResult:
    """Invert the source under its prompt, then run guided sampling from there."""
    tokens = tokenizer.tokenize(prompt)
    sched = schedule_for(config)
    z_T = invert(image, tokens, models, sched, config)
    return synthesize(
        z_T, tokens, y_target, models, sched, config, seed,
        wheel=wheel, mode="edit", omega=config.guidance.edit_omega, trace_path=trace_path,
    )


def schedule_for(config: RunConfig) -> NoiseSchedule:
    sampling = config.sampling
    return make_linear_schedule(sampling.num_train_steps, sampling.beta_start, sampling.beta_end)


def calibrate_eta(
    prompts: Sequence[str],
    models: ModelBundle,
    config: RunConfig,
    seeds: Sequence[int] = (0,),
    percentile: Optional[float] = None,
) -> float:
    """Percentile of s_clip over closed-gate trajectories."""
    percentile = config.guidance.eta_percentile if percentile is None else percentile
    closed = config.model_copy(update={"guidance": config.guidance.model_copy(update={"eta": math.inf})})
    values: List[float] = []
    for prompt in prompts:
        for seed in seeds:
            result = generate(prompt, 0, models, closed, seed)
            values.extend(record.s_clip for record in result.trace.records)
    if not values:
        raise MuseError("No s_clip values collected for calibration")
    eta = float(np.percentile(np.asarray(values, dtype=np.float64), percentile))
    logger.info(f"Calibrated eta={eta:.4f} at percentile {percentile} over {len(values)} steps")
    return eta


class SynthesisService:
    """Holds the frozen model bundle for CLI runs."""

    def __init__(self, models_dir: Optional[str] = None):
        self.models_dir = models_dir
        self._bundle: Optional[ModelBundle] = None

    @property
    def bundle(self) -> ModelBundle:
        if self._bundle is None:
            directory = self.models_dir or settings.models_dir
            logger.info(f"Loading model bundle from {directory}")
            self._bundle = load_bundle(directory, device=settings.device)
        return self._bundle

    def use_bundle(self, bundle: ModelBundle) -> None:
        self._bundle = bundle.frozen()

    def use_models_dir(self, models_dir: str) -> None:
        if models_dir != self.models_dir:
            self.models_dir = models_dir
            self._bundle = None

    def generate(self, prompt, y_target, config, seed, sampler="muse", wheel=None, trace_path=None):
        return generate(prompt, y_target, self.bundle, config, seed, sampler, wheel, trace_path)

    def edit(self, image, prompt, y_target, config, seed, wheel=None, trace_path=None):
        return edit(image, prompt, y_target, self.bundle, config, seed, wheel, trace_path)

    def calibrate_eta(self, prompts, config, seeds=(0,), percentile=None):
        return calibrate_eta(prompts, self.bundle, config, seeds, percentile)


# Global synthesis service instance
synthesis_service = SynthesisService()
