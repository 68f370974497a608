import math

import pytest
import torch

from app.exceptions import (
    ContractViolationError,
    GuidanceDivergenceError,
    MuseError,
    ProbabilityError,
    ShapeMismatchError,
    VocabularyError,
)
from app.schemas.guidance import SynthesisTrace, TraceHeader
from app.services import muse_synthesis
from app.services.diffusion_core import LatentState
from app.services.emotion_space import emotion
from app.services.glyph_data import tokenize
from app.services.muse_synthesis import (
    EmoLoss,
    EmotionalTokens,
    TokenObjective,
    calibrate_eta,
    capture_inherent,
    edit,
    emo_loss,
    gate,
    gate_opens,
    generate,
    learning_rate,
    optimize_tokens,
    prompt_ids,
    read_trace,
    semantic_similarity,
    write_trace,
)

PROMPT = "a red star on dark background at top left"
LOG_FLOOR = -math.log(1e-6)


def _one_hot(index: int) -> torch.Tensor:
    probs = torch.zeros(8, dtype=torch.float64)
    probs[index] = 1.0
    return probs


def _with_guidance(config, **updates):
    return config.model_copy(update={"guidance": config.guidance.model_copy(update=updates)})


def _tokens(seed: int = 0) -> EmotionalTokens:
    return EmotionalTokens.initialize(2, 16, 1.0, torch.Generator().manual_seed(seed), dtype=torch.float64)


# -- emotion loss -------------------------------------------------------------

def test_emo_loss_one_hot_on_target():
    sadness = emotion("sadness").id
    loss = emo_loss(_one_hot(sadness), "sadness", "amusement", ["contentment", "disgust"])
    assert float(loss.target) == 0.0
    assert float(loss.inherent) == pytest.approx(LOG_FLOOR)
    assert float(loss.similar) == pytest.approx(LOG_FLOOR)
    assert float(loss.total) == pytest.approx(-0.002 * LOG_FLOOR)
    assert float(loss.total) == pytest.approx(-0.02763, abs=1e-5)


def test_emo_loss_uniform():
    loss = emo_loss(torch.full((8,), 0.125, dtype=torch.float64), 0, 1, [2, 3])
    assert float(loss.total) == pytest.approx(math.log(8) * (1 - 0.0005 - 0.0015))
    assert float(loss.total) == pytest.approx(2.0753, abs=1e-4)


def test_emo_loss_without_weights_is_target_term():
    probs = torch.softmax(torch.randn(8, dtype=torch.float64), dim=0)
    loss = emo_loss(probs, 4, 2, [3, 5], lambda1=0.0, lambda2=0.0)
    assert float(loss.total) == pytest.approx(float(loss.target))
    assert float(loss.target) == pytest.approx(-math.log(float(probs[4])))


def test_emo_loss_is_linear_in_weights():
    probs = torch.softmax(torch.randn(8, dtype=torch.float64), dim=0)
    loss = emo_loss(probs, 4, 2, [3, 5], lambda1=0.3, lambda2=0.7)
    expected = loss.target - 0.3 * loss.inherent - 0.7 * loss.similar
    assert float(loss.total) == pytest.approx(float(expected))


def test_emo_loss_conflicting_labels():
    probs = torch.softmax(torch.randn(8, dtype=torch.float64), dim=0)
    same = emo_loss(probs, 4, 4, [])
    assert float(same.inherent) == 0.0
    absent = emo_loss(probs, 4, None, [4])
    assert float(absent.inherent) == 0.0
    assert float(absent.similar) == 0.0
    with_target = emo_loss(probs, 4, None, [4, 3])
    assert float(with_target.similar) == pytest.approx(-math.log(float(probs[3])))


@pytest.mark.parametrize(
    "probs",
    [
        torch.full((7,), 1 / 7, dtype=torch.float64),
        torch.full((8,), 0.2, dtype=torch.float64),
        torch.tensor([1.1, -0.1, 0, 0, 0, 0, 0, 0], dtype=torch.float64),
        torch.tensor([float("nan")] + [0.0] * 7, dtype=torch.float64),
    ],
)
def test_emo_loss_rejects_non_distributions(probs):
    with pytest.raises(ProbabilityError):
        emo_loss(probs, 0)


def test_learning_rate_schedule():
    assert learning_rate(0.01, 0) == 0.01
    assert learning_rate(0.01, 50) == pytest.approx(0.005)
    assert learning_rate(0.01, 100) == 0.0
    assert learning_rate(0.01, 150) == 0.0


# -- gate ---------------------------------------------------------------------

def test_gate_thresholds():
    assert not gate_opens(1e9, math.inf)
    assert gate_opens(-1e9, -math.inf)
    assert gate_opens(5.0, 5.0)
    assert not gate_opens(4.9, 5.0)
    assert gate_opens(-3.0, 5.0, latched=True)


def test_gate_selects_tail():
    tokens = _tokens()
    assert gate(1.0, 2.0, tokens) is None
    assert torch.equal(gate(2.0, 2.0, tokens), tokens.value())
    assert not gate(2.0, 2.0, tokens).requires_grad


def test_semantic_similarity_scales_cosine_by_temperature(monkeypatch, tiny_bundle, tiny_schedule):
    unit = torch.zeros(16, dtype=torch.float64)
    unit[0] = 1.0
    other = torch.zeros(16, dtype=torch.float64)
    other[1] = 1.0
    state = LatentState(torch.randn(3, 32, 32, dtype=torch.float64), 31)

    monkeypatch.setattr(muse_synthesis, "embed_image", lambda model, image: unit)
    monkeypatch.setattr(muse_synthesis, "embed_text", lambda model, ids: unit)
    aligned = semantic_similarity(state, tokenize(PROMPT), tiny_bundle, tiny_schedule, stride=2, tau=0.07)
    assert aligned == pytest.approx(1.0 / 0.07)

    monkeypatch.setattr(muse_synthesis, "embed_text", lambda model, ids: other)
    assert semantic_similarity(state, tokenize(PROMPT), tiny_bundle, tiny_schedule, stride=2) == 0.0


def test_semantic_similarity_is_deterministic(tiny_bundle, tiny_schedule):
    state = LatentState(torch.randn(3, 32, 32, dtype=torch.float64), 21)
    first = semantic_similarity(state, tokenize(PROMPT), tiny_bundle, tiny_schedule, stride=3)
    assert math.isfinite(first)
    assert semantic_similarity(state, tokenize(PROMPT), tiny_bundle, tiny_schedule, stride=3) == first


# -- inherent capture ---------------------------------------------------------

def test_capture_inherent_only_once(tiny_bundle, tiny_schedule):
    trace = SynthesisTrace(header=TraceHeader(prompt=PROMPT, target="awe", seed=0, mode="generate"))
    z = LatentState(torch.randn(3, 32, 32, dtype=torch.float64), 31)
    eps = torch.randn(3, 32, 32, dtype=torch.float64)
    label = capture_inherent(trace, tiny_bundle.guide, z, eps, tiny_schedule, step=2)
    assert trace.header.inherent == label.name
    assert trace.header.inherent_step == 2
    with pytest.raises(ContractViolationError):
        capture_inherent(trace, tiny_bundle.guide, z, eps, tiny_schedule, step=3)


# -- inner loop ---------------------------------------------------------------

def _objective(tiny_bundle, tiny_schedule, omega=3.0):
    torch.manual_seed(5)
    return TokenObjective(
        models=tiny_bundle, sched=tiny_schedule,
        z_t=torch.randn(3, 32, 32, dtype=torch.float64), t=21,
        prompt=prompt_ids(tokenize(PROMPT), 10), omega=omega,
        y_target=emotion("awe").id, y_inh=emotion("fear").id, y_sim=[0, 3],
    )


def test_token_objective_gradient_matches_finite_differences(tiny_bundle, tiny_schedule):
    objective = _objective(tiny_bundle, tiny_schedule)
    S = torch.randn(2, 16, dtype=torch.float64, requires_grad=True)
    (analytic,) = torch.autograd.grad(objective(S).total, S)

    h = 1e-6
    numeric = torch.zeros_like(analytic)
    with torch.no_grad():
        for i in range(S.numel()):
            delta = torch.zeros(S.numel(), dtype=torch.float64)
            delta[i] = h
            delta = delta.view_as(S)
            numeric.view(-1)[i] = (objective(S + delta).total - objective(S - delta).total) / (2 * h)

    assert float(analytic.abs().max()) > 0
    assert float((analytic - numeric).norm() / analytic.norm()) <= 1e-3


def test_optimize_tokens_respects_iteration_cap(tiny_bundle, tiny_schedule, tiny_config):
    tokens = _tokens()
    result = optimize_tokens(tokens, _objective(tiny_bundle, tiny_schedule), tiny_config.guidance)
    assert result.iterations == tiny_config.guidance.max_inner == 3
    assert len(result.losses) == 4
    assert tokens.iterations == 3
    assert result.learning_rate == pytest.approx(learning_rate(tiny_config.guidance.lr0, 2))


def test_optimize_tokens_stops_below_threshold(tiny_bundle, tiny_schedule, tiny_config):
    tokens = _tokens()
    before = tokens.value().clone()
    guidance = tiny_config.guidance.model_copy(update={"loss_stop": 100.0})
    result = optimize_tokens(tokens, _objective(tiny_bundle, tiny_schedule), guidance)
    assert result.iterations == 0
    assert len(result.losses) == 1
    assert torch.equal(tokens.value(), before)


def _quadratic(S: torch.Tensor) -> EmoLoss:
    value = ((S - 1.0) ** 2).sum()
    zero = value.new_zeros(())
    return EmoLoss(value, value, zero, zero)


def test_optimize_tokens_descends_on_a_quadratic(tiny_config):
    tokens = _tokens()
    guidance = tiny_config.guidance.model_copy(update={"max_inner": 20, "lr0": 0.1})
    result = optimize_tokens(tokens, _quadratic, guidance)
    assert result.losses[-1] < result.losses[0]


def test_outer_learning_rate_decay(tiny_config):
    guidance = tiny_config.guidance.model_copy(update={"lr_decay": "outer"})
    result = optimize_tokens(_tokens(), _quadratic, guidance, outer_step=50)
    assert result.learning_rate == pytest.approx(guidance.lr0 * 0.5)


def test_optimize_tokens_non_finite_loss(tiny_config):
    def diverging(S):
        value = S.sum() * float("nan")
        return EmoLoss(value, value, value, value)

    with pytest.raises(GuidanceDivergenceError) as exc_info:
        optimize_tokens(_tokens(), diverging, tiny_config.guidance, outer_step=3)
    assert exc_info.value.details["outer_step"] == 3


# -- traces -------------------------------------------------------------------

def test_trace_roundtrip(tmp_path, tiny_bundle, tiny_config):
    config = _with_guidance(tiny_config, eta=-math.inf)
    result = generate(PROMPT, "awe", tiny_bundle, config, seed=0)
    path = write_trace(result.trace, tmp_path / "run.trace.jsonl")
    assert read_trace(path) == result.trace


def test_read_malformed_trace(tmp_path):
    path = tmp_path / "bad.trace.jsonl"
    path.write_text("{not json}\n")
    with pytest.raises(MuseError):
        read_trace(path)
    with pytest.raises(MuseError):
        read_trace(tmp_path / "missing.trace.jsonl")


def test_failed_run_writes_partial_trace(monkeypatch, tmp_path, tiny_bundle, tiny_config):
    def fail(*args, **kwargs):
        raise GuidanceDivergenceError("L_emo became non-finite")

    monkeypatch.setattr(muse_synthesis, "optimize_tokens", fail)
    path = tmp_path / "failed.trace.jsonl"
    with pytest.raises(GuidanceDivergenceError):
        generate(PROMPT, "awe", tiny_bundle, _with_guidance(tiny_config, eta=-math.inf), seed=0, trace_path=str(path))
    trace = read_trace(path)
    assert trace.header.failed
    assert trace.header.error["error"] == "guidance_divergence"


# -- samplers -----------------------------------------------------------------

def test_closed_gate_matches_plain_cfg(tiny_bundle, tiny_config):
    muse = generate(PROMPT, "awe", tiny_bundle, tiny_config, seed=0)
    cfg = generate(PROMPT, "awe", tiny_bundle, tiny_config, seed=0, sampler="cfg")
    assert torch.equal(muse.image, cfg.image)
    assert len(muse.trace.records) == 4
    assert [r.t for r in muse.trace.records] == [31, 21, 11, 1]
    assert not any(muse.trace.gate_flags)
    assert muse.trace.header.inherent is None
    assert cfg.trace.header.sampler == "cfg" and cfg.trace.records == []


def test_disabled_token_optimization_matches_plain_cfg(tiny_bundle, tiny_config):
    config = _with_guidance(tiny_config, eta=-math.inf, optimize_tokens_enabled=False)
    muse = generate(PROMPT, "awe", tiny_bundle, config, seed=1)
    cfg = generate(PROMPT, "awe", tiny_bundle, config, seed=1, sampler="cfg")
    assert torch.equal(muse.image, cfg.image)


def test_open_gate_from_first_step(tiny_bundle, tiny_config):
    config = _with_guidance(tiny_config, eta=-math.inf)
    result = generate(PROMPT, "awe", tiny_bundle, config, seed=0)
    trace = result.trace
    assert trace.opened_at == 0
    assert trace.header.inherent_step == 0
    assert trace.header.inherent is not None
    assert trace.header.similar == sorted(trace.header.similar, key=lambda n: emotion(n).id)
    assert all(trace.gate_flags)
    for record in trace.records:
        assert 0 <= record.inner_iterations <= tiny_config.guidance.max_inner
        assert record.loss_emo is not None
        assert sum(record.probabilities) == pytest.approx(1.0)
    assert torch.isfinite(result.image).all()


def test_synthesis_selects_tail_through_gate(monkeypatch, tiny_bundle, tiny_config):
    calls = []

    def recording_gate(s_clip, eta, tokens, latched=False):
        calls.append(latched)
        return gate(s_clip, eta, tokens, latched)

    monkeypatch.setattr(muse_synthesis, "gate", recording_gate)
    generate(PROMPT, "awe", tiny_bundle, _with_guidance(tiny_config, eta=-math.inf), seed=0)
    assert calls == [True] * 4

    calls.clear()
    generate(PROMPT, "awe", tiny_bundle, tiny_config, seed=0)
    assert calls == []


def test_single_optimization_when_not_reoptimizing(tiny_bundle, tiny_config):
    config = _with_guidance(tiny_config, eta=-math.inf, reoptimize_each_step=False)
    trace = generate(PROMPT, "awe", tiny_bundle, config, seed=0).trace
    assert trace.records[0].loss_emo is not None
    assert all(record.loss_emo is None for record in trace.records[1:])


def test_gate_flags_are_monotone(tiny_bundle, tiny_config):
    for eta in (-math.inf, 0.0, 5.0, math.inf):
        flags = generate(PROMPT, "fear", tiny_bundle, _with_guidance(tiny_config, eta=eta), seed=2).trace.gate_flags
        first_open = flags.index(True) if True in flags else len(flags)
        assert flags == [False] * first_open + [True] * (len(flags) - first_open)


def test_generate_is_seed_deterministic(tiny_bundle, tiny_config):
    config = _with_guidance(tiny_config, eta=-math.inf)
    a = generate(PROMPT, "awe", tiny_bundle, config, seed=3)
    b = generate(PROMPT, "awe", tiny_bundle, config, seed=3)
    assert torch.equal(a.image, b.image)
    assert a.trace == b.trace


def test_emotion_only_generation(tiny_bundle, tiny_config):
    result = generate(None, "sadness", tiny_bundle, tiny_config, seed=0)
    assert result.trace.header.prompt == "an image of sadness"


@pytest.mark.parametrize("prompt", ["a zebra", "a sadness star"])
def test_generate_rejects_out_of_vocabulary_prompts(tiny_bundle, tiny_config, prompt):
    with pytest.raises(VocabularyError):
        generate(prompt, "awe", tiny_bundle, tiny_config, seed=0)


def test_unknown_sampler(tiny_bundle, tiny_config):
    with pytest.raises(MuseError):
        generate(PROMPT, "awe", tiny_bundle, tiny_config, seed=0, sampler="ddpm")


def test_classifier_guidance_sampler(tiny_bundle, tiny_config):
    result = generate(PROMPT, "awe", tiny_bundle, tiny_config, seed=0, sampler="cg")
    assert result.image.shape == (3, 32, 32)
    assert torch.isfinite(result.image).all()
    assert result.trace.header.sampler == "cg"


def test_edit_runs_from_inverted_latent(tiny_bundle, tiny_config):
    source = torch.rand(3, 32, 32, dtype=torch.float64) * 2 - 1
    result = edit(source, PROMPT, "awe", tiny_bundle, _with_guidance(tiny_config, eta=-math.inf), seed=0)
    assert result.trace.header.mode == "edit"
    assert len(result.trace.records) == 4
    assert torch.isfinite(result.image).all()


def test_edit_rejects_wrong_image_shape(tiny_bundle, tiny_config):
    with pytest.raises(ShapeMismatchError):
        edit(torch.zeros(3, 16, 16, dtype=torch.float64), PROMPT, "awe", tiny_bundle, tiny_config, seed=0)


def test_calibrate_eta(tiny_bundle, tiny_config):
    eta = calibrate_eta([PROMPT], tiny_bundle, tiny_config, seeds=(0, 1), percentile=50.0)
    assert math.isfinite(eta)
    low = calibrate_eta([PROMPT], tiny_bundle, tiny_config, seeds=(0, 1), percentile=0.0)
    assert low <= eta
