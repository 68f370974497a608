import pytest
import torch

from app.exceptions import CheckpointError, ConfigError, ShapeMismatchError
from app.models.checkpoints import (
    BUNDLE_FILES,
    load_bundle,
    load_checkpoint,
    save_bundle,
    save_checkpoint,
)
from app.models.classifiers import EmotionClassifier, classify
from app.models.denoiser import Denoiser, predict_noise
from app.models.embedder import embed_image, embed_text
from app.models.layers import parameter_count
from app.schemas.checkpoint import ModelMetadata
from app.services.glyph_data import tokenizer

PROMPT = "a red star on dark background at top left"
OTHER_PROMPT = "a blue ring on light background at bottom right"


def _ids(*prompts):
    return tokenizer.batch(list(prompts), max_len=10)


def test_output_shapes(tiny_bundle):
    denoiser = tiny_bundle.denoiser
    z = torch.randn(2, 3, 32, 32, dtype=torch.float64)
    c = denoiser.condition(_ids(PROMPT, OTHER_PROMPT), tail_length=2)
    assert c.tokens.shape == (2, 12, 16)
    assert predict_noise(denoiser, z, 5, c).shape == z.shape
    assert predict_noise(denoiser, z[0], 5, denoiser.condition(_ids(PROMPT), 2)).shape == (3, 32, 32)
    assert classify(tiny_bundle.guide, z).shape == (2, 8)
    assert embed_image(tiny_bundle.embedder, z).shape == (2, 16)


def test_condition_changes_noise_prediction(tiny_bundle):
    denoiser = tiny_bundle.denoiser
    z = torch.randn(3, 32, 32, dtype=torch.float64)
    eps_a = predict_noise(denoiser, z, 11, denoiser.condition(_ids(PROMPT), 2))
    eps_b = predict_noise(denoiser, z, 11, denoiser.condition(_ids(OTHER_PROMPT), 2))
    assert not torch.allclose(eps_a, eps_b)
    null = denoiser.null_condition(1, 2)
    assert torch.equal(predict_noise(denoiser, z, 11, null), predict_noise(denoiser, z, 11, null))


def test_emotional_tail_replaces_void_block(tiny_bundle):
    denoiser = tiny_bundle.denoiser
    S = torch.randn(2, 16, dtype=torch.float64)
    void = denoiser.condition(_ids(PROMPT), 2)
    emotional = denoiser.condition(_ids(PROMPT), 2, S)
    assert void.origin_flags == [False] * 12
    assert emotional.origin_flags == [False] * 10 + [True, True]
    assert torch.equal(emotional.tokens[0, :10], void.tokens[0, :10])
    assert torch.equal(emotional.tokens[0, 10:], S)


def test_condition_rejects_bad_shapes(tiny_bundle):
    denoiser = tiny_bundle.denoiser
    with pytest.raises(ShapeMismatchError):
        denoiser.condition(_ids(PROMPT), 2, torch.zeros(3, 16, dtype=torch.float64))
    with pytest.raises(ShapeMismatchError):
        denoiser.encode_prompt(torch.zeros(1, 7, dtype=torch.long))
    with pytest.raises(ShapeMismatchError):
        predict_noise(denoiser, torch.zeros(3, 16, 16, dtype=torch.float64), 1, denoiser.null_condition(1, 2))
    with pytest.raises(ShapeMismatchError):
        classify(tiny_bundle.guide, torch.zeros(3, 16, 16, dtype=torch.float64))


def test_noise_gradient_wrt_emotional_tokens_matches_finite_differences(tiny_bundle):
    denoiser = tiny_bundle.denoiser
    torch.manual_seed(3)
    z = torch.randn(3, 32, 32, dtype=torch.float64)
    weights = torch.randn(3, 32, 32, dtype=torch.float64)
    ids = _ids(PROMPT)

    def f(S):
        return (predict_noise(denoiser, z, 21, denoiser.condition(ids, 2, S)) * weights).sum()

    S = torch.randn(2, 16, dtype=torch.float64, requires_grad=True)
    (analytic,) = torch.autograd.grad(f(S), S)

    h = 1e-6
    numeric = torch.zeros_like(analytic)
    with torch.no_grad():
        for i in range(S.numel()):
            delta = torch.zeros(S.numel(), dtype=torch.float64)
            delta[i] = h
            delta = delta.view_as(S)
            numeric.view(-1)[i] = (f(S + delta) - f(S - delta)) / (2 * h)

    assert float(analytic.abs().max()) > 0
    assert float((analytic - numeric).norm() / analytic.norm()) <= 1e-3


def test_classifier_gradient_matches_finite_differences(tiny_bundle):
    torch.manual_seed(4)
    x = torch.randn(3, 32, 32, dtype=torch.float64, requires_grad=True)
    target = 2

    def f(image):
        return torch.log(classify(tiny_bundle.guide, image)[target])

    (grad,) = torch.autograd.grad(f(x), x)
    h = 1e-6
    with torch.no_grad():
        for _ in range(5):
            direction = torch.randn_like(x)
            numeric = (f(x + h * direction) - f(x - h * direction)) / (2 * h)
            analytic = (grad * direction).sum()
            assert float(abs(analytic - numeric)) <= 1e-3 * max(1.0, float(abs(analytic)))


def test_classifier_outputs_are_distributions(tiny_bundle):
    for model in (tiny_bundle.guide, tiny_bundle.agnostic):
        probs = classify(model, 3 * torch.randn(6, 3, 32, 32, dtype=torch.float64))
        assert torch.all(probs >= 0)
        assert torch.allclose(probs.sum(dim=-1), torch.ones(6, dtype=torch.float64), atol=1e-12)


def test_embedder_outputs_unit_vectors(tiny_bundle):
    embedder = tiny_bundle.embedder
    image_vectors = embed_image(embedder, torch.randn(4, 3, 32, 32, dtype=torch.float64))
    text_vectors = embed_text(embedder, _ids(PROMPT, OTHER_PROMPT))
    assert torch.allclose(image_vectors.norm(dim=-1), torch.ones(4, dtype=torch.float64), atol=1e-9)
    assert torch.allclose(text_vectors.norm(dim=-1), torch.ones(2, dtype=torch.float64), atol=1e-9)
    assert embed_text(embedder, _ids(PROMPT)[0]).shape == (16,)


def test_guide_and_agnostic_architectures_differ():
    guide, agnostic = EmotionClassifier("guide"), EmotionClassifier("agnostic")
    assert parameter_count(guide) != parameter_count(agnostic)
    with pytest.raises(ConfigError):
        EmotionClassifier("resnet")


def test_checkpoint_roundtrip(tmp_path):
    torch.manual_seed(0)
    model = Denoiser(tokenizer.vocab_size, token_dim=16, base_channels=8, attention_heads=2)
    model.metadata = ModelMetadata(kind="denoiser", arch_id="unet-xattn", seed=7, dataset_hash="abc")
    path = save_checkpoint(model, str(tmp_path / "denoiser.pt"))

    loaded = load_checkpoint(str(path))
    assert isinstance(loaded, Denoiser)
    assert loaded.metadata.seed == 7
    assert loaded.metadata.dataset_hash == "abc"
    assert loaded.metadata.parameter_count == parameter_count(model)
    for key, value in model.state_dict().items():
        assert torch.equal(loaded.state_dict()[key], value), key


def test_checkpoint_with_unknown_format_version(tmp_path):
    path = save_checkpoint(EmotionClassifier("agnostic"), str(tmp_path / "clf.pt"))
    archive = torch.load(path, weights_only=True)
    archive["format_version"] = 99
    torch.save(archive, path)
    with pytest.raises(CheckpointError):
        load_checkpoint(str(path))


def test_missing_checkpoint(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(str(tmp_path / "nothing.pt"))


def test_bundle_without_reduced_classifier(tmp_path, tiny_bundle):
    save_bundle(tiny_bundle, str(tmp_path))
    (tmp_path / BUNDLE_FILES["reduced"]).unlink()
    bundle = load_bundle(str(tmp_path))
    assert bundle.reduced is None
    assert bundle.guide.arch_id == "guide"
    assert bundle.agnostic.arch_id == "agnostic"
    assert not any(p.requires_grad for p in bundle.denoiser.parameters())
