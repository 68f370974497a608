from collections import Counter
from pathlib import Path
import hashlib
import json

import numpy as np
import pytest
import torch

from app.exceptions import DatasetError, VocabularyError
from app.schemas.glyph import GlyphSpec, PromptTokens
from app.services.emotion_space import EMOTION_NAMES
from app.services.glyph_data import (
    IMAGE_SIZE,
    SHAPE_EMOTION,
    SHAPE_EMOTION_CHECKSUM,
    SHAPES,
    chi_square_independence,
    dataset_hash,
    detokenize,
    emotion_only_prompt,
    generate_dataset,
    image_to_tensor,
    inherent_emotion_of_prompt,
    load_dataset,
    prompt_for_spec,
    render_glyph,
    sample_prompts,
    sample_spec,
    save_dataset,
    shape_prompts,
    shape_emotion_checksum,
    tensor_to_image,
    tokenize,
    tokenizer,
)


GOLDEN_GLYPHS = Path(__file__).parent / "golden" / "glyphs.json"


def _spec(**overrides) -> GlyphSpec:
    values = dict(
        shape="star", color="red", background="dark", row="top", column="left",
        emotion="fear", jitter_seed=11,
    )
    values.update(overrides)
    return GlyphSpec(**values)


def test_tokenize_roundtrip():
    prompt = "a red star on dark background at top left"
    assert detokenize(tokenize(prompt)) == prompt


def test_empty_prompt_is_empty_sequence():
    assert tokenize("").ids == []
    assert detokenize(PromptTokens(ids=[])) == ""


def test_unknown_word_rejected():
    with pytest.raises(VocabularyError) as exc_info:
        tokenize("a zebra")
    assert exc_info.value.words == ["zebra"]
    assert exc_info.value.to_record()["error"] == "out_of_vocabulary"


def test_emotion_words_only_in_emotion_only_template():
    with pytest.raises(VocabularyError):
        tokenize("a sadness circle")
    tokens = tokenizer.tokenize(emotion_only_prompt("awe"), allow_emotion_words=True)
    assert detokenize(tokens) == "an image of awe"


def test_pad_token_is_not_a_word():
    with pytest.raises(VocabularyError):
        tokenize("<pad>")


def test_batch_pads_with_zero():
    batch = tokenizer.batch(["a red star", "an orange ring on gray background"], max_len=10)
    assert batch.shape == (2, 10)
    assert batch.dtype == torch.long
    assert batch[0, 3:].eq(0).all()


def test_prompt_for_spec_uses_article():
    assert prompt_for_spec(_spec(color="orange")).startswith("an orange star")
    assert prompt_for_spec(_spec()) == "a red star on dark background at top left"


def test_prompts_never_name_the_emotion():
    for prompt, _ in sample_prompts(200, seed=0):
        assert not set(prompt.split()) & set(EMOTION_NAMES)


def test_render_is_deterministic():
    spec = _spec()
    image = render_glyph(spec)
    assert image.shape == (IMAGE_SIZE, IMAGE_SIZE, 3)
    assert image.dtype == np.uint8
    assert np.array_equal(image, render_glyph(spec))


def test_emotion_changes_pixels_with_fixed_content():
    assert not np.array_equal(render_glyph(_spec(emotion="fear")), render_glyph(_spec(emotion="awe")))


def test_every_shape_renders_some_pixels():
    for shape in SHAPES:
        image = render_glyph(_spec(color="white", shape=shape))
        assert (image == 250).all(axis=-1).sum() > 5, shape


def test_tensor_conversions_roundtrip():
    image = render_glyph(_spec())
    tensor = image_to_tensor(image)
    assert tensor.shape == (3, IMAGE_SIZE, IMAGE_SIZE)
    assert float(tensor.min()) >= -1.0 and float(tensor.max()) <= 1.0
    assert np.array_equal(tensor_to_image(tensor), image)


def test_generate_is_deterministic():
    a = generate_dataset(16, 0.8, seed=5)
    b = generate_dataset(16, 0.8, seed=5)
    assert np.array_equal(a.images, b.images)
    assert a.prompts == b.prompts
    assert np.array_equal(a.emotions, b.emotions)
    assert dataset_hash(a) == dataset_hash(b)


def test_generate_prefix_matches_longer_run():
    short = generate_dataset(8, 0.5, seed=2)
    long = generate_dataset(16, 0.5, seed=2)
    assert np.array_equal(short.images, long.images[:8])


@pytest.mark.parametrize("n,rho", [(7, 0.5), (16, -0.1), (16, 1.5)])
def test_generate_rejects_bad_arguments(n, rho):
    with pytest.raises(DatasetError):
        generate_dataset(n, rho, seed=0)


def test_full_correlation_ties_emotion_to_shape():
    dataset = generate_dataset(64, 1.0, seed=1)
    for spec in dataset.specs:
        assert spec.emotion == SHAPE_EMOTION[spec.shape]


def test_zero_correlation_is_independent():
    specs = [sample_spec(np.random.default_rng([0, i]), 0.0) for i in range(8000)]
    p_value = chi_square_independence([s.shape for s in specs], [s.emotion for s in specs])
    assert p_value > 0.01


def test_class_counts_balanced_at_default_correlation():
    specs = [sample_spec(np.random.default_rng([0, i]), 0.8) for i in range(8000)]
    counts = Counter(s.emotion for s in specs)
    assert set(counts) == set(EMOTION_NAMES)
    for name in EMOTION_NAMES:
        assert abs(counts[name] - 1000) <= 100, name


def test_save_and_load_roundtrip(tmp_path):
    dataset = generate_dataset(8, 0.8, seed=4)
    save_dataset(dataset, str(tmp_path))
    assert (tmp_path / "index.jsonl").exists()
    loaded = load_dataset(str(tmp_path))
    assert dataset_hash(loaded) == dataset_hash(dataset)
    assert loaded.specs == dataset.specs


def test_load_without_index(tmp_path):
    with pytest.raises(DatasetError):
        load_dataset(str(tmp_path))


def test_split_is_disjoint_and_seeded():
    dataset = generate_dataset(20, 0.8, seed=0)
    train, holdout = dataset.split(0.25, seed=1)
    assert len(train) == 15 and len(holdout) == 5
    assert not set(train.filenames) & set(holdout.filenames)
    again, _ = dataset.split(0.25, seed=1)
    assert again.filenames == train.filenames


def test_shape_emotion_table_is_pinned():
    assert shape_emotion_checksum() == SHAPE_EMOTION_CHECKSUM
    assert sorted(SHAPE_EMOTION) == sorted(SHAPES)


def test_inherent_emotion_of_prompt():
    assert inherent_emotion_of_prompt("a red heart on dark background at top left") == "sadness"
    assert inherent_emotion_of_prompt("an image of awe") is None


def test_sample_prompts_deterministic():
    assert sample_prompts(5, seed=3) == sample_prompts(5, seed=3)
    assert [p for p, _ in sample_prompts(3, seed=3)] == [p for p, _ in sample_prompts(5, seed=3)[:3]]


def test_shape_prompts_name_one_shape():
    prompts = shape_prompts("circle", 12, seed=5)
    assert len(prompts) == 12
    assert all(inherent_emotion_of_prompt(p) == "contentment" for p in prompts)
    assert all(tokenize(p) for p in prompts)
    assert prompts == shape_prompts("circle", 12, seed=5)
    with pytest.raises(VocabularyError):
        shape_prompts("zebra", 3, seed=0)


@pytest.mark.parametrize("entry", json.loads(GOLDEN_GLYPHS.read_text())["glyphs"], ids=lambda e: e["spec"]["shape"])
def test_canonical_glyph_goldens(entry):
    image = render_glyph(GlyphSpec(**entry["spec"]))
    assert image.shape == (IMAGE_SIZE, IMAGE_SIZE, 3)
    for pixel in entry["pixels"]:
        row, col = pixel["at"]
        assert image[row, col].tolist() == pixel["rgb"], pixel
    if entry["sha256"] is not None:
        assert hashlib.sha256(image.tobytes()).hexdigest() == entry["sha256"]


def test_canonical_goldens_cover_every_shape_and_emotion():
    specs = [GlyphSpec(**entry["spec"]) for entry in json.loads(GOLDEN_GLYPHS.read_text())["glyphs"]]
    assert sorted(spec.shape for spec in specs) == sorted(SHAPES)
    assert sorted(spec.emotion for spec in specs) == sorted(EMOTION_NAMES)
