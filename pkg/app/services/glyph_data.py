"""Procedural emotive glyphs.

Content (shape, colour, background, grid cell) is what prompts describe.
Emotion is carried only by an accent palette: a background motif and a frame
drawn in the emotion's accent colour. Prompts never mention the emotion.
"""
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, get_args
from pathlib import Path
import hashlib
import logging

import numpy as np
import torch
from PIL import Image
from scipy import stats

from app.exceptions import DatasetError, VocabularyError
from app.schemas.glyph import (
    Background, Column, GlyphSpec, IndexRecord, PromptTokens, Row, Shape, ShapeColor,
)
from app.services.emotion_space import EMOTION_NAMES, NUM_EMOTIONS, emotion

logger = logging.getLogger(__name__)

IMAGE_SIZE = 32

SHAPES: List[str] = list(get_args(Shape))
SHAPE_COLORS: List[str] = list(get_args(ShapeColor))
BACKGROUNDS: List[str] = list(get_args(Background))
ROWS: List[str] = list(get_args(Row))
COLUMNS: List[str] = list(get_args(Column))

# Canonical shape -> emotion table (inherent emotion of each shape). Fixed across versions.
SHAPE_EMOTION: Dict[str, str] = {
    "circle": "contentment",
    "square": "awe",
    "triangle": "anger",
    "star": "excitement",
    "diamond": "amusement",
    "cross": "fear",
    "heart": "sadness",
    "ring": "disgust",
}
SHAPE_EMOTION_CHECKSUM = "72fbf338e8f1d483e9a0b0ca9fcbe7de9c12440090dfa62bdd6490060c6fc299"

COLOR_RGB: Dict[str, Tuple[int, int, int]] = {
    "red": (230, 50, 40),
    "orange": (245, 140, 30),
    "yellow": (240, 220, 40),
    "green": (50, 180, 70),
    "blue": (40, 90, 230),
    "purple": (140, 60, 190),
    "white": (250, 250, 250),
    "black": (10, 10, 10),
}
BACKGROUND_RGB: Dict[str, Tuple[int, int, int]] = {
    "dark": (30, 30, 40),
    "light": (225, 225, 215),
    "gray": (128, 128, 128),
    "blue": (40, 70, 150),
    "green": (40, 120, 60),
}
EMOTION_ACCENT_RGB: Dict[str, Tuple[int, int, int]] = {
    "amusement": (255, 170, 0),
    "awe": (150, 80, 255),
    "contentment": (120, 220, 120),
    "excitement": (255, 40, 200),
    "anger": (220, 20, 20),
    "disgust": (130, 140, 0),
    "fear": (90, 0, 120),
    "sadness": (60, 110, 200),
}
MOTIF_ALPHA = 0.5
FRAME_WIDTH = 2
SHAPE_RADIUS = 4.5


# ---------------------------------------------------------------------------
# Vocabulary and tokenizer

PAD_TOKEN = "<pad>"
FUNCTION_WORDS = ["a", "an", "image", "of", "on", "background", "at"]
PROMPT_TEMPLATE_NO_CONTENT = "an image of {emotion}"


def _build_vocabulary() -> List[str]:
    words = [PAD_TOKEN]
    for group in (FUNCTION_WORDS, SHAPES, SHAPE_COLORS, BACKGROUNDS, ROWS, COLUMNS, EMOTION_NAMES):
        for word in group:
            if word not in words:
                words.append(word)
    return words


class Tokenizer:
    """Closed-vocabulary whitespace tokenizer; id 0 is padding."""

    def __init__(self):
        self.vocabulary = _build_vocabulary()
        self.word_to_id = {word: i for i, word in enumerate(self.vocabulary)}
        self.emotion_words = set(EMOTION_NAMES)

    @property
    def vocab_size(self) -> int:
        return len(self.vocabulary)

    def tokenize(self, prompt: str, allow_emotion_words: bool = False) -> PromptTokens:
        words = prompt.lower().split()
        unknown = [
            w for w in words
            if w not in self.word_to_id or w == PAD_TOKEN
            or (w in self.emotion_words and not allow_emotion_words)
        ]
        if unknown:
            raise VocabularyError(unknown)
        return PromptTokens(ids=[self.word_to_id[w] for w in words])

    def detokenize(self, tokens: PromptTokens) -> str:
        try:
            return " ".join(self.vocabulary[i] for i in tokens.ids if i != 0)
        except IndexError:
            raise VocabularyError([str(i) for i in tokens.ids if not 0 <= i < self.vocab_size])

    def pad(self, tokens: PromptTokens, max_len: int) -> List[int]:
        if len(tokens.ids) > max_len:
            raise DatasetError(f"Prompt has {len(tokens.ids)} tokens, limit is {max_len}")
        return list(tokens.ids) + [0] * (max_len - len(tokens.ids))

    def batch(self, prompts: Sequence[str], max_len: int, allow_emotion_words: bool = False) -> torch.Tensor:
        rows = [self.pad(self.tokenize(p, allow_emotion_words), max_len) for p in prompts]
        return torch.tensor(rows, dtype=torch.long)


# Global tokenizer instance
tokenizer = Tokenizer()


def tokenize(prompt: str) -> PromptTokens:
    return tokenizer.tokenize(prompt)


def detokenize(tokens: PromptTokens) -> str:
    return tokenizer.detokenize(tokens)


def prompt_for_spec(spec: GlyphSpec) -> str:
    article = "an" if spec.color[0] in "aeiou" else "a"
    return f"{article} {spec.color} {spec.shape} on {spec.background} background at {spec.row} {spec.column}"


def emotion_only_prompt(target) -> str:
    return PROMPT_TEMPLATE_NO_CONTENT.format(emotion=emotion(target).name)


def shape_emotion_checksum() -> str:
    text = "|".join(f"{shape}:{SHAPE_EMOTION[shape]}" for shape in SHAPES)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


# ---------------------------------------------------------------------------
# Rendering

_GRID_II, _GRID_JJ = np.meshgrid(np.arange(IMAGE_SIZE), np.arange(IMAGE_SIZE), indexing="ij")


def _motif_mask(name: str) -> np.ndarray:
    ii, jj = _GRID_II, _GRID_JJ
    if name == "amusement":
        return (ii % 4 == 1) & (jj % 4 == 1)
    if name == "awe":
        return jj % 4 < 2
    if name == "contentment":
        return ii % 4 < 2
    if name == "excitement":
        return ((ii // 2) + (jj // 2)) % 2 == 0
    if name == "anger":
        return (ii + jj) % 4 < 2
    if name == "disgust":
        return (ii - jj) % 4 < 2
    if name == "fear":
        return (ii % 6 == 0) | (jj % 6 == 0)
    if name == "sadness":
        return (ii + np.round(2 * np.sin(jj / 3.0)).astype(int)) % 6 < 2
    raise DatasetError(f"No motif for emotion '{name}'")


def _shape_mask(shape: str, cy: float, cx: float, r: float = SHAPE_RADIUS) -> np.ndarray:
    dy = _GRID_II - cy
    dx = _GRID_JJ - cx
    dist = np.sqrt(dx ** 2 + dy ** 2)
    if shape == "circle":
        return dist <= r
    if shape == "square":
        return (np.abs(dx) <= 0.8 * r) & (np.abs(dy) <= 0.8 * r)
    if shape == "triangle":
        return (dy <= 0.8 * r) & (dy >= -r) & (np.abs(dx) <= 0.55 * (dy + r))
    if shape == "star":
        theta = np.arctan2(dy, dx)
        return dist <= r * (0.55 + 0.45 * np.cos(5 * theta + np.pi / 2))
    if shape == "diamond":
        return np.abs(dx) + np.abs(dy) <= r
    if shape == "cross":
        arm = 0.35 * r
        return ((np.abs(dx) <= arm) & (np.abs(dy) <= r)) | ((np.abs(dy) <= arm) & (np.abs(dx) <= r))
    if shape == "heart":
        x = dx / r * 1.2
        y = -dy / r * 1.2 + 0.3
        return (x ** 2 + y ** 2 - 1) ** 3 - x ** 2 * y ** 3 <= 0
    if shape == "ring":
        return (dist <= r) & (dist >= 0.5 * r)
    raise DatasetError(f"Unknown shape '{shape}'")


def render_glyph(spec: GlyphSpec) -> np.ndarray:
    """Render a spec to a (32, 32, 3) uint8 image. Pure function of the spec."""
    rng = np.random.default_rng(spec.jitter_seed)
    offset_y, offset_x = rng.integers(-1, 2, size=2)

    canvas = np.empty((IMAGE_SIZE, IMAGE_SIZE, 3), dtype=np.float64)
    canvas[:] = BACKGROUND_RGB[spec.background]

    accent = np.array(EMOTION_ACCENT_RGB[spec.emotion], dtype=np.float64)
    motif = _motif_mask(spec.emotion)
    canvas[motif] = (1 - MOTIF_ALPHA) * canvas[motif] + MOTIF_ALPHA * accent

    frame = np.zeros((IMAGE_SIZE, IMAGE_SIZE), dtype=bool)
    frame[:FRAME_WIDTH, :] = frame[-FRAME_WIDTH:, :] = True
    frame[:, :FRAME_WIDTH] = frame[:, -FRAME_WIDTH:] = True
    canvas[frame] = accent

    cell = (IMAGE_SIZE - 2 * FRAME_WIDTH) / 3.0
    cy = FRAME_WIDTH + cell * (ROWS.index(spec.row) + 0.5) - 0.5 + offset_y
    cx = FRAME_WIDTH + cell * (COLUMNS.index(spec.column) + 0.5) - 0.5 + offset_x
    canvas[_shape_mask(spec.shape, cy, cx)] = COLOR_RGB[spec.color]

    return np.clip(np.round(canvas), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# Image conversions

def image_to_tensor(image: np.ndarray) -> torch.Tensor:
    """(H, W, 3) uint8 -> (3, H, W) float32 in [-1, 1]."""
    return torch.from_numpy(image.astype(np.float32) / 127.5 - 1.0).permute(2, 0, 1).contiguous()


def images_to_tensor(images: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(images.astype(np.float32) / 127.5 - 1.0).permute(0, 3, 1, 2).contiguous()


def tensor_to_image(tensor: torch.Tensor) -> np.ndarray:
    """(3, H, W) float in [-1, 1] -> (H, W, 3) uint8."""
    array = tensor.detach().to(torch.float32).clamp(-1.0, 1.0).permute(1, 2, 0).cpu().numpy()
    return np.clip(np.round((array + 1.0) * 127.5), 0, 255).astype(np.uint8)


def save_png(image: np.ndarray, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.ascontiguousarray(image, dtype=np.uint8)).save(path, format="PNG")


def load_png(path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"), dtype=np.uint8).copy()


# ---------------------------------------------------------------------------
# Datasets

@dataclass
class GlyphDataset:
    images: np.ndarray  # (N, 32, 32, 3) uint8
    prompts: List[str]
    emotions: np.ndarray  # (N,) int64
    specs: List[Optional[GlyphSpec]] = field(default_factory=list)
    filenames: List[str] = field(default_factory=list)

    def __post_init__(self):
        n = len(self.images)
        if n == 0:
            raise DatasetError("Dataset is empty")
        if len(self.prompts) != n or len(self.emotions) != n:
            raise DatasetError("Images, prompts and emotions must have equal length")
        if not self.specs:
            self.specs = [None] * n
        if not self.filenames:
            self.filenames = [f"{i:06d}.png" for i in range(n)]

    def __len__(self) -> int:
        return len(self.images)

    def image_tensor(self) -> torch.Tensor:
        return images_to_tensor(self.images)

    def token_tensor(self, max_len: int) -> torch.Tensor:
        return tokenizer.batch(self.prompts, max_len)

    def label_tensor(self) -> torch.Tensor:
        return torch.as_tensor(self.emotions, dtype=torch.long)

    def subset(self, indices: Sequence[int]) -> "GlyphDataset":
        indices = list(indices)
        return GlyphDataset(
            images=self.images[indices],
            prompts=[self.prompts[i] for i in indices],
            emotions=self.emotions[indices],
            specs=[self.specs[i] for i in indices],
            filenames=[self.filenames[i] for i in indices],
        )

    def split(self, holdout_fraction: float, seed: int) -> Tuple["GlyphDataset", "GlyphDataset"]:
        order = np.random.default_rng(seed).permutation(len(self))
        n_holdout = max(1, int(round(len(self) * holdout_fraction)))
        if n_holdout >= len(self):
            raise DatasetError(f"Holdout fraction {holdout_fraction} leaves no training samples")
        return self.subset(sorted(order[n_holdout:])), self.subset(sorted(order[:n_holdout]))


def sample_spec(rng: np.random.Generator, rho: float) -> GlyphSpec:
    shape = SHAPES[rng.integers(len(SHAPES))]
    color = SHAPE_COLORS[rng.integers(len(SHAPE_COLORS))]
    background = BACKGROUNDS[rng.integers(len(BACKGROUNDS))]
    row = ROWS[rng.integers(len(ROWS))]
    column = COLUMNS[rng.integers(len(COLUMNS))]
    if rng.random() < rho:
        emotion_name = SHAPE_EMOTION[shape]
    else:
        emotion_name = EMOTION_NAMES[rng.integers(NUM_EMOTIONS)]
    jitter_seed = int(rng.integers(2 ** 31 - 1))
    return GlyphSpec(
        shape=shape, color=color, background=background, row=row, column=column,
        emotion=emotion_name, jitter_seed=jitter_seed,
    )


def generate_dataset(n: int, rho: float, seed: int) -> GlyphDataset:
    """n glyphs; with probability rho a glyph's emotion is its shape's canonical one.

    Sample i draws from its own generator seeded by (seed, i), so any partition of
    the index range generates identical samples.
    """
    if n < 8:
        raise DatasetError(f"Need n >= 8, got {n}")
    if not 0.0 <= rho <= 1.0:
        raise DatasetError(f"rho must be in [0, 1], got {rho}")

    specs = [sample_spec(np.random.default_rng([seed, i]), rho) for i in range(n)]
    images = np.stack([render_glyph(spec) for spec in specs])
    prompts = [prompt_for_spec(spec) for spec in specs]
    emotions = np.array([emotion(spec.emotion).id for spec in specs], dtype=np.int64)
    logger.info(f"Generated {n} glyphs (rho={rho}, seed={seed})")
    return GlyphDataset(images=images, prompts=prompts, emotions=emotions, specs=specs)


def sample_prompts(n: int, seed: int) -> List[Tuple[str, GlyphSpec]]:
    """Neutral evaluation prompts with the spec they were drawn from."""
    rng = np.random.default_rng([seed, 7919])
    out = []
    for _ in range(n):
        spec = sample_spec(rng, rho=1.0)
        out.append((prompt_for_spec(spec), spec))
    return out


def shape_prompts(shape: str, n: int, seed: int) -> List[str]:
    """Neutral prompts that all name one shape; the rest of each spec follows `sample_prompts`."""
    if shape not in SHAPE_EMOTION:
        raise VocabularyError([shape])
    return [prompt_for_spec(spec.model_copy(update={"shape": shape})) for _, spec in sample_prompts(n, seed)]


def inherent_emotion_of_prompt(prompt: str) -> Optional[str]:
    """Canonical emotion of the shape a prompt names, if any."""
    for word in prompt.split():
        if word in SHAPE_EMOTION:
            return SHAPE_EMOTION[word]
    return None


def dataset_hash(dataset: GlyphDataset) -> str:
    digest = hashlib.sha256()
    digest.update(np.ascontiguousarray(dataset.images).tobytes())
    digest.update(np.ascontiguousarray(dataset.emotions).astype(np.int64).tobytes())
    digest.update("\n".join(dataset.prompts).encode("utf-8"))
    return digest.hexdigest()


def save_dataset(dataset: GlyphDataset, out_dir: str) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = []
    for i in range(len(dataset)):
        filename = dataset.filenames[i]
        save_png(dataset.images[i], out / filename)
        label = emotion(int(dataset.emotions[i]))
        record = IndexRecord(
            filename=filename, prompt=dataset.prompts[i], emotion_id=label.id,
            emotion=label.name, spec=dataset.specs[i],
        )
        lines.append(record.model_dump_json())
    (out / "index.jsonl").write_text("\n".join(lines) + "\n")
    logger.info(f"Saved {len(dataset)} samples to {out}")
    return out


def read_index(directory: str) -> List[IndexRecord]:
    index_path = Path(directory) / "index.jsonl"
    if not index_path.exists():
        raise DatasetError(f"No index.jsonl in {directory}")
    records = []
    for line_no, line in enumerate(index_path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            records.append(IndexRecord.model_validate_json(line))
        except ValueError as e:
            raise DatasetError(f"{index_path}:{line_no}: invalid record: {e}")
    if not records:
        raise DatasetError(f"Index {index_path} has no records")
    return records


def load_dataset(directory: str) -> GlyphDataset:
    """Load images listed in index.jsonl; the index is the source of truth."""
    records = read_index(directory)
    try:
        images = np.stack([load_png(Path(directory) / r.filename) for r in records])
    except OSError as e:
        logger.error(f"Error reading images from {directory}: {e}")
        raise DatasetError(f"Could not read dataset images in {directory}: {e}")
    return GlyphDataset(
        images=images,
        prompts=[r.prompt for r in records],
        emotions=np.array([r.emotion_id for r in records], dtype=np.int64),
        specs=[r.spec for r in records],
        filenames=[r.filename for r in records],
    )


def chi_square_independence(first: Sequence[int], second: Sequence[int]) -> float:
    """p-value of a chi-square independence test between two categorical columns."""
    first_values = sorted(set(first))
    second_values = sorted(set(second))
    table = np.zeros((len(first_values), len(second_values)), dtype=np.int64)
    for a, b in zip(first, second):
        table[first_values.index(a), second_values.index(b)] += 1
    _, p_value, _, _ = stats.chi2_contingency(table)
    return float(p_value)
