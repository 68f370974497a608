from typing import Dict, FrozenSet, List, Optional, Sequence
from pathlib import Path
import hashlib
import json
import logging

from pydantic import ValidationError

from app.exceptions import WheelError
from app.schemas.emotion import EmotionLabel, Polarity, WheelConfig

logger = logging.getLogger(__name__)


EMOTIONS: List[EmotionLabel] = [
    EmotionLabel(id=0, name="amusement", polarity=Polarity.POSITIVE),
    EmotionLabel(id=1, name="awe", polarity=Polarity.POSITIVE),
    EmotionLabel(id=2, name="contentment", polarity=Polarity.POSITIVE),
    EmotionLabel(id=3, name="excitement", polarity=Polarity.POSITIVE),
    EmotionLabel(id=4, name="anger", polarity=Polarity.NEGATIVE),
    EmotionLabel(id=5, name="disgust", polarity=Polarity.NEGATIVE),
    EmotionLabel(id=6, name="fear", polarity=Polarity.NEGATIVE),
    EmotionLabel(id=7, name="sadness", polarity=Polarity.NEGATIVE),
]
EMOTION_NAMES: List[str] = [label.name for label in EMOTIONS]
NUM_EMOTIONS = len(EMOTIONS)

# Only disgust-sadness adjacency is attested; the rest of the cycle is a repo choice.
DEFAULT_WHEEL_ORDER = [
    "amusement", "excitement", "awe", "contentment",
    "sadness", "disgust", "anger", "fear",
]
DEFAULT_WHEEL_CHECKSUM = "b91c34297e48d71f6664f4a2af93727011e1dce9fae391dc72083323be2cbe09"


def emotion(key) -> EmotionLabel:
    """Look up a label by id, name, or pass a label through."""
    if isinstance(key, EmotionLabel):
        return key
    if isinstance(key, int):
        if 0 <= key < NUM_EMOTIONS:
            return EMOTIONS[key]
        raise WheelError(f"Emotion id {key} outside 0..{NUM_EMOTIONS - 1}")
    name = str(key).strip().lower()
    for label in EMOTIONS:
        if label.name == name:
            return label
    raise WheelError(f"Unknown emotion '{key}'. Known: {', '.join(EMOTION_NAMES)}")


def polarity(label) -> Polarity:
    return emotion(label).polarity


class EmotionWheel:
    """Cyclic arrangement of the eight emotions; neighbours are 'similar'."""

    def __init__(self, order: Sequence[str]):
        self.order = [emotion(name) for name in order]
        self._validate()
        size = len(self.order)
        self._neighbours: Dict[int, FrozenSet[EmotionLabel]] = {}
        for i, label in enumerate(self.order):
            self._neighbours[label.id] = frozenset(
                {self.order[(i - 1) % size], self.order[(i + 1) % size]}
            )

    def _validate(self) -> None:
        ids = [label.id for label in self.order]
        if len(ids) != NUM_EMOTIONS or sorted(ids) != list(range(NUM_EMOTIONS)):
            raise WheelError(
                f"Wheel must list each of the {NUM_EMOTIONS} emotions exactly once (one 8-cycle), "
                f"got {[label.name for label in self.order]}"
            )

    @classmethod
    def default(cls) -> "EmotionWheel":
        return cls(DEFAULT_WHEEL_ORDER)

    @classmethod
    def from_file(cls, path: str) -> "EmotionWheel":
        try:
            config = WheelConfig.model_validate(json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError, ValidationError) as e:
            logger.error(f"Could not load wheel config {path}: {e}")
            raise WheelError(f"Invalid wheel config {path}: {e}")
        if config.version != 1:
            raise WheelError(f"Unsupported wheel config version {config.version}")
        wheel = cls(config.order)
        logger.info(f"Loaded emotion wheel from {path} (checksum {wheel.checksum()[:12]})")
        return wheel

    def checksum(self) -> str:
        text = ",".join(label.name for label in self.order)
        return hashlib.sha256(text.encode("utf-8")).hexdigest()

    def neighbours(self, label) -> FrozenSet[EmotionLabel]:
        return self._neighbours[emotion(label).id]


_default_wheel: Optional[EmotionWheel] = None


def default_wheel() -> EmotionWheel:
    global _default_wheel
    if _default_wheel is None:
        _default_wheel = EmotionWheel.default()
    return _default_wheel


def similar_emotions(wheel: EmotionWheel, target) -> FrozenSet[EmotionLabel]:
    """Wheel neighbours of `target`; never contains the target itself."""
    return wheel.neighbours(target)
