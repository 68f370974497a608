import json

import pytest

from app.exceptions import WheelError
from app.schemas.emotion import Polarity
from app.services.emotion_space import (
    DEFAULT_WHEEL_CHECKSUM,
    DEFAULT_WHEEL_ORDER,
    EMOTIONS,
    EmotionWheel,
    default_wheel,
    emotion,
    polarity,
    similar_emotions,
)


def _names(labels):
    return {label.name for label in labels}


def test_eight_labels_split_evenly_by_polarity():
    assert [label.id for label in EMOTIONS] == list(range(8))
    positives = [label for label in EMOTIONS if label.polarity == Polarity.POSITIVE]
    negatives = [label for label in EMOTIONS if label.polarity == Polarity.NEGATIVE]
    assert len(positives) == 4 and len(negatives) == 4


@pytest.mark.parametrize(
    "name,expected",
    [("awe", Polarity.POSITIVE), ("amusement", Polarity.POSITIVE), ("fear", Polarity.NEGATIVE), ("sadness", Polarity.NEGATIVE)],
)
def test_polarity(name, expected):
    assert polarity(name) == expected


def test_emotion_lookup_by_id_name_and_label():
    label = emotion("Disgust")
    assert label.id == 5
    assert emotion(5) is label
    assert emotion(label) is label


@pytest.mark.parametrize("key", [8, -1, "joy"])
def test_emotion_lookup_rejects_unknown(key):
    with pytest.raises(WheelError):
        emotion(key)


def test_default_wheel_neighbours():
    wheel = default_wheel()
    assert "disgust" in _names(similar_emotions(wheel, "sadness"))
    for label in EMOTIONS:
        neighbours = similar_emotions(wheel, label)
        assert len(neighbours) == 2
        assert label not in neighbours
        for other in neighbours:
            assert label in similar_emotions(wheel, other)


def test_default_wheel_checksum_is_pinned():
    assert EmotionWheel.default().checksum() == DEFAULT_WHEEL_CHECKSUM


@pytest.mark.parametrize(
    "order",
    [
        DEFAULT_WHEEL_ORDER[:7],
        DEFAULT_WHEEL_ORDER[:7] + ["amusement"],
        DEFAULT_WHEEL_ORDER + ["amusement"],
    ],
)
def test_invalid_wheel_rejected(order):
    with pytest.raises(WheelError):
        EmotionWheel(order)


def test_wheel_from_file(tmp_path):
    order = list(reversed(DEFAULT_WHEEL_ORDER))
    path = tmp_path / "wheel.json"
    path.write_text(json.dumps({"version": 1, "order": order}))
    wheel = EmotionWheel.from_file(str(path))
    assert [label.name for label in wheel.order] == order
    assert _names(wheel.neighbours("sadness")) == {"contentment", "disgust"}


@pytest.mark.parametrize(
    "payload",
    [
        {"version": 2, "order": DEFAULT_WHEEL_ORDER},
        {"version": 1, "order": DEFAULT_WHEEL_ORDER, "extra": True},
        {"version": 1, "order": DEFAULT_WHEEL_ORDER[:-1] + ["joy"]},
    ],
)
def test_wheel_from_file_rejects_bad_config(tmp_path, payload):
    path = tmp_path / "wheel.json"
    path.write_text(json.dumps(payload))
    with pytest.raises(WheelError):
        EmotionWheel.from_file(str(path))


def test_wheel_from_missing_file(tmp_path):
    with pytest.raises(WheelError):
        EmotionWheel.from_file(str(tmp_path / "missing.json"))
