from pydantic import BaseModel, Field
from typing import List, Literal
from enum import Enum


EmotionName = Literal[
    "amusement", "awe", "contentment", "excitement",
    "anger", "disgust", "fear", "sadness",
]


class Polarity(str, Enum):
    POSITIVE = "positive"
    NEGATIVE = "negative"


class EmotionLabel(BaseModel):
    id: int = Field(ge=0, le=7)
    name: EmotionName
    polarity: Polarity

    class Config:
        frozen = True


class WheelConfig(BaseModel):
    """Cyclic order of the eight emotions; neighbours in the list are adjacent."""
    version: int = 1
    order: List[EmotionName]

    class Config:
        extra = "forbid"
