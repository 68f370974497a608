from pydantic import BaseModel, Field
from typing import List, Literal, Optional

from app.schemas.emotion import EmotionName


Shape = Literal["circle", "square", "triangle", "star", "diamond", "cross", "heart", "ring"]
ShapeColor = Literal["red", "orange", "yellow", "green", "blue", "purple", "white", "black"]
Background = Literal["dark", "light", "gray", "blue", "green"]
Row = Literal["top", "middle", "bottom"]
Column = Literal["left", "center", "right"]


class GlyphSpec(BaseModel):
    shape: Shape
    color: ShapeColor
    background: Background
    row: Row
    column: Column
    emotion: EmotionName
    jitter_seed: int = Field(ge=0)

    class Config:
        frozen = True
        extra = "forbid"


class PromptTokens(BaseModel):
    ids: List[int] = []

    class Config:
        frozen = True

    def __len__(self) -> int:
        return len(self.ids)


class IndexRecord(BaseModel):
    """One line of a dataset or generated-set `index.jsonl`."""
    filename: str
    prompt: str
    emotion_id: int = Field(ge=0, le=7)
    emotion: EmotionName
    spec: Optional[GlyphSpec] = None

    class Config:
        extra = "forbid"
