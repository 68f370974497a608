from pydantic import BaseModel, Field
from typing import Any, Dict, List, Optional


class TraceRecord(BaseModel):
    """State of one outer denoising step."""
    step: int
    t: int
    s_clip: float
    gate_open: bool
    inner_iterations: int = 0
    learning_rate: Optional[float] = None
    loss_target: Optional[float] = None
    loss_inherent: Optional[float] = None
    loss_similar: Optional[float] = None
    loss_emo: Optional[float] = None
    inner_losses: List[float] = []
    probabilities: List[float] = Field(min_length=8, max_length=8)


class TraceHeader(BaseModel):
    prompt: str
    target: str
    seed: int
    mode: str  # generate | edit
    sampler: str = "muse"
    config_hash: str = ""
    inherent: Optional[str] = None
    inherent_step: Optional[int] = None
    similar: List[str] = []
    failed: bool = False
    error: Optional[Dict[str, Any]] = None


class SynthesisTrace(BaseModel):
    header: TraceHeader
    records: List[TraceRecord] = []

    @property
    def gate_flags(self) -> List[bool]:
        return [record.gate_open for record in self.records]

    @property
    def opened_at(self) -> Optional[int]:
        for record in self.records:
            if record.gate_open:
                return record.step
        return None
