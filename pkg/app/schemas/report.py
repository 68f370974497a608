from pydantic import BaseModel, Field
from typing import List, Optional
from pathlib import Path

import pandas as pd


class EvalRow(BaseModel):
    condition: str
    samples: int = Field(gt=0)
    accuracy_guide: float = Field(ge=0.0, le=1.0)
    accuracy_agnostic: float = Field(ge=0.0, le=1.0)
    accuracy_reduced: Optional[float] = Field(default=None, ge=0.0, le=1.0)
    frechet_distance: Optional[float] = Field(default=None, ge=0.0)
    semantic_score: float
    intra_class_variance: Optional[float] = None
    # Derived metrics (not from any reference table)
    similar_confusion_rate: Optional[float] = None
    inherent_capture_rate: Optional[float] = None
    eta: Optional[float] = None


class EvalReport(BaseModel):
    title: str
    config_hash: str
    rows: List[EvalRow] = []
    notes: List[str] = []

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame([row.model_dump() for row in self.rows], columns=list(EvalRow.model_fields))
        frame["config_hash"] = self.config_hash
        return frame

    def write_csv(self, path) -> Path:
        target = Path(path)
        target.parent.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_csv(target, index=False, float_format="%.6f")
        return target

    def render_summary(self) -> str:
        columns = ["condition", "samples", "accuracy_guide", "accuracy_agnostic", "accuracy_reduced",
                   "frechet_distance", "semantic_score", "intra_class_variance"]
        frame = self.to_frame()[columns].rename(columns={
            "accuracy_guide": "acc_guide",
            "accuracy_agnostic": "acc_agnostic",
            "accuracy_reduced": "acc_reduced",
            "frechet_distance": "FD (toy)",
            "semantic_score": "semantic",
            "intra_class_variance": "variance",
        })
        lines = [f"{self.title} [config {self.config_hash}]", frame.to_string(index=False, float_format="%.4f")]
        lines.extend(f"note: {note}" for note in self.notes)
        return "\n".join(lines)


class TrendStatistics(BaseModel):
    accuracy_vs_eta: float
    semantic_vs_eta: float
    accuracy_gap: float  # always-open minus never-open


class SweepResult(BaseModel):
    report: EvalReport
    trend: TrendStatistics
