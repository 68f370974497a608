from pathlib import Path
from typing import Optional
import logging

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from app.exceptions import MuseError  # noqa: E402
from app.schemas.guidance import SynthesisTrace  # noqa: E402
from app.schemas.report import SweepResult  # noqa: E402
from app.services.emotion_space import EMOTION_NAMES  # noqa: E402

logger = logging.getLogger(__name__)


def _save(fig, path) -> Path:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(target, dpi=100)
    plt.close(fig)
    logger.info(f"Plot written to {target}")
    return target


def plot_trace_probabilities(trace: SynthesisTrace, path) -> Path:
    """Per-step classifier probabilities, with the gate opening marked."""
    if not trace.records:
        raise MuseError("Trace has no records to plot")
    steps = [record.step for record in trace.records]
    fig, ax = plt.subplots(figsize=(7, 4))
    for i, name in enumerate(EMOTION_NAMES):
        values = [record.probabilities[i] for record in trace.records]
        width = 2.5 if name == trace.header.target else 1.0
        ax.plot(steps, values, label=name, linewidth=width)
    if trace.opened_at is not None:
        ax.axvline(trace.opened_at, color="gray", linestyle="--", linewidth=1)
    ax.set_xlabel("denoising step")
    ax.set_ylabel("probability")
    ax.set_title(f"target: {trace.header.target}  inherent: {trace.header.inherent or '-'}")
    ax.legend(fontsize=7, ncol=2)
    fig.tight_layout()
    return _save(fig, path)


def plot_inner_losses(trace: SynthesisTrace, path, step: Optional[int] = None) -> Path:
    """L_emo over inner iterations at one step (default: the step the gate opened)."""
    step = trace.opened_at if step is None else step
    record = next((r for r in trace.records if r.step == step), None)
    if record is None or not record.inner_losses:
        raise MuseError(f"No inner-loop losses recorded at step {step}")
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(range(len(record.inner_losses)), record.inner_losses, marker="o")
    ax.set_xlabel("inner iteration")
    ax.set_ylabel("L_emo")
    ax.set_title(f"step {step} (t={record.t})")
    fig.tight_layout()
    return _save(fig, path)


def plot_eta_sweep(result: SweepResult, path) -> Path:
    rows = result.report.rows
    labels = [row.condition for row in rows]
    positions = list(range(len(rows)))
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(positions, [row.accuracy_guide for row in rows], marker="o", label="accuracy (guide)")
    ax.plot(positions, [row.accuracy_agnostic for row in rows], marker="s", label="accuracy (agnostic)")
    ax.set_xticks(positions)
    ax.set_xticklabels(labels, rotation=30, fontsize=8)
    ax.set_ylabel("accuracy")
    twin = ax.twinx()
    twin.plot(positions, [row.semantic_score for row in rows], color="black", linestyle="--", label="semantic")
    twin.set_ylabel("semantic score")
    ax.legend(loc="upper right", fontsize=8)
    ax.set_title(
        f"rank corr: acc {result.trend.accuracy_vs_eta:+.2f}, semantic {result.trend.semantic_vs_eta:+.2f}"
    )
    fig.tight_layout()
    return _save(fig, path)
