#!/usr/bin/env python3
"""
Reference run: train the toy stack, calibrate eta and freeze the acceptance bounds.

Writes tests/bounds/*.json, tests/golden/glyphs.json and tests/golden/eval.csv.
Re-running it recalibrates every bound, so commit its output only on purpose.
"""
import dataclasses
import hashlib
import json
import os
import shutil
import sys
import tempfile
from pathlib import Path
from typing import Tuple

# Add the parent directory to path to import app modules
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import torch

from app.config import dump_run_config, load_run_config
from app.main import main as cli_main
from app.models.checkpoints import BUNDLE_FILES, ModelBundle, save_bundle, save_checkpoint
from app.schemas.glyph import GlyphSpec
from app.services.eval_harness import (
    ablate_losses,
    baseline_comparison,
    captured_inherent,
    conditioning_gap,
    evaluate_editing,
    sweep_eta,
)
from app.services.glyph_data import (
    GlyphDataset,
    generate_dataset,
    render_glyph,
    sample_prompts,
    save_dataset,
    shape_prompts,
)
from app.services.muse_synthesis import calibrate_eta
from app.services.trainer import trainer_service

ROOT = Path(__file__).resolve().parent.parent
WORKDIR = ROOT / "artifacts" / "reference"
BOUNDS = ROOT / "tests" / "bounds"
GOLDEN = ROOT / "tests" / "golden"

SWEEP_GRID = [float("-inf"), 5.0, 10.0, 13.0, float("inf")]
EDIT_HOLDOUT = 50
# Frozen bound = measured value widened by these margins
MSE_MARGIN = 1.5
SEMANTIC_MARGIN = 0.05
GAP_MARGIN = 1.5
INHERENT_PROMPTS = 100
DROPOUT_ONE_EPOCHS = 5
CONDITIONING_PROMPTS = 32
OWN_EMOTION_HOLDOUT = 20


def _write_json(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2) + "\n")
    print(f"Wrote {path.relative_to(ROOT)}")


def train_stack(config, data_dir: Path, models_dir: Path) -> Tuple[ModelBundle, GlyphDataset]:
    """Generate the training set and train all five models."""
    dataset = generate_dataset(config.data.n, config.data.rho, config.data.seed)
    save_dataset(dataset, str(data_dir))
    seed = config.seed

    bundle = ModelBundle(
        denoiser=trainer_service.train_denoiser(dataset, config, seed),
        guide=trainer_service.train_classifier(dataset, "guide", seed, config),
        agnostic=trainer_service.train_classifier(dataset, "agnostic", seed, config),
        embedder=trainer_service.train_embedder(dataset, config, seed),
        reduced=trainer_service.train_classifier(
            dataset, "guide", seed, config, config.classifier.reduced_fraction
        ),
    ).frozen()
    save_bundle(bundle, str(models_dir))
    print(f"Trained stack saved to {models_dir}")
    return bundle, dataset


def measure_inherent(config, models: ModelBundle) -> None:
    """Denoiser trained at rho=1, so every circle carries the contentment accent."""
    dataset = generate_dataset(config.data.n, 1.0, config.data.seed)
    denoiser = trainer_service.train_denoiser(dataset, config, config.seed)
    path = WORKDIR / "models_rho1" / BUNDLE_FILES["denoiser"]
    save_checkpoint(denoiser, str(path))
    stack = dataclasses.replace(models, denoiser=denoiser).frozen()

    prompts = shape_prompts("circle", INHERENT_PROMPTS, config.data.seed)
    # Median s_clip opens the gate around mid-trajectory on most runs
    eta = calibrate_eta(prompts[:16], stack, config, seeds=range(2), percentile=50.0)
    tuned = config.model_copy(update={"guidance": config.guidance.model_copy(update={"eta": eta})})
    captured = captured_inherent(stack, tuned, prompts, "fear")
    opened = [name for name in captured if name is not None]
    _write_json(BOUNDS / "inherent.json", {
        "denoiser": str(path.relative_to(ROOT)), "eta": eta, "prompts": INHERENT_PROMPTS, "target": "fear",
        "min_rate": 0.8, "min_opened": 0.5,
        "measured_opened": len(opened) / len(captured),
        "measured_rate": (sum(name == "contentment" for name in opened) / len(opened)) if opened else None,
    })


def measure_conditioning(config, models: ModelBundle, dataset: GlyphDataset) -> None:
    """Conditioning gap of a denoiser that never saw a prompt, next to the reference denoiser's."""
    never_conditioned = config.model_copy(update={"denoiser": config.denoiser.model_copy(update={
        "cond_dropout": 1.0, "epochs": DROPOUT_ONE_EPOCHS, "loss_ceiling": None,
    })})
    denoiser = trainer_service.train_denoiser(dataset, never_conditioned, config.seed)
    prompts = [prompt for prompt, _ in sample_prompts(CONDITIONING_PROMPTS, config.data.seed)]
    gap = conditioning_gap(dataclasses.replace(models, denoiser=denoiser).frozen(), config, prompts)
    _write_json(BOUNDS / "conditioning.json", {
        "epochs": DROPOUT_ONE_EPOCHS, "prompts": CONDITIONING_PROMPTS,
        "max_gap": gap * GAP_MARGIN, "measured_gap": gap,
        "reference_gap": conditioning_gap(models, config, prompts),
    })


def freeze_glyph_goldens() -> None:
    """Pin the full-image hash of each canonical glyph; the pixel checks stay as written."""
    path = GOLDEN / "glyphs.json"
    goldens = json.loads(path.read_text())
    for entry in goldens["glyphs"]:
        image = render_glyph(GlyphSpec(**entry["spec"]))
        entry["sha256"] = hashlib.sha256(image.tobytes()).hexdigest()
    _write_json(path, goldens)


def freeze_eval_golden(config_path: Path, models_dir: Path) -> None:
    """CLI gen-set then eval; the acceptance suite replays this and compares bytes."""
    with tempfile.TemporaryDirectory() as tmp:
        out_set = Path(tmp) / "set"
        out_csv = Path(tmp) / "eval.csv"
        common = ["--config", str(config_path)]
        code = cli_main(common + ["gen-set", "--models", str(models_dir), "--emotions", "awe,sadness",
                                  "--n", "2", "--out", str(out_set)])
        code = code or cli_main(common + ["eval", "--models", str(models_dir), "--set", str(out_set),
                                          "--condition", "golden", "--out", str(out_csv)])
        if code:
            raise SystemExit(f"CLI golden run failed with exit code {code}")
        GOLDEN.mkdir(parents=True, exist_ok=True)
        shutil.copyfile(out_csv, GOLDEN / "eval.csv")
        print(f"Wrote {(GOLDEN / 'eval.csv').relative_to(ROOT)}")


def main():
    torch.set_num_threads(1)
    WORKDIR.mkdir(parents=True, exist_ok=True)
    data_dir, models_dir = WORKDIR / "data", WORKDIR / "models"
    config_path = WORKDIR / "run_config.json"

    config = load_run_config(sys.argv[1] if len(sys.argv) > 1 else None)
    models, dataset = train_stack(config, data_dir, models_dir)

    prompts = [prompt for prompt, _ in sample_prompts(32, config.data.seed)]
    eta = calibrate_eta(prompts, models, config, seeds=range(2))
    config = config.model_copy(update={"guidance": config.guidance.model_copy(update={"eta": eta})})
    config_path.write_text(dump_run_config(config) + "\n")
    print(f"Calibrated eta={eta:.4f}")

    _write_json(BOUNDS / "reference.json", {
        "models_dir": str(models_dir.relative_to(ROOT)),
        "run_config": str(config_path.relative_to(ROOT)),
        "data_dir": str(data_dir.relative_to(ROOT)),
    })

    baseline = baseline_comparison(models, config, seeds=range(25))
    rows = {row.condition: row for row in baseline.rows}
    _write_json(BOUNDS / "control_gap.json", {
        "min_gap": 0.30, "chance": 0.125, "chance_tolerance": 0.10,
        "measured_unguided": rows["vanilla CFG"].accuracy_agnostic,
        "measured_guided": rows["emotional tokens"].accuracy_agnostic,
    })

    sweep = sweep_eta(SWEEP_GRID, models, config, seeds=range(5))
    _write_json(BOUNDS / "sweep.json", {
        "grid": [str(e) for e in SWEEP_GRID], "seeds": 5, "min_gap": 0.30,
        "measured": sweep.trend.model_dump(),
    })

    ablation = ablate_losses(models, config, seeds=range(25))
    _write_json(BOUNDS / "ablation.json", {
        "seeds": 25,
        "measured": {row.condition: row.model_dump() for row in ablation.rows},
    })

    _, holdout = dataset.split(config.denoiser.holdout_fraction, config.seed)
    sources = holdout.subset(range(min(EDIT_HOLDOUT, len(holdout))))
    editing = evaluate_editing(sources, models, config)
    own = evaluate_editing(sources.subset(range(min(OWN_EMOTION_HOLDOUT, len(sources)))), models, config,
                           targets=sources.emotions[:OWN_EMOTION_HOLDOUT])
    _write_json(BOUNDS / "editing.json", {
        "holdout": EDIT_HOLDOUT, "min_gain": 0.30,
        "mse_bound": editing.reconstruction_mse * MSE_MARGIN,
        "semantic_floor": editing.semantic_score - SEMANTIC_MARGIN,
        "own_emotion_holdout": OWN_EMOTION_HOLDOUT,
        "measured": dataclasses.asdict(editing),
        "measured_own_emotion_mse": own.edited_mse,
    })

    measure_inherent(config, models)
    measure_conditioning(config, models, dataset)

    freeze_glyph_goldens()
    freeze_eval_golden(config_path, models_dir)
    print("Reference run complete")


if __name__ == "__main__":
    main()
