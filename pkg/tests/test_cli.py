import json

import pytest

from app.config import dump_run_config
from app.main import main
from app.models.checkpoints import BUNDLE_FILES, load_checkpoint, save_bundle
from app.services.muse_synthesis import synthesis_service


def _error_record(stderr: str) -> dict:
    records = [json.loads(line) for line in stderr.splitlines() if line.startswith("{")]
    assert records, stderr
    return records[-1]


@pytest.fixture
def workspace(tmp_path, monkeypatch, tiny_bundle, tiny_config):
    """Saved tiny stack plus its run config; the cached service bundle is reset around each test."""
    monkeypatch.chdir(tmp_path)
    models = tmp_path / "models"
    save_bundle(tiny_bundle, str(models))
    config = tmp_path / "run.json"
    config.write_text(dump_run_config(tiny_config))
    monkeypatch.setattr(synthesis_service, "models_dir", None)
    monkeypatch.setattr(synthesis_service, "_bundle", None)
    return tmp_path


def test_missing_subcommand_is_usage_error(capsys):
    assert main([]) == 1
    assert _error_record(capsys.readouterr().err)["error"] == "usage_error"


def test_missing_required_flag_is_usage_error(capsys):
    assert main(["gen", "--prompt", "a red star"]) == 1
    record = _error_record(capsys.readouterr().err)
    assert record["exit_code"] == 1


def test_out_of_vocabulary_prompt_exits_with_error(workspace, capsys):
    code = main([
        "--config", "run.json", "gen", "--models", "models", "--prompt", "a zebra",
        "--emotion", "awe", "--out", "zebra.png",
    ])
    assert code == 2
    record = _error_record(capsys.readouterr().err)
    assert record["error"] == "out_of_vocabulary"
    assert record["details"]["words"] == ["zebra"]


def test_data_gen_writes_index_and_config(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert main(["data", "gen", "--n", "8", "--rho", "0.5", "--seed", "4", "--out", "glyphs"]) == 0
    lines = (tmp_path / "glyphs" / "index.jsonl").read_text().splitlines()
    assert len(lines) == 8
    resolved = json.loads((tmp_path / "glyphs" / "resolved.config.json").read_text())
    assert resolved["data"] == {"n": 8, "rho": 0.5, "seed": 4}


def test_train_reduced_classifier_keeps_guide_architecture(tmp_path, monkeypatch, tiny_config):
    monkeypatch.chdir(tmp_path)
    config = tiny_config.model_copy(update={
        "classifier": tiny_config.classifier.model_copy(update={"epochs": 1, "batch_size": 16}),
    })
    (tmp_path / "run.json").write_text(dump_run_config(config))
    assert main(["data", "gen", "--n", "48", "--rho", "0.8", "--seed", "1", "--out", "glyphs"]) == 0
    assert main(["--config", "run.json", "train", "classifier", "--data", "glyphs", "--models", "models",
                 "--reduced"]) == 0

    model = load_checkpoint(str(tmp_path / "models" / BUNDLE_FILES["reduced"]))
    assert model.metadata.arch_id == "guide"
    assert model.metadata.training["subset_fraction"] == config.classifier.reduced_fraction


def test_gen_is_byte_reproducible(workspace):
    args = ["--config", "run.json", "gen", "--models", "models", "--prompt",
            "a red star on dark background at top left", "--emotion", "awe", "--eta=-inf"]
    assert main(args + ["--out", "first.png"]) == 0
    assert main(args + ["--out", "second.png"]) == 0
    assert (workspace / "first.png").read_bytes() == (workspace / "second.png").read_bytes()
    assert (workspace / "first.trace.jsonl").exists()
    assert (workspace / "first.config.json").exists()


def test_closed_gate_cli_matches_cfg_sampler(workspace):
    common = ["--config", "run.json", "gen", "--models", "models", "--prompt",
              "a blue ring on light background at bottom right", "--emotion", "fear"]
    assert main(common + ["--eta", "inf", "--out", "closed.png"]) == 0
    assert main(common + ["--sampler", "cfg", "--out", "cfg.png"]) == 0
    assert (workspace / "closed.png").read_bytes() == (workspace / "cfg.png").read_bytes()


def test_plot_trace(workspace):
    assert main([
        "--config", "run.json", "gen", "--models", "models", "--emotion-only",
        "--emotion", "sadness", "--eta=-inf", "--out", "sad.png",
    ]) == 0
    assert main(["plot-trace", "--trace", "sad.trace.jsonl", "--out", "sad_plot.png", "--inner"]) == 0
    assert (workspace / "sad_plot.png").stat().st_size > 0
    assert (workspace / "sad_plot_inner.png").stat().st_size > 0
