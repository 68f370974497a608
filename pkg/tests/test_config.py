import json
import math

import pytest
from pydantic import ValidationError

from app.config import (
    config_hash,
    dump_run_config,
    load_run_config,
    write_resolved_config,
)
from app.exceptions import ConfigError
from app.schemas.run_config import GuidanceConfig, RunConfig


def _write(path, payload) -> str:
    path.write_text(json.dumps(payload))
    return str(path)


def test_defaults_without_file():
    config = load_run_config()
    assert config == RunConfig()
    assert config.guidance.max_inner == 10
    assert config.sampling.num_inference_steps == 50


def test_unknown_key_rejected(tmp_path):
    path = _write(tmp_path / "run.json", {"guidance": {"etaa": 3.0}})
    with pytest.raises(ConfigError) as exc_info:
        load_run_config(path)
    assert exc_info.value.exit_code == 1


def test_unsupported_version_rejected(tmp_path):
    with pytest.raises(ConfigError):
        load_run_config(_write(tmp_path / "run.json", {"version": 2}))


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_run_config(str(tmp_path / "absent.json"))


def test_invalid_json(tmp_path):
    path = tmp_path / "run.json"
    path.write_text("{guidance: ")
    with pytest.raises(ConfigError):
        load_run_config(str(path))


@pytest.mark.parametrize("text,expected", [("inf", math.inf), ("-inf", -math.inf), ("Infinity", math.inf)])
def test_infinite_eta_strings(tmp_path, text, expected):
    config = load_run_config(_write(tmp_path / "run.json", {"guidance": {"eta": text}}))
    assert config.guidance.eta == expected


def test_infinite_eta_roundtrips_through_json(tmp_path):
    config = RunConfig(guidance=GuidanceConfig(eta=-math.inf))
    dumped = dump_run_config(config)
    assert json.loads(dumped)["guidance"]["eta"] == "-inf"
    path = tmp_path / "run.json"
    path.write_text(dumped)
    assert load_run_config(str(path)) == config


def test_overrides_win_over_file(tmp_path):
    path = _write(tmp_path / "run.json", {"seed": 1, "guidance": {"eta": 4.0, "omega": 2.0}})
    config = load_run_config(path, {"guidance.eta": 9.5, "seed": 7, "data.n": None})
    assert config.guidance.eta == 9.5
    assert config.guidance.omega == 2.0
    assert config.seed == 7
    assert config.data.n == 8000


def test_override_into_non_section(tmp_path):
    with pytest.raises(ConfigError):
        load_run_config(None, {"seed.value": 3})


def test_config_hash_tracks_content():
    base = RunConfig()
    assert config_hash(base) == config_hash(RunConfig())
    assert config_hash(base) != config_hash(RunConfig(seed=1))
    assert len(config_hash(base)) == 16


def test_write_resolved_config_naming(tmp_path):
    config = RunConfig(seed=3)
    beside_file = write_resolved_config(config, str(tmp_path / "out" / "sample.png"))
    assert beside_file.name == "sample.config.json"
    in_directory = write_resolved_config(config, str(tmp_path / "set"))
    assert in_directory == tmp_path / "set" / "resolved.config.json"
    assert RunConfig.model_validate(json.loads(beside_file.read_text())) == config


@pytest.mark.parametrize(
    "updates",
    [{"max_inner": 101}, {"max_inner": 0}, {"lambda1": -0.1}, {"loss_stop": 0.0}, {"lr_decay": "cosine"}],
)
def test_guidance_field_ranges(updates):
    with pytest.raises(ValidationError):
        GuidanceConfig(**updates)
