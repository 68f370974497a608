from pydantic import ValidationError
from pydantic_settings import BaseSettings
from typing import Any, Dict, Optional
from pathlib import Path
import hashlib
import json
import logging

from app.exceptions import ConfigError
from app.schemas.run_config import RunConfig

logger = logging.getLogger(__name__)


class Settings(BaseSettings):
    # Application Settings
    app_name: str = "Emotive Glyph Guided Diffusion"
    app_version: str = "1.0.0"
    debug: bool = False
    log_level: str = "INFO"
    show_progress: bool = True

    # Compute
    device: str = "cpu"
    # One intra-op thread keeps every artifact byte-reproducible
    num_threads: int = 1

    # Default locations
    data_dir: str = "./data/glyphs"
    models_dir: str = "./models"
    output_dir: str = "./outputs"

    # Run config file picked up when no --config flag is given
    run_config_path: str = "./run_config.json"

    class Config:
        env_file = ".env"
        case_sensitive = False


# Global settings instance
settings = Settings()


def _apply_override(payload: Dict[str, Any], dotted_key: str, value: Any) -> None:
    section = payload
    parts = dotted_key.split(".")
    for part in parts[:-1]:
        section = section.setdefault(part, {})
        if not isinstance(section, dict):
            raise ConfigError(f"Cannot override '{dotted_key}': '{part}' is not a section")
    section[parts[-1]] = value


def load_run_config(path: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """Load a RunConfig from JSON; dotted `overrides` (flags) win over file values."""
    payload: Dict[str, Any] = {}
    if path:
        config_file = Path(path)
        if not config_file.exists():
            raise ConfigError(f"Config file not found: {path}")
        try:
            payload = json.loads(config_file.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"Config file {path} is not valid JSON: {e}")

    for key, value in (overrides or {}).items():
        if value is not None:
            _apply_override(payload, key, value)

    try:
        return RunConfig.model_validate(payload)
    except ValidationError as e:
        raise ConfigError(f"Invalid run config: {e}", details={"errors": json.loads(e.json())})


def dump_run_config(config: RunConfig) -> str:
    return json.dumps(config.model_dump(mode="json"), indent=2, sort_keys=True)


def config_hash(config: RunConfig) -> str:
    return hashlib.sha256(dump_run_config(config).encode("utf-8")).hexdigest()[:16]


def write_resolved_config(config: RunConfig, artifact_path: str) -> Path:
    """Write the fully resolved config next to an artifact as `<stem>.config.json`."""
    artifact = Path(artifact_path)
    if artifact.suffix:
        target = artifact.with_name(f"{artifact.stem}.config.json")
    else:
        target = artifact / "resolved.config.json"
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_text(dump_run_config(config) + "\n")
    logger.debug(f"Resolved config written to {target}")
    return target
