from typing import Any, Dict, Optional


class MuseError(Exception):
    """Base error; `code` is machine-readable, `exit_code` is what the CLI returns."""

    code = "runtime_failure"
    exit_code = 2

    def __init__(self, message: str, details: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.message = message
        self.details = details or {}

    def to_record(self) -> Dict[str, Any]:
        record = {"error": self.code, "message": self.message, "exit_code": self.exit_code}
        if self.details:
            record["details"] = self.details
        return record


class ConfigError(MuseError):
    code = "config_error"
    exit_code = 1


class ScheduleError(MuseError):
    code = "invalid_schedule"


class ShapeMismatchError(MuseError):
    code = "shape_mismatch"


class NumericDomainError(MuseError):
    code = "numeric_domain"


class VocabularyError(MuseError):
    code = "out_of_vocabulary"

    def __init__(self, words):
        self.words = list(words)
        super().__init__(
            f"Words not in vocabulary: {', '.join(self.words)}",
            details={"words": self.words},
        )


class DatasetError(MuseError):
    code = "dataset_error"


class ProbabilityError(MuseError):
    code = "invalid_probabilities"


class WheelError(MuseError):
    code = "invalid_wheel"


class CheckpointError(MuseError):
    code = "checkpoint_error"


class ConvergenceError(MuseError):
    """Training finished but missed its loss ceiling or accuracy floor."""

    code = "non_convergence"

    def __init__(self, message: str, model=None, details: Optional[Dict[str, Any]] = None):
        super().__init__(message, details)
        self.model = model


class GuidanceDivergenceError(MuseError):
    code = "guidance_divergence"


class ContractViolationError(MuseError):
    code = "contract_violation"


class MetricError(MuseError):
    code = "metric_error"


class UsageError(ConfigError):
    code = "usage_error"
