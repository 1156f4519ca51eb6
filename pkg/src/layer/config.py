"""Run configuration shared by the command-line subcommands, and the environment it reads."""

import os
from pathlib import Path
from typing import Any, Dict, Optional

from dotenv import load_dotenv
from pydantic import BaseModel, Field, ValidationError

from .cohort import Scenario
from .dataset import MODALITY_SETS
from .errors import ConfigError

MANIFEST_NAME = "manifest.json"

# subcommands that read a cohort / a checkpoint
NEEDS_DATA = {"train", "explain", "faithfulness", "sanity", "associate"}
NEEDS_MODEL = {"explain", "faithfulness", "sanity", "associate"}


def load_environment() -> None:
    """Load .env into the environment unless running in production."""
    if not os.getenv("LAYER_RUNNING_IN_PRODUCTION"):
        load_dotenv(override=False)


def _int_env(name: str, default: int) -> int:
    value = os.getenv(name, "")
    if value == "":
        return default
    try:
        return int(value)
    except ValueError:
        raise ConfigError(f"{name} must be an integer, got '{value}'.") from None


def default_seed() -> int:
    return _int_env("LAYER_SEED", 0)


def default_threads() -> int:
    return _int_env("LAYER_THREADS", 0)


def log_file() -> Optional[str]:
    return os.getenv("LAYER_LOG_FILE") or None


class RunConfig(BaseModel):
    """
    One CLI invocation. The seed is embedded in every output it produces.

    :param options: Subcommand-specific settings, recorded verbatim in output provenance.
    """

    command: str
    data: Optional[Path] = None
    model: Optional[Path] = None
    out: Optional[Path] = None
    scenario: Scenario = Scenario.SIDE_MP
    modality: str = "bmode"
    seed: int = 0
    threads: int = Field(default=0, ge=0)
    options: Dict[str, Any] = Field(default_factory=dict)

    @property
    def manifest_path(self) -> Path:
        return Path(self.data) / MANIFEST_NAME

    def check_inputs(self) -> "RunConfig":
        """
        Verify the paths a subcommand reads.

        :raises ConfigError: If a required path is missing or does not exist.
        """
        if self.modality not in MODALITY_SETS:
            raise ConfigError(f"Unknown modality set '{self.modality}'.")
        if self.command in NEEDS_DATA:
            if self.data is None:
                raise ConfigError(f"'{self.command}' needs --data pointing at a cohort directory.")
            if not self.manifest_path.is_file():
                raise ConfigError(f"No {MANIFEST_NAME} in {self.data}.")
        if self.command in NEEDS_MODEL:
            if self.model is None:
                raise ConfigError(f"'{self.command}' needs a trained model; pass --model <checkpoint>.")
            if not Path(self.model).is_file():
                raise ConfigError(f"Model checkpoint {self.model} does not exist.")
        return self

    def provenance_config(self) -> Dict[str, Any]:
        return self.model_dump(mode="json")


def make_run_config(**kwargs) -> RunConfig:
    try:
        return RunConfig(**kwargs).check_inputs()
    except ValidationError as e:
        raise ConfigError(f"Invalid run configuration: {e}") from None
