"""
Run configuration read by the command-line front end.
"""
import json
from pathlib import Path
from typing import List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from app.core.config import settings
from app.core.exceptions import ConfigurationError
from app.models.experiment import ExperimentBundle, TimingConfig
from app.models.market import MarketSpec
from app.models.oracle import OracleConfig
from app.models.training import TrainerConfig

SCHEMA_VERSION = 1


class ConstraintDecl(BaseModel):
    """A traded payoff; without a price it is priced by ``generate``."""

    model_config = ConfigDict(extra="forbid")

    payoff: str = Field(..., min_length=1)
    price: Optional[float] = None
    tolerance: Optional[float] = Field(default=None, ge=0)


class RunConfig(BaseModel):
    """Everything one command needs; echoed into every output it writes."""

    model_config = ConfigDict(extra="forbid")

    schema_version: int = Field(default=SCHEMA_VERSION)
    market: Optional[MarketSpec] = None
    target: Optional[str] = Field(default=None, description="Target payoff text")
    constraints: List[ConstraintDecl] = Field(default_factory=list)
    trainer: TrainerConfig = Field(default_factory=TrainerConfig)
    oracle: OracleConfig = Field(default_factory=OracleConfig)
    experiment: Optional[ExperimentBundle] = None
    experiment_path: Optional[str] = None
    cases: List[str] = Field(default_factory=list, description="Cases to run; all when empty")
    strikes: Optional[List[float]] = Field(default=None, description="Overrides the bundle's target strikes")
    strike: Optional[float] = Field(default=None, description="Convergence strike")
    timing: TimingConfig = Field(default_factory=TimingConfig)
    mc_samples: int = Field(default=1_000_000, ge=1_000)
    output_dir: str = Field(default_factory=lambda: settings.default_output_dir)
    seed: int = Field(default_factory=lambda: settings.default_root_seed, ge=0)
    threads: int = Field(default_factory=lambda: settings.default_threads, ge=1)
    direction: Literal["upper", "lower", "both"] = "both"
    trace_every: int = Field(default=1, ge=1, description="Keep every n-th trace entry in result.json")
    instruments_path: Optional[str] = None
    bound_result_path: Optional[str] = None

    @model_validator(mode="after")
    def validate_config(self):
        if self.schema_version != SCHEMA_VERSION:
            raise ValueError(f"unsupported schema_version {self.schema_version}, expected {SCHEMA_VERSION}")
        if self.experiment is not None and self.experiment_path is not None:
            raise ValueError("give either an inline experiment or experiment_path, not both")
        return self

    def directions(self) -> List[str]:
        return ["upper", "lower"] if self.direction == "both" else [self.direction]

    def require_market(self) -> MarketSpec:
        if self.market is None:
            raise ConfigurationError("this command needs a market in the run config")
        return self.market

    def require_target(self) -> str:
        if not self.target:
            raise ConfigurationError("this command needs a target payoff in the run config")
        return self.target


def load_run_config(path: Path | str) -> RunConfig:
    """
    Read and validate a run config.

    Raises:
        ConfigurationError: If the file is missing, not JSON or fails validation
    """
    path = Path(path)
    try:
        return RunConfig.model_validate(json.loads(path.read_text()))
    except FileNotFoundError as e:
        raise ConfigurationError(f"Run config not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"Run config {path} is not valid JSON: {e}") from e
    except ValidationError as e:
        raise ConfigurationError(f"Invalid run config {path}: {e}") from e
