"""
Training configuration and bound result models.
"""
from enum import Enum
from typing import Dict, List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field


class Direction(str, Enum):
    UPPER = "upper"
    LOWER = "lower"


class LearningRateSchedule(BaseModel):
    """Piecewise-constant rate: ``base_rate``, then ``base_rate * decay_factor`` for the final fraction."""

    model_config = ConfigDict(extra="forbid")

    base_rate: float = Field(default=1e-3, gt=0)
    decay_factor: float = Field(default=0.1, gt=0, le=1)
    decay_fraction: float = Field(default=0.2, ge=0, le=1, description="Share of iterations run at the decayed rate")

    def rate_at(self, iteration: int, iterations: int) -> float:
        """Rate for the 0-based ``iteration`` of a run of ``iterations`` steps."""
        decay_start = iterations - int(round(self.decay_fraction * iterations))
        return self.base_rate * self.decay_factor if iteration >= decay_start else self.base_rate


class TrainerConfig(BaseModel):
    """Penalization and network hyperparameters."""

    model_config = ConfigDict(extra="forbid")

    gamma: float = Field(default=80.0, gt=0, description="Penalty factor")
    batch_size: int = Field(default=128, ge=2)
    iterations: int = Field(default=25_000, ge=1)
    hidden_layers: int = Field(default=4, ge=1)
    hidden_width: int = Field(default=64, ge=1)
    learning_rate: LearningRateSchedule = Field(default_factory=LearningRateSchedule)
    xavier: Literal["uniform", "normal"] = "uniform"
    reference: Literal["product", "copula"] = Field(default="product", description="Reference measure for the penalty")
    eval_samples: int = Field(default=2 ** 17, ge=2)
    slack_samples: int = Field(default=2 ** 14, ge=1)
    slack_tolerance: float = Field(default=1e-3, ge=0)
    seed: int = Field(default=0, ge=0)
    log_every: int = Field(default=1_000, ge=0)
    checkpoint_path: Optional[str] = None
    checkpoint_every: int = Field(default=0, ge=0)

    @property
    def widths(self) -> tuple:
        return (1,) + (self.hidden_width,) * self.hidden_layers + (1,)


class SlackStats(BaseModel):
    """Distribution of the hedging residual sum(psi) + sum(b*phi) - f on coupled samples."""

    n: int
    tolerance: float
    mean: float
    std: float
    min: float
    max: float
    quantiles: Dict[str, float]
    violation_fraction: float
    max_violation: float


class ConstraintWeight(BaseModel):
    payoff: str
    price: float
    weight: float


class BoundResult(BaseModel):
    """Outcome of one bound computation."""

    direction: Direction
    target: str
    bound: float
    fresh_eval: float
    primal_estimate: float
    density_mass: float
    trace: List[float]
    slack_stats: SlackStats
    b_values: List[ConstraintWeight] = Field(default_factory=list)
    gamma: float
    iterations: int
    elapsed_seconds: float
    config: TrainerConfig

    def thinned(self, every: int) -> "BoundResult":
        """Copy with every ``every``-th trace entry (the last one always kept)."""
        if every <= 1 or not self.trace:
            return self
        trace = self.trace[::every]
        if (len(self.trace) - 1) % every:
            trace.append(self.trace[-1])
        return self.model_copy(update={"trace": trace})
