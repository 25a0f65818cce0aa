"""
Declarative experiment bundles and the tables they produce.
"""
from typing import Dict, List, Optional

from pydantic import BaseModel, ConfigDict, Field, model_validator

from app.models.market import MarketSpec

STRIKE_PLACEHOLDER = "{K}"


def _check_template(template: str) -> str:
    if STRIKE_PLACEHOLDER not in template:
        raise ValueError(f"payoff template {template!r} has no {STRIKE_PLACEHOLDER} placeholder")
    return template


class ConstraintFamily(BaseModel):
    """One payoff template quoted at several strikes."""

    model_config = ConfigDict(extra="forbid")

    payoff: str = Field(..., description="Payoff text with a {K} strike placeholder")
    strikes: List[float] = Field(..., min_length=1)

    @model_validator(mode="after")
    def validate_template(self):
        _check_template(self.payoff)
        return self

    def render(self) -> List[str]:
        return [render_template(self.payoff, k) for k in self.strikes]


class ExperimentCase(BaseModel):
    """A named constraint set; ``extends`` inherits every instrument of the parent case."""

    model_config = ConfigDict(extra="forbid")

    name: str = Field(..., min_length=1)
    extends: Optional[str] = None
    families: List[ConstraintFamily] = Field(default_factory=list)
    description: str = ""
    notes: List[str] = Field(default_factory=list)


class ExperimentBundle(BaseModel):
    """Market, target family and the cases compared over a strike sweep."""

    model_config = ConfigDict(extra="forbid")

    name: str = Field(..., min_length=1)
    market: MarketSpec
    target: str = Field(..., description="Target payoff text with a {K} placeholder")
    target_strikes: List[float] = Field(..., min_length=1)
    cases: List[ExperimentCase] = Field(..., min_length=1)
    trainer: Dict[str, object] = Field(default_factory=dict, description="TrainerConfig overrides")
    seed: int = Field(default=0, ge=0)
    reference_samples: int = Field(default=1_000_000, ge=1_000)
    convergence_strike: Optional[float] = None

    @model_validator(mode="after")
    def validate_cases(self):
        _check_template(self.target)
        names = [c.name for c in self.cases]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate case names in bundle {self.name}")
        known = set()
        for case in self.cases:
            if case.extends is not None and case.extends not in known:
                raise ValueError(f"case {case.name} extends {case.extends}, which is not declared before it")
            known.add(case.name)
        return self

    def case(self, name: str) -> ExperimentCase:
        for case in self.cases:
            if case.name == name:
                return case
        raise KeyError(name)


def render_template(template: str, strike: float) -> str:
    text = f"{strike:g}"
    return template.replace(STRIKE_PLACEHOLDER, text)


class CaseRow(BaseModel):
    """One strike of a case table."""

    case: str
    strike: float
    upper: Optional[float] = None
    lower: Optional[float] = None
    reference: float
    stderr: float
    gap: Optional[float] = None
    upper_excess: Optional[float] = None
    upper_seconds: Optional[float] = None
    lower_seconds: Optional[float] = None


class CaseTable(BaseModel):
    bundle: str
    case: str
    constraints: List[str]
    rows: List[CaseRow]
    seeds: Dict[str, int]
    notes: List[str] = Field(default_factory=list)


class TracePoint(BaseModel):
    case: str
    iteration: int
    loss: float


class ConvergenceTable(BaseModel):
    bundle: str
    strike: float
    finals: Dict[str, float]
    points: List[TracePoint]
    stability: Dict[str, float] = Field(default_factory=dict, description="Moving-average std / mean over the final fifth")


class TimingRow(BaseModel):
    d: int
    iterations: int
    seconds: float


class TimingConfig(BaseModel):
    """Dimension sweep of the timing harness."""

    model_config = ConfigDict(extra="forbid")

    d_values: List[int] = Field(default_factory=lambda: [3, 6, 12], min_length=1)
    iterations: int = Field(default=5_000, ge=1)
    correlation: float = Field(default=0.4, gt=-1, lt=1)
    strike: float = Field(default=10.0, ge=0)
    maturity: float = Field(default=1.5, gt=0)
    spot: float = Field(default=10.0, gt=0)

    @model_validator(mode="after")
    def validate_dimensions(self):
        if any(d < 1 for d in self.d_values):
            raise ValueError("timing dimensions must be positive")
        return self


class TimingTable(BaseModel):
    rows: List[TimingRow]
    environment: Dict[str, str]
