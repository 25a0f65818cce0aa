"""
Models for the discretized linear-programming oracle.
"""
from enum import Enum
from typing import List, Optional

from pydantic import BaseModel, ConfigDict, Field


class LpDirection(str, Enum):
    MAX = "max"
    MIN = "min"


class OracleConfig(BaseModel):
    """Discretization and solver settings of the LP oracle."""

    model_config = ConfigDict(extra="forbid")

    grid_sizes: List[int] = Field(default_factory=lambda: [50, 50], min_length=1)
    size_cap: Optional[int] = Field(default=None, ge=1, description="Max product-grid size; settings default when unset")
    max_dimension: int = Field(default=3, ge=1)
    reprice_on_grid: bool = True
    reprice_samples_per_atom: int = Field(default=2_000, ge=1)
    method: str = Field(default="highs-ds")


class CouplingEntry(BaseModel):
    atoms: List[int]
    mass: float


class ActiveConstraint(BaseModel):
    payoff: str
    price: float
    tolerance: float
    value: float
    side: str


class LpSolution(BaseModel):
    """Optimum of the primal problem over couplings of the grid marginals."""

    direction: LpDirection
    target: str
    value: float
    status: str
    variables: int
    rows: int
    marginal_residual: float
    active_constraints: List[ActiveConstraint] = Field(default_factory=list)
    coupling: List[CouplingEntry] = Field(default_factory=list)


class ViolationEntry(BaseModel):
    payoff: str
    price: float
    tolerance: float
    violation: float


class FeasibilityReport(BaseModel):
    """Phase-one verdict: is some coupling consistent with all price bands?"""

    feasible: bool
    total_violation: float
    violations: List[ViolationEntry] = Field(default_factory=list)
    witness: List[CouplingEntry] = Field(default_factory=list)
    message: str
