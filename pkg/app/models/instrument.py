"""
Traded-instrument models: constraint instruments and Monte Carlo priced instruments.
"""
from enum import Enum
from typing import List, Optional

from pydantic import BaseModel, ConfigDict, Field

from app.models.market import MarketSpec

DISCRETE_TOLERANCE = 1e-9
MIN_CONTINUOUS_TOLERANCE = 1e-4


class PricingSource(str, Enum):
    """Which coupling generated a price."""

    COPULA = "copula"
    DISCRETE = "discrete"
    DECLARED = "declared"


class ConstraintInstrument(BaseModel):
    """A traded payoff with a known price."""

    model_config = ConfigDict(extra="forbid")

    payoff: str = Field(..., min_length=1, description="Payoff text in the payoff grammar")
    price: float = Field(..., description="Market price")
    tolerance: Optional[float] = Field(default=None, ge=0, description="LP price band half-width override")

    def band(self) -> float:
        """Half-width of the LP price band."""
        return self.tolerance if self.tolerance is not None else 0.0


class PricedInstrument(ConstraintInstrument):
    """Instrument priced by Monte Carlo under a known coupling."""

    stderr: float = Field(default=0.0, ge=0, description="Monte Carlo standard error")
    n_samples: int = Field(default=0, ge=0, description="Monte Carlo sample count")
    seed: Optional[int] = Field(default=None, description="Seed of the pricing batch")
    source: PricingSource = Field(default=PricingSource.COPULA)

    def band(self) -> float:
        if self.tolerance is not None:
            return self.tolerance
        if self.source == PricingSource.DISCRETE:
            return DISCRETE_TOLERANCE
        if self.source == PricingSource.DECLARED:
            return 0.0
        return max(3.0 * self.stderr, MIN_CONTINUOUS_TOLERANCE)


class InstrumentTable(BaseModel):
    """Serialized instrument table (instruments.json)."""

    market: MarketSpec
    instruments: List[PricedInstrument] = Field(default_factory=list)
    references: List[PricedInstrument] = Field(default_factory=list)
    n_samples: int = Field(default=0, ge=0)
    seed: Optional[int] = None
    config: Optional[dict] = None
