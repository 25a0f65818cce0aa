"""
Market data models: benchmark market parameters and sample batches.
"""
from dataclasses import dataclass
from enum import Enum
from typing import List

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


class MarketSpec(BaseModel):
    """Lognormal marginals coupled by a Gaussian copula (single maturity, zero rate)."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    s0: List[float] = Field(..., min_length=1, description="Initial prices, one per asset")
    sigma: List[float] = Field(..., min_length=1, description="Annualized volatilities")
    rho: List[List[float]] = Field(..., description="Benchmark correlation matrix (d x d)")
    maturity: float = Field(..., gt=0, description="Maturity in years")
    rate: float = Field(default=0.0, description="Risk-free rate; only zero is supported")

    @field_validator("s0")
    @classmethod
    def validate_s0(cls, v):
        if any(not np.isfinite(x) or x <= 0 for x in v):
            raise ValueError("initial prices must be strictly positive")
        return v

    @field_validator("sigma")
    @classmethod
    def validate_sigma(cls, v):
        if any(not np.isfinite(x) or x < 0 for x in v):
            raise ValueError("volatilities must be non-negative")
        return v

    @field_validator("rate")
    @classmethod
    def validate_rate(cls, v):
        if v != 0.0:
            raise ValueError("only a zero interest rate is supported")
        return v

    @model_validator(mode="after")
    def validate_shapes(self):
        d = len(self.s0)
        if len(self.sigma) != d:
            raise ValueError(f"sigma has {len(self.sigma)} entries, expected {d}")
        rho = np.asarray(self.rho, dtype=float)
        if rho.shape != (d, d):
            raise ValueError(f"rho must be {d}x{d}, got {rho.shape}")
        if not np.allclose(rho, rho.T, atol=1e-12):
            raise ValueError("rho must be symmetric")
        if not np.allclose(np.diag(rho), 1.0, atol=1e-12):
            raise ValueError("rho must have a unit diagonal")
        if np.any(np.abs(rho) > 1.0 + 1e-12):
            raise ValueError("correlations must lie in [-1, 1]")
        return self

    @property
    def d(self) -> int:
        return len(self.s0)

    @property
    def s0_array(self) -> np.ndarray:
        return np.asarray(self.s0, dtype=float)

    @property
    def sigma_array(self) -> np.ndarray:
        return np.asarray(self.sigma, dtype=float)

    @property
    def rho_array(self) -> np.ndarray:
        return np.asarray(self.rho, dtype=float)

    @classmethod
    def equicorrelated(cls, s0: List[float], sigma: List[float], correlation: float, maturity: float) -> "MarketSpec":
        """Market whose off-diagonal correlations all equal ``correlation``."""
        d = len(s0)
        rho = np.full((d, d), float(correlation))
        np.fill_diagonal(rho, 1.0)
        return cls(s0=list(s0), sigma=list(sigma), rho=rho.tolist(), maturity=maturity)


class SampleSource(str, Enum):
    """Origin of a sample batch."""

    COPULA = "copula"
    REFERENCE = "reference"
    DISCRETE = "discrete"


@dataclass(frozen=True)
class SampleBatch:
    """n x d matrix of terminal asset prices."""

    values: np.ndarray
    seed: int
    source: SampleSource

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def d(self) -> int:
        return self.values.shape[1]
