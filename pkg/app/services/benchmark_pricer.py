"""
Benchmark "market" data: Monte Carlo prices under the Gaussian-copula model
and Black-Scholes closed forms used as independent oracles.
"""
from typing import List, Sequence

import numpy as np
from scipy.stats import norm

from app.core.exceptions import DimensionMismatchError, InvalidArgumentError
from app.core.logging import get_logger
from app.models.instrument import PricedInstrument, PricingSource
from app.models.market import MarketSpec, SampleBatch
from app.models.payoff import PayoffExpr
from app.services.market_model import sample_copula, sample_discrete
from app.services.payoff import eval_payoff

logger = get_logger(__name__)

MIN_MC_SAMPLES = 1_000
DEFAULT_MC_SAMPLES = 1_000_000


def _check_payoff(spec: MarketSpec, payoff: PayoffExpr) -> None:
    if payoff.dimension != spec.d:
        raise DimensionMismatchError(f"payoff bound to {payoff.dimension} assets, market has {spec.d}")


def _priced(payoff: PayoffExpr, values: np.ndarray, batch: SampleBatch, source: PricingSource) -> PricedInstrument:
    n = values.shape[0]
    return PricedInstrument(
        payoff=payoff.text,
        price=float(values.mean()),
        stderr=float(values.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0,
        n_samples=n,
        seed=batch.seed,
        source=source,
    )


def price_on_batch(payoffs: Sequence[PayoffExpr], batch: SampleBatch,
                   source: PricingSource = PricingSource.COPULA) -> List[PricedInstrument]:
    """Price payoffs on an existing batch (common random numbers)."""
    return [_priced(p, eval_payoff(p, batch), batch, source) for p in payoffs]


def price_mc(spec: MarketSpec, payoff: PayoffExpr, n: int = DEFAULT_MC_SAMPLES, seed: int = 0) -> PricedInstrument:
    """
    Monte Carlo price of a payoff under the benchmark Gaussian copula.

    Raises:
        InvalidArgumentError: If n < 1000
        DimensionMismatchError: If the payoff dimension differs from the market's
    """
    return price_many(spec, [payoff], n, seed)[0]


def price_many(spec: MarketSpec, payoffs: Sequence[PayoffExpr], n: int = DEFAULT_MC_SAMPLES,
               seed: int = 0) -> List[PricedInstrument]:
    """Price several payoffs on one copula batch; strike sweeps stay monotone exactly."""
    if int(n) < MIN_MC_SAMPLES:
        raise InvalidArgumentError(f"Monte Carlo pricing needs at least {MIN_MC_SAMPLES} samples, got {n}")
    for payoff in payoffs:
        _check_payoff(spec, payoff)
    batch = sample_copula(spec, n, seed)
    priced = price_on_batch(payoffs, batch)
    logger.info("Priced instruments", count=len(priced), n=int(n), seed=seed)
    return priced


def price_on_grid(spec: MarketSpec, atoms: Sequence[np.ndarray], payoffs: Sequence[PayoffExpr],
                  n: int, seed: int) -> List[PricedInstrument]:
    """
    Price payoffs under the copula coupling snapped onto discrete marginals.

    With n a multiple of every grid size the sampled coupling has the grid
    marginals exactly, so the prices are attainable on the grid.
    """
    if int(n) < MIN_MC_SAMPLES:
        raise InvalidArgumentError(f"Monte Carlo pricing needs at least {MIN_MC_SAMPLES} samples, got {n}")
    for payoff in payoffs:
        _check_payoff(spec, payoff)
    batch = sample_discrete(spec, atoms, n, seed)
    return price_on_batch(payoffs, batch, PricingSource.DISCRETE)


def _check_strike(spec: MarketSpec, j: int, strike: float) -> None:
    if not 1 <= int(j) <= spec.d:
        raise InvalidArgumentError(f"asset index {j} outside 1..{spec.d}")
    if strike < 0:
        raise InvalidArgumentError(f"strike must be non-negative, got {strike}")


def price_closed_form_call(spec: MarketSpec, j: int, strike: float) -> float:
    """Black-Scholes call on asset j (1-based) with zero rate."""
    _check_strike(spec, j, strike)
    spot = spec.s0[j - 1]
    vol = spec.sigma[j - 1] * np.sqrt(spec.maturity)
    if strike == 0.0:
        return float(spot)
    if vol == 0.0:
        return float(max(spot - strike, 0.0))
    d1 = (np.log(spot / strike) + 0.5 * vol ** 2) / vol
    d2 = d1 - vol
    return float(spot * norm.cdf(d1) - strike * norm.cdf(d2))


def price_closed_form_put(spec: MarketSpec, j: int, strike: float) -> float:
    """Black-Scholes put on asset j (1-based) with zero rate."""
    _check_strike(spec, j, strike)
    spot = spec.s0[j - 1]
    vol = spec.sigma[j - 1] * np.sqrt(spec.maturity)
    if strike == 0.0:
        return 0.0
    if vol == 0.0:
        return float(max(strike - spot, 0.0))
    d1 = (np.log(spot / strike) + 0.5 * vol ** 2) / vol
    d2 = d1 - vol
    return float(strike * norm.cdf(-d2) - spot * norm.cdf(-d1))
