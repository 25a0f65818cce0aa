"""
Experiment runner: strike sweeps over nested constraint sets, convergence
traces and the dimension timing harness.

Constraint prices are generated once per bundle on one copula batch, so every
case quotes identical prices for the instruments it shares with its parent.
Training seeds depend on (strike, direction) but not on the case, which keeps
case-to-case comparisons on common random numbers.
"""
import json
import os
import platform
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from app.core.exceptions import (
    BoundsError,
    ConfigurationError,
    ExperimentJobError,
    InvalidArgumentError,
    TrainingAbortedError,
)
from app.core.logging import get_logger, submit_with_context
from app.core.seeding import derive_seed
from app.models.experiment import (
    CaseRow,
    CaseTable,
    ConvergenceTable,
    ExperimentBundle,
    ExperimentCase,
    TimingConfig,
    TimingRow,
    TimingTable,
    TracePoint,
    render_template,
)
from app.models.instrument import PricedInstrument
from app.models.market import MarketSpec
from app.models.training import BoundResult, Direction, TrainerConfig
from app.services.benchmark_pricer import price_many
from app.services.dual_solver import bound_problem, train
from app.services.payoff import builtin, parse_payoff

logger = get_logger(__name__)

# volatilities of the six-asset market, cycled by the timing harness
SIX_ASSET_SIGMA = (0.3, 0.4, 0.5, 0.35, 0.45, 0.55)
# moving-average window of the convergence stability measure
STABILITY_WINDOW = 1_000


def load_bundle(path: Path | str) -> ExperimentBundle:
    """
    Read an experiment bundle from JSON.

    Raises:
        ConfigurationError: If the file is missing or does not validate
    """
    path = Path(path)
    try:
        return ExperimentBundle.model_validate(json.loads(path.read_text()))
    except FileNotFoundError as e:
        raise ConfigurationError(f"Experiment bundle not found: {path}") from e
    except (ValueError, TypeError) as e:
        raise ConfigurationError(f"Invalid experiment bundle {path}: {e}") from e


def _get_case(bundle: ExperimentBundle, case: ExperimentCase | str) -> ExperimentCase:
    if not isinstance(case, str):
        return case
    try:
        return bundle.case(case)
    except KeyError:
        raise ConfigurationError(f"bundle {bundle.name} has no case {case!r}") from None


def _lineage(bundle: ExperimentBundle, case: ExperimentCase) -> List[ExperimentCase]:
    chain = [case]
    while chain[-1].extends is not None:
        chain.append(bundle.case(chain[-1].extends))
    return list(reversed(chain))


def resolve_constraints(bundle: ExperimentBundle, case: ExperimentCase | str) -> List[str]:
    """Payoff texts of a case, inherited instruments first, duplicates dropped."""
    case = _get_case(bundle, case)
    texts: List[str] = []
    for ancestor in _lineage(bundle, case):
        for family in ancestor.families:
            texts.extend(t for t in family.render() if t not in texts)
    return texts


def render_case(bundle: ExperimentBundle, case: ExperimentCase | str) -> List[str]:
    """Canonical payoff texts of a case's constraint set."""
    seen: List[str] = []
    for text in resolve_constraints(bundle, case):
        canonical = parse_payoff(text, bundle.market.d).text
        if canonical not in seen:
            seen.append(canonical)
    return seen


def case_notes(bundle: ExperimentBundle, case: ExperimentCase | str) -> List[str]:
    case = _get_case(bundle, case)
    return [note for ancestor in _lineage(bundle, case) for note in ancestor.notes]


def bundle_trainer(bundle: ExperimentBundle, override: Optional[TrainerConfig] = None) -> TrainerConfig:
    """
    Defaults, then the bundle's overrides, then the fields explicitly set on
    ``override``.
    """
    values = TrainerConfig().model_dump()
    values.update(bundle.trainer)
    if override is not None:
        values.update(override.model_dump(exclude_unset=True))
    try:
        return TrainerConfig.model_validate(values)
    except ValueError as e:
        raise ConfigurationError(f"Invalid trainer overrides in bundle {bundle.name}: {e}") from e


def _strike_label(strike: float) -> str:
    return f"K={strike:g}"


def price_bundle(bundle: ExperimentBundle, seed: int,
                 strikes: Optional[Sequence[float]] = None) -> Tuple[Dict[str, PricedInstrument], Dict[float, PricedInstrument]]:
    """
    Price every constraint instrument of the bundle and every target strike
    on one copula batch.

    Returns constraint prices keyed by canonical text and reference prices
    keyed by strike.
    """
    d = bundle.market.d
    strikes = list(strikes if strikes is not None else bundle.target_strikes)
    constraint_texts: List[str] = []
    for case in bundle.cases:
        constraint_texts.extend(t for t in render_case(bundle, case) if t not in constraint_texts)
    payoffs = [parse_payoff(t, d) for t in constraint_texts]
    payoffs += [parse_payoff(render_template(bundle.target, k), d) for k in strikes]
    priced = price_many(bundle.market, payoffs, bundle.reference_samples, derive_seed(seed, "prices"))
    constraints = dict(zip(constraint_texts, priced[:len(constraint_texts)]))
    references = dict(zip(strikes, priced[len(constraint_texts):]))
    return constraints, references


def _job(market: MarketSpec, target: str, constraints: List[PricedInstrument], direction: Direction,
         config: TrainerConfig, case: str, strike: float) -> BoundResult:
    started = time.perf_counter()
    problem = bound_problem(market, target, constraints, direction)
    label = f"case {case} {_strike_label(strike)} {direction.value}"
    try:
        result = train(problem, config)
    except TrainingAbortedError as e:
        raise TrainingAbortedError(f"{label}: {e.reason}", e.iteration) from e
    except BoundsError:
        raise
    except Exception as e:
        logger.error("Unexpected error in experiment job", case=case, strike=strike, direction=direction.value,
                     error=str(e))
        raise ExperimentJobError(f"{label} failed: {e}") from e
    logger.info("Experiment job finished", case=case, strike=strike, direction=direction.value,
                bound=result.bound, seconds=round(time.perf_counter() - started, 3))
    return result


def _job_config(trainer: TrainerConfig, seed: int, strike: float, direction: Direction) -> TrainerConfig:
    return trainer.model_copy(update={
        "seed": derive_seed(seed, "train", _strike_label(strike), direction.value),
        "checkpoint_path": None,
    })


def run_case(bundle: ExperimentBundle, case: ExperimentCase | str, trainer: Optional[TrainerConfig] = None,
             directions: Iterable[Direction | str] = (Direction.UPPER, Direction.LOWER), threads: int = 1,
             strikes: Optional[Sequence[float]] = None, seed: Optional[int] = None,
             prices: Optional[Tuple[Dict[str, PricedInstrument], Dict[float, PricedInstrument]]] = None) -> CaseTable:
    """
    Upper and lower bounds of the target over the strike sweep for one case.

    ``prices`` lets several cases share one pricing pass (see ``price_bundle``).

    Raises:
        TrainingAbortedError: With case, strike and direction in the message
    """
    case = _get_case(bundle, case)
    seed = bundle.seed if seed is None else seed
    trainer = trainer or bundle_trainer(bundle)
    strikes = list(strikes if strikes is not None else bundle.target_strikes)
    directions = [Direction(d) for d in directions]
    constraint_prices, references = prices or price_bundle(bundle, seed, strikes)
    texts = render_case(bundle, case)
    constraints = [constraint_prices[t] for t in texts]

    jobs = [(k, direction) for k in strikes for direction in directions]
    logger.info("Running case", bundle=bundle.name, case=case.name, constraints=len(constraints),
                strikes=len(strikes), jobs=len(jobs), threads=threads)
    with ThreadPoolExecutor(max_workers=max(1, threads)) as executor:
        futures = {
            (k, direction): submit_with_context(
                executor, _job, bundle.market, render_template(bundle.target, k), constraints, direction,
                _job_config(trainer, seed, k, direction), case.name, k,
            )
            for k, direction in jobs
        }
        results = {key: future.result() for key, future in futures.items()}

    rows = []
    for k in strikes:
        upper = results.get((k, Direction.UPPER))
        lower = results.get((k, Direction.LOWER))
        reference = references[k]
        rows.append(CaseRow(
            case=case.name,
            strike=k,
            upper=upper.bound if upper else None,
            lower=lower.bound if lower else None,
            reference=reference.price,
            stderr=reference.stderr,
            gap=upper.bound - lower.bound if upper and lower else None,
            upper_excess=upper.bound - reference.price if upper else None,
            upper_seconds=upper.elapsed_seconds if upper else None,
            lower_seconds=lower.elapsed_seconds if lower else None,
        ))
    seeds = {"root": seed, "prices": derive_seed(seed, "prices")}
    for k, direction in jobs:
        seeds[f"{_strike_label(k)}/{direction.value}"] = results[(k, direction)].config.seed
    return CaseTable(bundle=bundle.name, case=case.name, constraints=texts, rows=rows, seeds=seeds,
                     notes=case_notes(bundle, case))


def run_sweep(bundle: ExperimentBundle, cases: Optional[Sequence[str]] = None, trainer: Optional[TrainerConfig] = None,
              directions: Iterable[Direction | str] = (Direction.UPPER, Direction.LOWER), threads: int = 1,
              strikes: Optional[Sequence[float]] = None, seed: Optional[int] = None) -> List[CaseTable]:
    """``run_case`` for several cases of a bundle on one shared pricing pass."""
    seed = bundle.seed if seed is None else seed
    names = [_get_case(bundle, c).name for c in cases] if cases else [c.name for c in bundle.cases]
    prices = price_bundle(bundle, seed, strikes)
    directions = list(directions)
    return [run_case(bundle, name, trainer, directions, threads, strikes, seed, prices) for name in names]


def run_convergence(bundle: ExperimentBundle, strike: Optional[float] = None, cases: Optional[Sequence[str]] = None,
                    trainer: Optional[TrainerConfig] = None, threads: int = 1, seed: Optional[int] = None,
                    every: int = 1) -> ConvergenceTable:
    """Upper-bound training traces of every case at one strike."""
    seed = bundle.seed if seed is None else seed
    strike = strike if strike is not None else bundle.convergence_strike
    if strike is None:
        raise ConfigurationError(f"bundle {bundle.name} declares no convergence strike; pass one explicitly")
    trainer = trainer or bundle_trainer(bundle)
    names = [_get_case(bundle, c).name for c in cases] if cases else [c.name for c in bundle.cases]
    constraint_prices, _ = price_bundle(bundle, seed, [strike])
    config = _job_config(trainer, seed, strike, Direction.UPPER)
    target = render_template(bundle.target, strike)

    with ThreadPoolExecutor(max_workers=max(1, threads)) as executor:
        futures = {
            name: submit_with_context(
                executor, _job, bundle.market, target, [constraint_prices[t] for t in render_case(bundle, name)],
                Direction.UPPER, config, name, strike,
            )
            for name in names
        }
        results = {name: future.result() for name, future in futures.items()}

    points: List[TracePoint] = []
    finals: Dict[str, float] = {}
    stability: Dict[str, float] = {}
    for name in names:
        trace = results[name].trace
        finals[name] = results[name].bound
        stability[name] = trace_stability(trace)
        points.extend(TracePoint(case=name, iteration=i + 1, loss=v) for i, v in enumerate(trace) if (i + 1) % every == 0)
    return ConvergenceTable(bundle=bundle.name, strike=strike, finals=finals, points=points, stability=stability)


def trace_stability(trace: Sequence[float], window: int = STABILITY_WINDOW) -> float:
    """
    Standard deviation over mean of the moving average of the final fifth of
    a trace (iterations 20,001 to 25,000 of a default run).

    The window shrinks to a fifth of that tail for short traces.
    """
    tail = pd.Series(trace[int(0.8 * len(trace)):], dtype=float)
    if tail.empty:
        raise InvalidArgumentError("trace is empty")
    window = max(1, min(window, len(tail) // 5))
    averaged = tail.rolling(window).mean().dropna()
    mean = averaged.mean()
    if mean == 0.0:
        return float("inf")
    return float(averaged.std(ddof=0) / abs(mean))


def timing_market(d: int, timing: TimingConfig) -> MarketSpec:
    sigma = [SIX_ASSET_SIGMA[j % len(SIX_ASSET_SIGMA)] for j in range(d)]
    return MarketSpec.equicorrelated([timing.spot] * d, sigma, timing.correlation, timing.maturity)


def environment_metadata() -> Dict[str, str]:
    return {
        "python": platform.python_version(),
        "platform": platform.platform(),
        "processor": platform.processor() or "unknown",
        "cpu_count": str(os.cpu_count()),
        "numpy": np.__version__,
        "pandas": pd.__version__,
    }


def run_timing(timing: TimingConfig, trainer: Optional[TrainerConfig] = None, seed: int = 0) -> TimingTable:
    """
    Wall-clock time of one full upper-bound training per dimension.

    The target is the basket call on all assets; runs are sequential so the
    timings do not compete for cores.
    """
    trainer = (trainer or TrainerConfig()).model_copy(update={"iterations": timing.iterations, "checkpoint_path": None})
    rows = []
    for d in timing.d_values:
        market = timing_market(d, timing)
        target = builtin("basket_call", range(1, d + 1), timing.strike, dimension=d)
        config = trainer.model_copy(update={"seed": derive_seed(seed, "timing", d)})
        started = time.perf_counter()
        train(bound_problem(market, target), config)
        seconds = time.perf_counter() - started
        logger.info("Timing run finished", d=d, iterations=timing.iterations, seconds=round(seconds, 3))
        rows.append(TimingRow(d=d, iterations=timing.iterations, seconds=seconds))
    return TimingTable(rows=rows, environment=environment_metadata())


def case_frame(table: CaseTable) -> pd.DataFrame:
    return pd.DataFrame([row.model_dump() for row in table.rows])


def sweep_frame(tables: Sequence[CaseTable]) -> pd.DataFrame:
    """Wide figure table: one row per strike, reference plus upper/lower per case."""
    frame: Optional[pd.DataFrame] = None
    for table in tables:
        part = case_frame(table).set_index("strike")
        if frame is None:
            frame = part[["reference", "stderr"]].copy()
        for column in ("upper", "lower"):
            if part[column].notna().any():
                frame[f"{column}_{table.case}"] = part[column]
    return (frame if frame is not None else pd.DataFrame()).reset_index()


def convergence_frame(table: ConvergenceTable) -> pd.DataFrame:
    """Traces pivoted to one column per case."""
    long = pd.DataFrame([p.model_dump() for p in table.points])
    if long.empty:
        return long
    return long.pivot(index="iteration", columns="case", values="loss").reset_index()


def timing_frame(table: TimingTable) -> pd.DataFrame:
    return pd.DataFrame([row.model_dump() for row in table.rows])
