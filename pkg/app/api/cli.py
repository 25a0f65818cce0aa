"""
Command-line front end: generate, bound, verify, sweep, convergence, timing.

Each command reads a JSON run config, writes its outputs under the output
directory and returns a process exit code. Domain errors map to distinct
codes so scripted pipelines can tell a typo from an infeasible market.
"""
import argparse
import json
import math
import sys
import time
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import pandas as pd
from pydantic import ValidationError

from app.core.config import settings
from app.core.exceptions import (
    BoundsError,
    CheckpointError,
    ConfigurationError,
    DimensionMismatchError,
    InfeasibleProblemError,
    InstrumentNotFoundError,
    InvalidArgumentError,
    MarketSpecError,
    PayoffError,
    SizeCapExceededError,
    TrainingAbortedError,
)
from app.core.logging import bind_run_context, clear_run_context, get_logger
from app.core.seeding import derive_seed
from app.models.experiment import ExperimentBundle
from app.models.instrument import ConstraintInstrument, PricedInstrument, PricingSource
from app.models.market import MarketSpec
from app.models.oracle import LpDirection
from app.models.run_config import ConstraintDecl, RunConfig, load_run_config
from app.models.training import BoundResult, Direction
from app.repositories.instrument_repository import InstrumentRepository
from app.services.benchmark_pricer import MIN_MC_SAMPLES, price_many, price_on_grid
from app.services.dual_solver import bound_problem, train
from app.services.experiments import (
    bundle_trainer,
    convergence_frame,
    case_frame,
    load_bundle,
    run_convergence,
    run_sweep,
    run_timing,
    sweep_frame,
    timing_frame,
)
from app.services.lp_oracle import check_feasibility, discretize, solve_primal
from app.services.payoff import parse_payoff

logger = get_logger(__name__)

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_CONFIG = 2
EXIT_PAYOFF = 3
EXIT_TRAINING = 4
EXIT_INFEASIBLE = 5
EXIT_SIZE_CAP = 6
EXIT_IO = 7

# first match wins, so subclasses come before their bases
EXIT_CODES: Tuple[Tuple[type, int], ...] = (
    (TrainingAbortedError, EXIT_TRAINING),
    (InfeasibleProblemError, EXIT_INFEASIBLE),
    (SizeCapExceededError, EXIT_SIZE_CAP),
    (PayoffError, EXIT_PAYOFF),
    (DimensionMismatchError, EXIT_PAYOFF),
    (ConfigurationError, EXIT_CONFIG),
    (InstrumentNotFoundError, EXIT_CONFIG),
    (InvalidArgumentError, EXIT_CONFIG),
    (MarketSpecError, EXIT_CONFIG),
    (ValidationError, EXIT_CONFIG),
    (CheckpointError, EXIT_IO),
    (OSError, EXIT_IO),
)

Command = Callable[[RunConfig], int]


def exit_code_for(error: BaseException) -> int:
    for error_type, code in EXIT_CODES:
        if isinstance(error, error_type):
            return code
    return EXIT_UNEXPECTED


def _output_dir(config: RunConfig) -> Path:
    path = Path(config.output_dir)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _config_echo(config: RunConfig) -> dict:
    # only explicit fields, so a re-run resolves bundle seeds and trainer overrides the same way
    return config.model_dump(mode="json", exclude_unset=True)


def _write_json(path: Path, payload: dict) -> Path:
    path.write_text(json.dumps(payload, indent=2))
    logger.info("Output written", path=str(path))
    return path


def _write_csv(path: Path, frame: pd.DataFrame) -> Path:
    frame.to_csv(path, index=False)
    logger.info("Table written", path=str(path), rows=len(frame))
    return path


def _declared(decl: ConstraintDecl) -> PricedInstrument:
    return PricedInstrument(payoff=decl.payoff, price=decl.price, tolerance=decl.tolerance,
                            source=PricingSource.DECLARED)


def _with_tolerance(instrument: PricedInstrument, decl: ConstraintDecl) -> PricedInstrument:
    if decl.tolerance is None:
        return instrument
    return instrument.model_copy(update={"tolerance": decl.tolerance})


def _instruments_path(config: RunConfig) -> Path:
    return Path(config.instruments_path) if config.instruments_path else Path(config.output_dir) / "instruments.json"


def _resolve_constraints(config: RunConfig, market: MarketSpec) -> List[PricedInstrument]:
    """
    Declared prices as given; unpriced declarations looked up in the
    instrument table; with an explicit table and no declarations, every
    instrument of the table.
    """
    instruments = [_declared(c) for c in config.constraints if c.price is not None]
    unpriced = [c for c in config.constraints if c.price is None]
    if not unpriced and not config.instruments_path:
        return instruments
    repository, table = InstrumentRepository.load(_instruments_path(config))
    if table.market != market:
        raise ConfigurationError("instrument table was generated for a different market")
    if not config.constraints:
        return table.instruments
    for decl in unpriced:
        instruments.append(_with_tolerance(repository.get_by_payoff(decl.payoff)[0], decl))
    return instruments


def cmd_generate(config: RunConfig) -> int:
    """Price unpriced constraints and the target under the benchmark copula; write instruments.json."""
    market = config.require_market()
    seed = derive_seed(config.seed, "generate")
    repository = InstrumentRepository(market.d)
    repository.add_many([_declared(c) for c in config.constraints if c.price is not None])

    unpriced = [c for c in config.constraints if c.price is None]
    payoffs = [parse_payoff(c.payoff, market.d) for c in unpriced]
    targets = [parse_payoff(config.target, market.d)] if config.target else []
    references: List[PricedInstrument] = []
    if payoffs or targets:
        priced = price_many(market, payoffs + targets, config.mc_samples, seed)
        repository.add_many([_with_tolerance(p, c) for p, c in zip(priced, unpriced)])
        references = priced[len(payoffs):]

    table = repository.to_table(market, references, config.mc_samples, seed, _config_echo(config))
    repository.save(_output_dir(config) / "instruments.json", table)
    return EXIT_OK


def _direction_config(config: RunConfig, direction: str):
    trainer = config.trainer.model_copy(update={"seed": derive_seed(config.seed, "bound", direction)})
    if trainer.checkpoint_path and config.direction == "both":
        trainer = trainer.model_copy(update={"checkpoint_path": f"{trainer.checkpoint_path}.{direction}"})
    return trainer


def cmd_bound(config: RunConfig) -> int:
    """Train the requested bounds; write result.json."""
    market = config.require_market()
    constraints = _resolve_constraints(config, market)
    problem = bound_problem(market, config.require_target(), constraints)
    payload: Dict[str, object] = {
        "config": _config_echo(config),
        "target": problem.target.text,
        "constraints": [{"payoff": p.text, "price": price} for p, price in zip(problem.constraints, problem.prices)],
        "seeds": {},
    }
    for direction in config.directions():
        trainer = _direction_config(config, direction)
        result = train(problem.with_target(problem.target, Direction(direction)), trainer)
        payload[direction] = result.thinned(config.trace_every).model_dump(mode="json")
        payload["seeds"][direction] = trainer.seed
    _write_json(_output_dir(config) / "result.json", payload)
    return EXIT_OK


def _grid_sizes(config: RunConfig, d: int) -> List[int]:
    sizes = config.oracle.grid_sizes
    if len(sizes) == 1:
        return sizes * d
    if len(sizes) != d:
        raise ConfigurationError(f"oracle.grid_sizes has {len(sizes)} entries for a {d}-asset market")
    return list(sizes)


def _grid_constraints(config: RunConfig, market: MarketSpec, atoms, grid_sizes: Sequence[int]) -> List[ConstraintInstrument]:
    if not config.oracle.reprice_on_grid:
        return _resolve_constraints(config, market)
    instruments: List[ConstraintInstrument] = [_declared(c) for c in config.constraints if c.price is not None]
    unpriced = [c for c in config.constraints if c.price is None]
    if unpriced:
        # a multiple of every grid size keeps the sampled coupling's marginals exact
        step = math.lcm(*grid_sizes)
        n = step * config.oracle.reprice_samples_per_atom
        n = max(n, math.ceil(MIN_MC_SAMPLES / step) * step)
        priced = price_on_grid(market, atoms, [parse_payoff(c.payoff, market.d) for c in unpriced], n,
                               derive_seed(config.seed, "verify", "grid"))
        instruments.extend(_with_tolerance(p, c) for p, c in zip(priced, unpriced))
    return instruments


def _relative_gap(bound: float, exact: float) -> float:
    return (bound - exact) / max(abs(exact), 1e-12)


def cmd_verify(config: RunConfig) -> int:
    """Solve the discretized primal LP; write lp_report.json."""
    market = config.require_market()
    if market.d > config.oracle.max_dimension:
        raise SizeCapExceededError(
            f"the LP oracle handles at most {config.oracle.max_dimension} assets, market has {market.d}")
    grid_sizes = _grid_sizes(config, market.d)
    instance = discretize(market, grid_sizes, config.oracle.size_cap)
    constraints = _grid_constraints(config, market, instance.atoms, grid_sizes)

    feasibility = check_feasibility(instance, constraints, method=config.oracle.method)
    report: Dict[str, object] = {
        "config": _config_echo(config),
        "grid_sizes": grid_sizes,
        "atoms": [a.tolist() for a in instance.atoms],
        "constraints": [c.model_dump(mode="json") for c in constraints],
        "feasibility": feasibility.model_dump(mode="json"),
    }
    if feasibility.feasible and config.target:
        lp_directions = {"upper": LpDirection.MAX, "lower": LpDirection.MIN}
        for direction in config.directions():
            solution = solve_primal(instance, config.target, constraints, lp_directions[direction],
                                    method=config.oracle.method)
            report[lp_directions[direction].value] = solution.model_dump(mode="json")
        if config.bound_result_path:
            report["gap"] = _bound_gaps(Path(config.bound_result_path), report)
    out = _write_json(_output_dir(config) / "lp_report.json", report)
    if not feasibility.feasible:
        logger.warning("Price constraints infeasible on the grid", report=str(out),
                       total_violation=feasibility.total_violation)
        return EXIT_INFEASIBLE
    return EXIT_OK


def _bound_gaps(path: Path, report: Dict[str, object]) -> Dict[str, float]:
    try:
        results = json.loads(path.read_text())
    except FileNotFoundError as e:
        raise ConfigurationError(f"Bound result not found: {path}") from e
    gaps = {}
    for direction, key in (("upper", "max"), ("lower", "min")):
        if direction in results and key in report:
            bound = BoundResult.model_validate(results[direction]).bound
            gaps[direction] = _relative_gap(bound, report[key]["value"])
    return gaps


def _bundle(config: RunConfig) -> ExperimentBundle:
    if config.experiment is not None:
        return config.experiment
    if config.experiment_path is not None:
        return load_bundle(config.experiment_path)
    raise ConfigurationError("this command needs an experiment or experiment_path in the run config")


def _bundle_seed(config: RunConfig, bundle: ExperimentBundle) -> int:
    return config.seed if "seed" in config.model_fields_set else bundle.seed


def cmd_sweep(config: RunConfig) -> int:
    """Bounds over the strike sweep for every case; one CSV per case plus the figure table."""
    bundle = _bundle(config)
    seed = _bundle_seed(config, bundle)
    out = _output_dir(config)
    trainer = bundle_trainer(bundle, config.trainer)
    started = time.perf_counter()
    tables = run_sweep(bundle, config.cases, trainer, config.directions(), config.threads, config.strikes, seed)
    files = []
    for table in tables:
        files.append(_write_csv(out / f"sweep_{bundle.name}_{table.case}.csv", case_frame(table)).name)
    files.append(_write_csv(out / f"sweep_{bundle.name}.csv", sweep_frame(tables)).name)
    _write_json(out / f"sweep_{bundle.name}_manifest.json", {
        "config": _config_echo(config),
        "bundle": bundle.model_dump(mode="json"),
        "seed": seed,
        "trainer": trainer.model_dump(mode="json"),
        "files": files,
        "cases": [t.model_dump(mode="json", exclude={"rows"}) for t in tables],
        "seconds": time.perf_counter() - started,
    })
    return EXIT_OK


def cmd_convergence(config: RunConfig) -> int:
    """Per-iteration upper-bound traces of every case at one strike."""
    bundle = _bundle(config)
    seed = _bundle_seed(config, bundle)
    out = _output_dir(config)
    trainer = bundle_trainer(bundle, config.trainer)
    started = time.perf_counter()
    table = run_convergence(bundle, config.strike, config.cases, trainer, config.threads, seed)
    csv = _write_csv(out / f"convergence_{bundle.name}.csv", convergence_frame(table))
    _write_json(out / f"convergence_{bundle.name}_manifest.json", {
        "config": _config_echo(config),
        "seed": seed,
        "strike": table.strike,
        "trainer": trainer.model_dump(mode="json"),
        "finals": table.finals,
        "stability": table.stability,
        "files": [csv.name],
        "seconds": time.perf_counter() - started,
    })
    return EXIT_OK


def cmd_timing(config: RunConfig) -> int:
    """Wall-clock training time per dimension."""
    out = _output_dir(config)
    table = run_timing(config.timing, config.trainer, config.seed)
    csv = _write_csv(out / "timing.csv", timing_frame(table))
    _write_json(out / "timing_manifest.json", {
        "config": _config_echo(config),
        "environment": table.environment,
        "files": [csv.name],
    })
    return EXIT_OK


COMMANDS: Dict[str, Command] = {
    "generate": cmd_generate,
    "bound": cmd_bound,
    "verify": cmd_verify,
    "sweep": cmd_sweep,
    "convergence": cmd_convergence,
    "timing": cmd_timing,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, required=True, help="Run config JSON")
    common.add_argument("--out", type=str, default=None, help="Output directory")
    common.add_argument("--seed", type=int, default=None, help="Root seed")
    common.add_argument("--threads", type=int, default=None, help="Worker threads (1 is bitwise reproducible)")
    common.add_argument("--direction", choices=("upper", "lower", "both"), default=None)

    parser = argparse.ArgumentParser(prog="bounds", description=settings.app_name)
    parser.add_argument("--version", action="version", version=settings.app_version)
    subparsers = parser.add_subparsers(dest="command", required=True)
    for name, command in COMMANDS.items():
        subparsers.add_parser(name, parents=[common], help=(command.__doc__ or "").strip().splitlines()[0])
    return parser


def apply_overrides(config: RunConfig, args: argparse.Namespace) -> RunConfig:
    """Command-line flags win over the config file."""
    overrides = {
        "output_dir": args.out,
        "seed": args.seed,
        "threads": args.threads,
        "direction": args.direction,
    }
    overrides = {k: v for k, v in overrides.items() if v is not None}
    if not overrides:
        return config
    values = config.model_dump(exclude_unset=True)
    values.update(overrides)
    try:
        return RunConfig.model_validate(values)
    except ValidationError as e:
        raise ConfigurationError(f"Invalid command-line override: {e}") from e


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    started = time.perf_counter()
    code = EXIT_UNEXPECTED
    try:
        config = apply_overrides(load_run_config(args.config), args)
        bind_run_context(command=args.command, seed=config.seed)
        logger.info("Command started", config=str(args.config), output_dir=config.output_dir)
        code = COMMANDS[args.command](config)
    except (BoundsError, ValidationError, OSError) as e:
        code = exit_code_for(e)
        logger.error("Command failed", error_type=type(e).__name__, error=str(e), exit_code=code)
        print(f"error: {e}", file=sys.stderr)
    except Exception as e:
        logger.exception("Unhandled exception", error_type=type(e).__name__)
        print(f"unexpected error: {e}", file=sys.stderr)
    finally:
        logger.info("Command finished", exit_code=code, seconds=round(time.perf_counter() - started, 3))
        clear_run_context()
    return code
