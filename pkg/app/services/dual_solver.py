"""
Penalized neural dual for model-free bounds.

The upper bound sup over couplings of E[f] is approached from the hedging side:

    inf  sum_j E_nu_j[psi_j] + sum_i b_i p_i
         + E_theta[ beta_gamma(f - sum_j psi_j(x_j) - sum_i b_i phi_i(x)) ]

with one ReLU network per asset for psi_j, b free, beta_gamma(y) = gamma*max(y, 0)^2
and theta the product of the marginals by default. Columns of a theta batch are
then nu_j samples, so one batch serves both integrals. Lower bounds train the
upper bound of -f and flip the sign.
"""
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from app.core.config import settings
from app.core.exceptions import DimensionMismatchError, InvalidArgumentError, TrainingAbortedError
from app.core.logging import get_logger
from app.core.seeding import derive_seed
from app.models.instrument import ConstraintInstrument
from app.models.market import MarketSpec, SampleBatch
from app.models.payoff import PayoffExpr
from app.models.training import BoundResult, ConstraintWeight, Direction, SlackStats, TrainerConfig
from app.services.market_model import LognormalMarginals, Marginals
from app.services.nn_core import (
    AdamState,
    ForwardTape,
    LossTape,
    Mlp,
    adam_step,
    forward,
    grad,
    init_xavier,
    load_checkpoint,
    save_checkpoint,
)
from app.services.payoff import eval_many, eval_payoff, parse_payoff

logger = get_logger(__name__)

SLACK_QUANTILES = (0.01, 0.05, 0.5, 0.95, 0.99)


@dataclass(frozen=True)
class BoundProblem:
    """Target payoff, traded constraints and marginals of one bound computation."""

    marginals: Marginals
    target: PayoffExpr
    constraints: Tuple[PayoffExpr, ...] = ()
    prices: Tuple[float, ...] = ()
    direction: Direction = Direction.UPPER

    @property
    def d(self) -> int:
        return self.marginals.d

    @property
    def price_vector(self) -> np.ndarray:
        return np.asarray(self.prices, dtype=float)

    def with_target(self, target: PayoffExpr, direction: Direction) -> "BoundProblem":
        return replace(self, target=target, direction=direction)


def bound_problem(market: MarketSpec | Marginals, target: PayoffExpr | str,
                  constraints: Sequence[ConstraintInstrument | Tuple[PayoffExpr | str, float]] = (),
                  direction: Direction | str = Direction.UPPER) -> BoundProblem:
    """
    Assemble a bound problem, binding payoff texts and deduplicating constraints.

    Constraints are deduplicated by (canonical payoff text, price).

    Raises:
        DimensionMismatchError: If a payoff is bound to another dimension
    """
    marginals = LognormalMarginals(market) if isinstance(market, MarketSpec) else market
    d = marginals.d
    target_expr = _bind_payoff(target, d)
    seen = set()
    payoffs: List[PayoffExpr] = []
    prices: List[float] = []
    for item in constraints:
        if isinstance(item, ConstraintInstrument):
            payoff, price = item.payoff, item.price
        else:
            payoff, price = item
        expr = _bind_payoff(payoff, d)
        key = (expr.text, float(price))
        if key in seen:
            continue
        seen.add(key)
        payoffs.append(expr)
        prices.append(float(price))
    return BoundProblem(marginals, target_expr, tuple(payoffs), tuple(prices), Direction(direction))


def _bind_payoff(payoff: PayoffExpr | str, d: int) -> PayoffExpr:
    if isinstance(payoff, str):
        return parse_payoff(payoff, d)
    if payoff.dimension != d:
        raise DimensionMismatchError(f"payoff {payoff.text} bound to {payoff.dimension} assets, problem has {d}")
    return payoff


@dataclass
class DualState:
    """Per-asset networks psi_j, constraint weights b and optimizer moments."""

    net: Mlp
    b: np.ndarray
    adam: AdamState
    trace: List[float] = field(default_factory=list)

    @property
    def step(self) -> int:
        return self.adam.step

    def parameters(self) -> List[np.ndarray]:
        return self.net.parameters() + [self.b]


def init_dual_state(problem: BoundProblem, config: TrainerConfig) -> DualState:
    net = init_xavier(config.widths, derive_seed(config.seed, "init"), count=problem.d, variant=config.xavier)
    b = np.zeros(len(problem.constraints))
    return DualState(net=net, b=b, adam=AdamState.zeros_like(net.parameters() + [b]))


def _hedge_inputs(problem: BoundProblem, values: np.ndarray) -> np.ndarray:
    if values.ndim != 2 or values.shape[1] != problem.d:
        raise DimensionMismatchError(f"batch of shape {values.shape} for a {problem.d}-asset problem")
    return values / problem.marginals.scale


def objective_batch(state: DualState, batch: SampleBatch, problem: BoundProblem, gamma: float,
                    marginal_batch: Optional[SampleBatch] = None) -> LossTape:
    """
    Penalized dual objective on one theta batch, with its gradient tape.

    ``marginal_batch`` supplies separate nu_j samples for the hedging cost when
    theta is not the product of the marginals.

    Raises:
        DimensionMismatchError: If the batch width differs from the problem dimension
    """
    values = batch.values
    tape = ForwardTape(state.net, _hedge_inputs(problem, values))
    psi = tape.outputs
    target = eval_payoff(problem.target, values)
    phi = eval_many(problem.constraints, values)
    prices = problem.price_vector

    residual = target - psi.sum(axis=1) - phi @ state.b
    excess = np.maximum(residual, 0.0)
    penalty = gamma * excess ** 2
    penalty_slope = 2.0 * gamma * excess
    n = values.shape[0]

    penalty_upstream = np.repeat((-penalty_slope / n)[:, None], problem.d, axis=1)
    if marginal_batch is None:
        cost = psi.sum(axis=1).mean()
        parts = [(tape, penalty_upstream + 1.0 / n)]
    else:
        marginal_tape = ForwardTape(state.net, _hedge_inputs(problem, marginal_batch.values))
        m = marginal_batch.values.shape[0]
        cost = marginal_tape.outputs.sum(axis=1).mean()
        parts = [(marginal_tape, np.full((m, problem.d), 1.0 / m)), (tape, penalty_upstream)]

    loss = float(cost + prices @ state.b + penalty.mean())
    grad_b = prices - phi.T @ penalty_slope / n
    return LossTape(loss=loss, parts=parts, grad_b=grad_b)


@dataclass
class ObjectiveEstimate:
    objective: float
    primal_estimate: float
    density_mass: float


def evaluate_objective(state: DualState, problem: BoundProblem, gamma: float, n: int, seed: int,
                       reference: str = "product", chunk_size: Optional[int] = None) -> ObjectiveEstimate:
    """
    Penalized objective on n fresh reference samples, evaluated in chunks.

    Also returns the penalty-implied primal value E_theta[beta'(f - h) f] and
    the implied density mass E_theta[beta'(f - h)].
    """
    chunk_size = chunk_size or settings.eval_chunk_size
    sampler = problem.marginals.sample_coupled if reference == "copula" else problem.marginals.sample_reference
    theta = sampler(n, derive_seed(seed, "fresh", "theta"))
    marginal = theta if reference != "copula" else problem.marginals.sample_reference(n, derive_seed(seed, "fresh", "marginal"))

    cost_sum = penalty_sum = primal_sum = mass_sum = 0.0
    for start in range(0, n, chunk_size):
        rows = theta.values[start:start + chunk_size]
        psi = forward(state.net, _hedge_inputs(problem, rows))
        target = eval_payoff(problem.target, rows)
        residual = target - psi.sum(axis=1) - eval_many(problem.constraints, rows) @ state.b
        excess = np.maximum(residual, 0.0)
        penalty_sum += float((gamma * excess ** 2).sum())
        slope = 2.0 * gamma * excess
        primal_sum += float((slope * target).sum())
        mass_sum += float(slope.sum())
        if marginal is theta:
            cost_sum += float(psi.sum())
        else:
            cost_sum += float(forward(state.net, _hedge_inputs(problem, marginal.values[start:start + chunk_size])).sum())
    objective = cost_sum / n + float(problem.price_vector @ state.b) + penalty_sum / n
    return ObjectiveEstimate(objective=objective, primal_estimate=primal_sum / n, density_mass=mass_sum / n)


def slack_diagnostic(state: DualState, problem: BoundProblem, n: int, seed: int,
                     tolerance: float = 1e-3) -> SlackStats:
    """
    Residual r(x) = sum_j psi_j(x_j) + sum_i b_i phi_i(x) - f(x) on coupled samples.

    At the optimum r vanishes on the support of the optimal coupling; r < -tol
    marks superhedging violations left by the penalty relaxation.
    """
    batch = problem.marginals.sample_coupled(n, seed)
    values = batch.values
    hedge = forward(state.net, _hedge_inputs(problem, values)).sum(axis=1)
    hedge = hedge + eval_many(problem.constraints, values) @ state.b
    residual = hedge - eval_payoff(problem.target, values)
    violations = residual < -tolerance
    return SlackStats(
        n=int(n),
        tolerance=tolerance,
        mean=float(residual.mean()),
        std=float(residual.std()),
        min=float(residual.min()),
        max=float(residual.max()),
        quantiles={f"q{int(round(q * 100)):02d}": float(np.quantile(residual, q)) for q in SLACK_QUANTILES},
        violation_fraction=float(violations.mean()),
        max_violation=float(max(0.0, -residual.min())),
    )


def _run_identity(problem: BoundProblem, config: TrainerConfig) -> dict:
    """Settings a checkpoint must share with the run that resumes it."""
    return {
        "target": problem.target.text,
        "seed": config.seed,
        "gamma": config.gamma,
        "batch_size": config.batch_size,
        "reference": config.reference,
    }


def _restore_or_init(problem: BoundProblem, config: TrainerConfig) -> DualState:
    if config.checkpoint_path and Path(config.checkpoint_path).exists():
        net, b, adam, extra = load_checkpoint(config.checkpoint_path)
        if net.count != problem.d or b.shape != (len(problem.constraints),):
            raise InvalidArgumentError("checkpoint does not match the problem dimensions")
        expected = _run_identity(problem, config)
        recorded = {key: extra.get(key) for key in expected}
        if recorded != expected:
            raise InvalidArgumentError(f"checkpoint was written by another run: {recorded} != {expected}")
        if adam.step > config.iterations:
            raise InvalidArgumentError(f"checkpoint is at step {adam.step}, past the {config.iterations} iterations requested")
        logger.info("Resuming from checkpoint", path=config.checkpoint_path, step=adam.step)
        return DualState(net=net, b=b, adam=adam, trace=list(extra.get("trace", [])))
    return init_dual_state(problem, config)


def fit(problem: BoundProblem, config: TrainerConfig, state: Optional[DualState] = None) -> DualState:
    """
    Run Adam on fresh theta batches until ``config.iterations`` steps are done.

    Minibatch seeds are derived per iteration, so a resumed run continues the
    exact stream of an uninterrupted one.

    Raises:
        TrainingAbortedError: On a non-finite loss
    """
    state = state or _restore_or_init(problem, config)
    marginals = problem.marginals
    for iteration in range(state.step, config.iterations):
        lr = config.learning_rate.rate_at(iteration, config.iterations)
        if config.reference == "copula":
            batch = marginals.sample_coupled(config.batch_size, derive_seed(config.seed, "theta", iteration))
            marginal_batch = marginals.sample_reference(config.batch_size, derive_seed(config.seed, "marginal", iteration))
        else:
            batch = marginals.sample_reference(config.batch_size, derive_seed(config.seed, "theta", iteration))
            marginal_batch = None
        loss_tape = objective_batch(state, batch, problem, config.gamma, marginal_batch)
        if not np.isfinite(loss_tape.loss):
            logger.error("Training aborted", iteration=iteration + 1, loss=loss_tape.loss)
            raise TrainingAbortedError("non-finite loss", iteration + 1)
        gradients = grad(loss_tape)
        adam_step(state.parameters(), gradients.flat(), state.adam, lr)
        state.trace.append(loss_tape.loss)

        step = iteration + 1
        if config.log_every and step % config.log_every == 0:
            logger.info("Training progress", iteration=step, loss=loss_tape.loss, learning_rate=lr)
        if config.checkpoint_path and config.checkpoint_every and step % config.checkpoint_every == 0:
            save_checkpoint(config.checkpoint_path, state.net, state.b, state.adam,
                            {**_run_identity(problem, config), "trace": state.trace})
    return state


def _train_upper(problem: BoundProblem, config: TrainerConfig) -> Tuple[BoundResult, DualState]:
    started = time.perf_counter()
    state = fit(problem, config)
    estimate = evaluate_objective(state, problem, config.gamma, config.eval_samples,
                                  derive_seed(config.seed, "evaluate"), config.reference)
    slack = slack_diagnostic(state, problem, config.slack_samples, derive_seed(config.seed, "slack"),
                             config.slack_tolerance)
    if not np.isfinite(estimate.objective):
        raise TrainingAbortedError("non-finite final objective", config.iterations)
    elapsed = time.perf_counter() - started
    weights = [ConstraintWeight(payoff=p.text, price=price, weight=float(w))
               for p, price, w in zip(problem.constraints, problem.prices, state.b)]
    result = BoundResult(
        direction=Direction.UPPER,
        target=problem.target.text,
        bound=estimate.objective,
        fresh_eval=estimate.objective,
        primal_estimate=estimate.primal_estimate,
        density_mass=estimate.density_mass,
        trace=list(state.trace),
        slack_stats=slack,
        b_values=weights,
        gamma=config.gamma,
        iterations=config.iterations,
        elapsed_seconds=elapsed,
        config=config,
    )
    logger.info("Bound computed", target=result.target, bound=result.bound, primal=result.primal_estimate,
                violation_fraction=slack.violation_fraction, seconds=round(elapsed, 3))
    return result, state


def train(problem: BoundProblem, config: TrainerConfig) -> BoundResult:
    """
    Train the penalized dual and report the bound in the problem's direction.

    The bound is the objective re-estimated on ``eval_samples`` fresh reference
    samples with the final parameters; the per-iteration minibatch losses are
    kept as the trace.

    Raises:
        TrainingAbortedError: On a non-finite loss (with the iteration index)
    """
    if problem.direction == Direction.LOWER:
        return lower_bound(problem, config)
    return _train_upper(problem, config)[0]


def lower_bound(problem: BoundProblem, config: TrainerConfig) -> BoundResult:
    """inf E[f] = -sup E[-f]: train the upper bound of -f and negate it."""
    negated = problem.with_target(problem.target.negated(), Direction.UPPER)
    upper, _ = _train_upper(negated, config)
    return upper.model_copy(update={
        "direction": Direction.LOWER,
        "target": problem.target.text,
        "bound": -upper.bound,
        "fresh_eval": -upper.fresh_eval,
        "primal_estimate": -upper.primal_estimate,
        "trace": [-v for v in upper.trace],
        "b_values": [w.model_copy(update={"weight": -w.weight}) for w in upper.b_values],
    })
