"""
Exact small-instance oracle: the primal problem over couplings of discretized
marginals, solved as a linear program with HiGHS.

    max / min   sum_x f(x) mu(x)
    subject to  slice sums of mu equal the atom masses of every marginal
                |sum_x phi_i(x) mu(x) - p_i| <= eps_i
                mu >= 0

The oracle exists to verify the dual solver on d <= 3, not to scale.
"""
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import sparse
from scipy.optimize import linprog

from app.core.config import settings
from app.core.exceptions import InfeasibleProblemError, InvalidArgumentError, SizeCapExceededError, SolverError
from app.core.logging import get_logger
from app.models.instrument import ConstraintInstrument
from app.models.market import MarketSpec
from app.models.oracle import (
    ActiveConstraint,
    CouplingEntry,
    FeasibilityReport,
    LpDirection,
    LpSolution,
    ViolationEntry,
)
from app.models.payoff import PayoffExpr
from app.services.market_model import DiscreteMarginals, marginal_quantile
from app.services.payoff import eval_payoff, parse_payoff

logger = get_logger(__name__)

MASS_EPS = 1e-12
ACTIVE_EPS = 1e-9
FEASIBILITY_EPS = 1e-9
HIGHS_OPTIONS = {"primal_feasibility_tolerance": 1e-10, "dual_feasibility_tolerance": 1e-10}


@dataclass(frozen=True)
class DiscreteInstance:
    """Per-asset atoms and probabilities; the joint support is the product grid."""

    atoms: Tuple[np.ndarray, ...]
    probabilities: Tuple[np.ndarray, ...]
    spec: Optional[MarketSpec] = None

    @classmethod
    def from_atoms(cls, atoms: Sequence[Sequence[float]], probabilities: Optional[Sequence[Sequence[float]]] = None,
                   spec: Optional[MarketSpec] = None, size_cap: Optional[int] = None) -> "DiscreteInstance":
        """
        Validated instance from explicit atoms (uniform probabilities by default).

        Raises:
            InvalidArgumentError: If probabilities are negative or do not sum to 1
            SizeCapExceededError: If the product grid exceeds the cap
        """
        atoms = tuple(np.asarray(a, dtype=float) for a in atoms)
        if probabilities is None:
            probabilities = [np.full(a.size, 1.0 / a.size) for a in atoms]
        probabilities = tuple(np.asarray(p, dtype=float) for p in probabilities)
        if len(atoms) != len(probabilities) or not atoms:
            raise InvalidArgumentError("need one probability vector per atom grid")
        for j, (a, p) in enumerate(zip(atoms, probabilities), start=1):
            if a.ndim != 1 or a.shape != p.shape or a.size == 0:
                raise InvalidArgumentError(f"asset {j}: atoms and probabilities must be matching non-empty vectors")
            if np.any(p < 0):
                raise InvalidArgumentError(f"asset {j}: negative probability")
            if abs(p.sum() - 1.0) > 1e-12:
                raise InvalidArgumentError(f"asset {j}: probabilities sum to {p.sum()!r}, expected 1")
        if spec is not None and spec.d != len(atoms):
            raise InvalidArgumentError(f"market has {spec.d} assets, instance has {len(atoms)}")
        _check_cap([a.size for a in atoms], size_cap)
        return cls(atoms, probabilities, spec)

    @property
    def d(self) -> int:
        return len(self.atoms)

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(a.size for a in self.atoms)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    def grid_points(self) -> np.ndarray:
        """All product-grid points, (size, d), in C order of the atom indices."""
        mesh = np.meshgrid(*self.atoms, indexing="ij")
        return np.column_stack([m.reshape(-1) for m in mesh])

    def marginals(self) -> DiscreteMarginals:
        return DiscreteMarginals(self.atoms, self.probabilities, self.spec)


def _check_cap(grid_sizes: Sequence[int], size_cap: Optional[int]) -> None:
    cap = size_cap or settings.lp_size_cap
    size = int(np.prod([int(n) for n in grid_sizes]))
    if size > cap:
        raise SizeCapExceededError(f"product grid of {size} atoms exceeds the cap of {cap}")


def discretize(spec: MarketSpec, grid_sizes: Sequence[int], size_cap: Optional[int] = None) -> DiscreteInstance:
    """
    Equal-probability quantile atoms: asset j gets n_j atoms at the
    (k - 0.5) / n_j quantiles, k = 1..n_j.

    Raises:
        InvalidArgumentError: If a grid size is below 2 or counts mismatch
        SizeCapExceededError: If the product grid exceeds the cap
    """
    if len(grid_sizes) != spec.d:
        raise InvalidArgumentError(f"expected {spec.d} grid sizes, got {len(grid_sizes)}")
    if any(int(n) < 2 for n in grid_sizes):
        raise InvalidArgumentError(f"every grid needs at least 2 atoms, got {list(grid_sizes)}")
    _check_cap(grid_sizes, size_cap)
    atoms, probabilities = [], []
    for j, n in enumerate(grid_sizes, start=1):
        levels = (np.arange(1, int(n) + 1) - 0.5) / int(n)
        atoms.append(np.asarray(marginal_quantile(spec, j, levels), dtype=float))
        probabilities.append(np.full(int(n), 1.0 / int(n)))
    return DiscreteInstance(tuple(atoms), tuple(probabilities), spec)


@dataclass
class _Assembly:
    points: np.ndarray
    marginal_rows: sparse.csr_matrix
    marginal_rhs: np.ndarray
    phi: np.ndarray  # (size, I)
    prices: np.ndarray
    bands: np.ndarray
    texts: List[str]


def _bind(instance: DiscreteInstance, payoff: PayoffExpr | str) -> PayoffExpr:
    return parse_payoff(payoff, instance.d) if isinstance(payoff, str) else payoff


def _assemble(instance: DiscreteInstance, constraints: Sequence[ConstraintInstrument],
              tolerances: Optional[Sequence[float]]) -> _Assembly:
    if tolerances is not None and len(tolerances) != len(constraints):
        raise InvalidArgumentError("need one tolerance per constraint")
    points = instance.grid_points()
    size = points.shape[0]
    index = np.indices(instance.shape).reshape(instance.d, size)
    rows, offset = [], 0
    for j in range(instance.d):
        rows.append(offset + index[j])
        offset += instance.shape[j]
    marginal_rows = sparse.csr_matrix(
        (np.ones(size * instance.d), (np.concatenate(rows), np.tile(np.arange(size), instance.d))),
        shape=(offset, size),
    )
    marginal_rhs = np.concatenate(instance.probabilities)
    payoffs = [_bind(instance, c.payoff) for c in constraints]
    phi = np.column_stack([eval_payoff(p, points) for p in payoffs]) if payoffs else np.zeros((size, 0))
    prices = np.array([c.price for c in constraints], dtype=float)
    if tolerances is not None:
        bands = np.asarray(tolerances, dtype=float)
    else:
        bands = np.array([c.band() for c in constraints], dtype=float)
    if np.any(bands < 0):
        raise InvalidArgumentError("price tolerances must be non-negative")
    return _Assembly(points, marginal_rows, marginal_rhs, phi, prices, bands, [p.text for p in payoffs])


def _coupling(mass: np.ndarray, shape: Tuple[int, ...]) -> List[CouplingEntry]:
    support = np.flatnonzero(mass > MASS_EPS)
    atoms = np.unravel_index(support, shape)
    return [CouplingEntry(atoms=[int(a[k]) for a in atoms], mass=float(mass[s])) for k, s in enumerate(support)]


def _linprog(cost, a_ub, b_ub, a_eq, b_eq, method: str):
    try:
        return linprog(cost, A_ub=a_ub, b_ub=b_ub, A_eq=a_eq, b_eq=b_eq, bounds=(0, None),
                       method=method, options=HIGHS_OPTIONS)
    except Exception as e:
        logger.error("Unexpected error in LP solver", method=method, variables=len(cost), error=str(e))
        raise SolverError(f"LP solver {method} failed: {e}") from e


def solve_primal(instance: DiscreteInstance, target: PayoffExpr | str,
                 constraints: Sequence[ConstraintInstrument] = (), direction: LpDirection | str = LpDirection.MAX,
                 tolerances: Optional[Sequence[float]] = None, method: str = "highs-ds") -> LpSolution:
    """
    Maximize or minimize E_mu[f] over couplings of the instance marginals
    consistent with the price bands.

    Raises:
        InfeasibleProblemError: If no coupling meets the bands (carries the phase-one report)
    """
    direction = LpDirection(direction)
    target_expr = _bind(instance, target)
    data = _assemble(instance, constraints, tolerances)
    f = eval_payoff(target_expr, data.points)

    exact = data.bands == 0.0
    a_eq = sparse.vstack([data.marginal_rows, sparse.csr_matrix(data.phi[:, exact].T)]).tocsr()
    b_eq = np.concatenate([data.marginal_rhs, data.prices[exact]])
    banded = ~exact
    a_ub = b_ub = None
    if banded.any():
        phi_t = sparse.csr_matrix(data.phi[:, banded].T)
        a_ub = sparse.vstack([phi_t, -phi_t]).tocsr()
        b_ub = np.concatenate([data.prices[banded] + data.bands[banded], -(data.prices[banded] - data.bands[banded])])

    cost = -f if direction == LpDirection.MAX else f
    res = _linprog(cost, a_ub, b_ub, a_eq, b_eq, method)
    rows = a_eq.shape[0] + (a_ub.shape[0] if a_ub is not None else 0)
    logger.info("LP solved", variables=instance.size, rows=rows, status=res.status, direction=direction.value)
    if res.status == 2:
        report = check_feasibility(instance, constraints, tolerances)
        raise InfeasibleProblemError(f"price constraints admit no coupling: {report.message}", report)
    if res.status != 0:
        raise SolverError(f"LP solver failed: {res.message}")

    mass = np.clip(res.x, 0.0, None)
    values = data.phi.T @ mass
    active = []
    for text, price, band, value in zip(data.texts, data.prices, data.bands, values):
        if band == 0.0:
            side = "equality"
        elif abs(value - (price + band)) < ACTIVE_EPS:
            side = "upper"
        elif abs(value - (price - band)) < ACTIVE_EPS:
            side = "lower"
        else:
            continue
        active.append(ActiveConstraint(payoff=text, price=float(price), tolerance=float(band),
                                       value=float(value), side=side))
    residual = float(np.max(np.abs(data.marginal_rows @ mass - data.marginal_rhs)))
    return LpSolution(
        direction=direction,
        target=target_expr.text,
        value=float(f @ mass),
        status=res.message,
        variables=instance.size,
        rows=rows,
        marginal_residual=residual,
        active_constraints=active,
        coupling=_coupling(mass, instance.shape),
    )


def check_feasibility(instance: DiscreteInstance, constraints: Sequence[ConstraintInstrument] = (),
                      tolerances: Optional[Sequence[float]] = None, method: str = "highs-ds") -> FeasibilityReport:
    """
    Elastic phase one: minimize the total violation of the price bands over
    couplings of the instance marginals.

    A positive minimum means no coupling reproduces the prices, i.e. the
    discretized market admits a uniform strong arbitrage.
    """
    data = _assemble(instance, constraints, tolerances)
    size = data.points.shape[0]
    count = len(data.prices)
    if count == 0:
        product = np.ones(1)
        for p in instance.probabilities:
            product = np.multiply.outer(product, p)
        return FeasibilityReport(feasible=True, total_violation=0.0, witness=_coupling(product.reshape(-1), instance.shape),
                                 message="no price constraints; the independent coupling is a witness")

    phi_t = sparse.csr_matrix(data.phi.T)
    identity = sparse.identity(count, format="csr")
    zeros = sparse.csr_matrix((count, count))
    # variables: mu (size), s_plus (count), s_minus (count)
    a_ub = sparse.vstack([
        sparse.hstack([phi_t, -identity, zeros]),
        sparse.hstack([-phi_t, zeros, -identity]),
    ]).tocsr()
    b_ub = np.concatenate([data.prices + data.bands, -(data.prices - data.bands)])
    a_eq = sparse.hstack([data.marginal_rows, sparse.csr_matrix((data.marginal_rows.shape[0], 2 * count))]).tocsr()
    cost = np.concatenate([np.zeros(size), np.ones(2 * count)])
    res = _linprog(cost, a_ub, b_ub, a_eq, data.marginal_rhs, method)
    if res.status != 0:
        raise SolverError(f"phase-one LP failed: {res.message}")

    slack = res.x[size:size + count] + res.x[size + count:]
    total = float(slack.sum())
    violations = [ViolationEntry(payoff=t, price=float(p), tolerance=float(b), violation=float(s))
                  for t, p, b, s in zip(data.texts, data.prices, data.bands, slack) if s > FEASIBILITY_EPS]
    feasible = total <= FEASIBILITY_EPS
    if feasible:
        message = "a coupling reproduces every price within its band"
        witness = _coupling(np.clip(res.x[:size], 0.0, None), instance.shape)
    else:
        names = ", ".join(f"{v.payoff} @ {v.price:g}" for v in violations)
        message = f"minimum total band violation {total:.6g}; violated: {names}"
        witness = []
    logger.info("Feasibility checked", feasible=feasible, total_violation=total, constraints=count)
    return FeasibilityReport(feasible=feasible, total_violation=total, violations=violations,
                             witness=witness, message=message)
