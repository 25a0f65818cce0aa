"""
Synthetic benchmark market: lognormal marginals coupled by a Gaussian copula.

Log-returns are normal with the zero-rate risk-neutral drift, so every marginal
has mean s0[j]. Payoffs and networks work on prices; the normal variates are an
internal sampling detail.
"""
from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np
from scipy.stats import norm

from app.core.exceptions import FactorizationError, InvalidArgumentError
from app.core.logging import get_logger
from app.core.seeding import make_rng
from app.models.market import MarketSpec, SampleBatch, SampleSource

logger = get_logger(__name__)


def correlation_factor(spec: MarketSpec) -> np.ndarray:
    """
    Lower factor L with L @ L.T == rho.

    Cholesky is tried first; a semidefinite matrix (for example perfect
    correlation) falls back to a symmetric eigendecomposition.

    Raises:
        FactorizationError: If rho is not positive semidefinite
    """
    rho = spec.rho_array
    try:
        return np.linalg.cholesky(rho)
    except np.linalg.LinAlgError:
        eigenvalues, eigenvectors = np.linalg.eigh(rho)
        if eigenvalues.min() < -1e-10:
            raise FactorizationError(
                f"correlation matrix is not positive semidefinite (min eigenvalue {eigenvalues.min():.3e})"
            )
        return eigenvectors * np.sqrt(np.clip(eigenvalues, 0.0, None))


def _to_prices(spec: MarketSpec, z: np.ndarray) -> np.ndarray:
    sigma = spec.sigma_array
    vol = sigma * np.sqrt(spec.maturity)
    return spec.s0_array * np.exp(-0.5 * vol ** 2 + vol * z)


def _check_count(n: int) -> None:
    if int(n) < 1:
        raise InvalidArgumentError(f"sample count must be at least 1, got {n}")


def sample_copula(spec: MarketSpec, n: int, seed: int) -> SampleBatch:
    """
    Draw n price vectors from the benchmark Gaussian-copula model.

    Raises:
        InvalidArgumentError: If n < 1
        FactorizationError: If rho is not positive semidefinite
    """
    _check_count(n)
    factor = correlation_factor(spec)
    rng = make_rng(seed, SampleSource.COPULA.value)
    z = rng.standard_normal((int(n), spec.d)) @ factor.T
    return SampleBatch(values=_to_prices(spec, z), seed=seed, source=SampleSource.COPULA)


def sample_reference(spec: MarketSpec, n: int, seed: int) -> SampleBatch:
    """Draw n price vectors from the product of the marginals (independent columns)."""
    _check_count(n)
    rng = make_rng(seed, SampleSource.REFERENCE.value)
    z = rng.standard_normal((int(n), spec.d))
    return SampleBatch(values=_to_prices(spec, z), seed=seed, source=SampleSource.REFERENCE)


def sample_discrete(spec: MarketSpec, atoms: Sequence[np.ndarray], n: int, seed: int) -> SampleBatch:
    """
    Gaussian-copula samples snapped onto equal-probability atoms.

    Each column is mapped to atoms by rank, so when n is a multiple of every
    grid size each atom receives exactly n / n_j rows and the empirical coupling
    has the atom marginals exactly.
    """
    _check_count(n)
    if len(atoms) != spec.d:
        raise InvalidArgumentError(f"expected {spec.d} atom grids, got {len(atoms)}")
    factor = correlation_factor(spec)
    rng = make_rng(seed, SampleSource.DISCRETE.value)
    z = rng.standard_normal((int(n), spec.d)) @ factor.T
    values = np.empty_like(z)
    for j, grid in enumerate(atoms):
        grid = np.asarray(grid, dtype=float)
        ranks = np.empty(int(n), dtype=np.int64)
        ranks[np.argsort(z[:, j], kind="stable")] = np.arange(int(n))
        values[:, j] = grid[(ranks * grid.size) // int(n)]
    return SampleBatch(values=values, seed=seed, source=SampleSource.DISCRETE)


def marginal_quantile(spec: MarketSpec, j: int, u) -> np.ndarray | float:
    """
    u-quantile of the lognormal marginal of asset j (1-based).

    Raises:
        InvalidArgumentError: If u is outside (0, 1) or j is not an asset index
    """
    _check_asset(spec, j)
    u_arr = np.asarray(u, dtype=float)
    if np.any(~(u_arr > 0.0) | ~(u_arr < 1.0)):
        raise InvalidArgumentError("quantile level must lie strictly between 0 and 1")
    vol = spec.sigma[j - 1] * np.sqrt(spec.maturity)
    q = spec.s0[j - 1] * np.exp(-0.5 * vol ** 2 + vol * norm.ppf(u_arr))
    return float(q) if np.ndim(q) == 0 else q


def marginal_cdf(spec: MarketSpec, j: int, x) -> np.ndarray | float:
    """Analytic CDF of the lognormal marginal of asset j (1-based)."""
    _check_asset(spec, j)
    x_arr = np.asarray(x, dtype=float)
    s0 = spec.s0[j - 1]
    vol = spec.sigma[j - 1] * np.sqrt(spec.maturity)
    with np.errstate(divide="ignore"):
        log_moneyness = np.log(np.where(x_arr > 0, x_arr, np.nan) / s0)
    if vol == 0.0:
        out = np.where(x_arr >= s0, 1.0, 0.0)
    else:
        out = norm.cdf((log_moneyness + 0.5 * vol ** 2) / vol)
        out = np.where(x_arr > 0, out, 0.0)
    return float(out) if np.ndim(out) == 0 else out


def _check_asset(spec: MarketSpec, j: int) -> None:
    if not 1 <= int(j) <= spec.d:
        raise InvalidArgumentError(f"asset index {j} outside 1..{spec.d}")


class Marginals(Protocol):
    """Marginal laws the dual solver integrates against."""

    @property
    def d(self) -> int: ...

    @property
    def scale(self) -> np.ndarray: ...

    def sample_reference(self, n: int, seed: int) -> SampleBatch: ...

    def sample_coupled(self, n: int, seed: int) -> SampleBatch: ...


@dataclass(frozen=True)
class LognormalMarginals:
    """Continuous lognormal marginals of a benchmark market."""

    spec: MarketSpec

    @property
    def d(self) -> int:
        return self.spec.d

    @property
    def scale(self) -> np.ndarray:
        return self.spec.s0_array

    def sample_reference(self, n: int, seed: int) -> SampleBatch:
        return sample_reference(self.spec, n, seed)

    def sample_coupled(self, n: int, seed: int) -> SampleBatch:
        return sample_copula(self.spec, n, seed)


@dataclass(frozen=True)
class DiscreteMarginals:
    """Finitely supported marginals (atoms and probabilities per asset)."""

    atoms: tuple
    probabilities: tuple
    spec: MarketSpec | None = None

    @property
    def d(self) -> int:
        return len(self.atoms)

    @property
    def scale(self) -> np.ndarray:
        if self.spec is not None:
            return self.spec.s0_array
        return np.array([float(np.dot(a, p)) for a, p in zip(self.atoms, self.probabilities)])

    def sample_reference(self, n: int, seed: int) -> SampleBatch:
        _check_count(n)
        rng = make_rng(seed, SampleSource.REFERENCE.value)
        columns = [rng.choice(np.asarray(a), size=int(n), p=np.asarray(p)) for a, p in zip(self.atoms, self.probabilities)]
        return SampleBatch(values=np.column_stack(columns), seed=seed, source=SampleSource.REFERENCE)

    def sample_coupled(self, n: int, seed: int) -> SampleBatch:
        if self.spec is None:
            return self.sample_reference(n, seed)
        return sample_discrete(self.spec, self.atoms, n, seed)
