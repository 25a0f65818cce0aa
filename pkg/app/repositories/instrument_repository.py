"""
Thread-safe in-memory store of priced instruments.
"""
import json
import threading
from pathlib import Path
from typing import Dict, List, Optional, Tuple

from app.core.exceptions import ConfigurationError, InstrumentNotFoundError
from app.core.logging import get_logger
from app.models.instrument import InstrumentTable, PricedInstrument
from app.models.market import MarketSpec
from app.services.payoff import parse_payoff

logger = get_logger(__name__)

InstrumentKey = Tuple[str, float]


class InstrumentRepository:
    """
    Instrument store keyed by (canonical payoff text, price).

    Payoff texts are canonicalized on insertion, so two spellings of the same
    payoff with the same price collapse into one constraint. The same payoff
    at a different price is kept: contradictory quotes are the feasibility
    check's business, not the store's.
    """

    def __init__(self, dimension: int):
        self._dimension = dimension
        self._instruments: Dict[InstrumentKey, PricedInstrument] = {}
        self._payoff_index: Dict[str, List[InstrumentKey]] = {}
        self._lock = threading.RLock()
        self._logger = logger

    @property
    def dimension(self) -> int:
        return self._dimension

    def canonical(self, payoff: str) -> str:
        """Canonical text of a payoff bound to this store's dimension."""
        return parse_payoff(payoff, self._dimension).text

    def add_instrument(self, instrument: PricedInstrument) -> PricedInstrument:
        """
        Add an instrument, returning the stored copy.

        A duplicate (same canonical payoff and price) returns the existing entry.
        """
        text = self.canonical(instrument.payoff)
        key = (text, float(instrument.price))
        with self._lock:
            existing = self._instruments.get(key)
            if existing is not None:
                self._logger.debug("Duplicate instrument ignored", payoff=text, price=instrument.price)
                return existing
            stored = instrument.model_copy(update={"payoff": text})
            self._instruments[key] = stored
            self._payoff_index.setdefault(text, []).append(key)
            return stored

    def add_many(self, instruments: List[PricedInstrument]) -> List[PricedInstrument]:
        with self._lock:
            return [self.add_instrument(i) for i in instruments]

    def get_by_payoff(self, payoff: str) -> List[PricedInstrument]:
        """
        All stored quotes of a payoff.

        Raises:
            InstrumentNotFoundError: If the payoff has no quote
        """
        text = self.canonical(payoff)
        with self._lock:
            keys = self._payoff_index.get(text)
            if not keys:
                raise InstrumentNotFoundError(f"No instrument with payoff {text}")
            return [self._instruments[k] for k in keys]

    def get_all(self) -> List[PricedInstrument]:
        with self._lock:
            return list(self._instruments.values())

    def count(self) -> int:
        with self._lock:
            return len(self._instruments)

    def to_table(self, market: MarketSpec, references: Optional[List[PricedInstrument]] = None,
                 n_samples: int = 0, seed: Optional[int] = None, config: Optional[dict] = None) -> InstrumentTable:
        with self._lock:
            return InstrumentTable(
                market=market,
                instruments=self.get_all(),
                references=list(references or []),
                n_samples=n_samples,
                seed=seed,
                config=config,
            )

    def save(self, path: Path | str, table: InstrumentTable) -> Path:
        """Write an instrument table as JSON."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(table.model_dump_json(indent=2))
        self._logger.info("Instrument table written", path=str(path), instruments=len(table.instruments))
        return path

    @classmethod
    def load(cls, path: Path | str) -> Tuple["InstrumentRepository", InstrumentTable]:
        """
        Read an instrument table and index its instruments.

        Raises:
            ConfigurationError: If the file is missing or malformed
        """
        path = Path(path)
        try:
            table = InstrumentTable.model_validate(json.loads(path.read_text()))
        except FileNotFoundError as e:
            raise ConfigurationError(f"Instrument table not found: {path}") from e
        except (ValueError, TypeError) as e:
            raise ConfigurationError(f"Malformed instrument table {path}: {e}") from e
        repository = cls(table.market.d)
        repository.add_many(table.instruments)
        return repository, table
