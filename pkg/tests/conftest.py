"""
Pytest configuration and fixtures for the bounds solver.
"""
import json

import pytest

from app.models.market import MarketSpec
from app.models.training import TrainerConfig
from app.repositories.instrument_repository import InstrumentRepository


@pytest.fixture
def e1_market():
    """Three-asset market of the first experiment."""
    return MarketSpec.equicorrelated([10.0, 10.0, 10.0], [0.3, 0.4, 0.5], 0.5, 1.5)


@pytest.fixture
def two_asset_market():
    """Two assets with the first experiment's leading volatilities."""
    return MarketSpec.equicorrelated([10.0, 10.0], [0.3, 0.4], 0.5, 1.5)


@pytest.fixture
def fast_trainer():
    """Reduced training run for the default suite."""
    return TrainerConfig(
        iterations=2_000,
        hidden_layers=2,
        hidden_width=32,
        eval_samples=2 ** 14,
        slack_samples=2 ** 12,
        log_every=0,
        seed=7,
    )


@pytest.fixture
def tiny_trainer():
    """A few hundred steps: enough to exercise the plumbing, not to converge."""
    return TrainerConfig(
        iterations=200,
        hidden_layers=2,
        hidden_width=16,
        eval_samples=2 ** 12,
        slack_samples=2 ** 10,
        log_every=0,
        seed=3,
    )


@pytest.fixture
def instrument_repository():
    """Instrument store for three assets."""
    return InstrumentRepository(3)


@pytest.fixture
def write_config(tmp_path):
    """Write a run config dict to a JSON file and return its path."""
    def _write(payload, name="run.json"):
        path = tmp_path / name
        path.write_text(json.dumps(payload))
        return path
    return _write
