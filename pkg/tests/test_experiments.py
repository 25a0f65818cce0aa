"""
Tests for experiment bundles, the sweep runner and the timing harness.
"""
import json
from pathlib import Path

import pytest
from pydantic import ValidationError

from app.core.exceptions import ConfigurationError, ExperimentJobError, InvalidArgumentError, TrainingAbortedError
from app.models.experiment import ExperimentBundle, TimingConfig, render_template
from app.models.training import Direction, TrainerConfig
from app.services.experiments import (
    bundle_trainer,
    case_notes,
    convergence_frame,
    load_bundle,
    price_bundle,
    render_case,
    resolve_constraints,
    run_case,
    run_convergence,
    run_sweep,
    run_timing,
    sweep_frame,
    timing_frame,
    timing_market,
    trace_stability,
)

CONFIGS = Path(__file__).resolve().parents[1] / "configs"

TINY_TRAINER = {
    "iterations": 40,
    "hidden_layers": 1,
    "hidden_width": 8,
    "eval_samples": 1024,
    "slack_samples": 256,
    "log_every": 0,
}


@pytest.fixture
def tiny_bundle():
    """Two assets, two strikes, a base case and one constrained case."""
    return ExperimentBundle.model_validate({
        "name": "tiny",
        "market": {"s0": [10.0, 10.0], "sigma": [0.3, 0.4], "rho": [[1.0, 0.5], [0.5, 1.0]], "maturity": 1.5},
        "target": "(max(x1, x2) - {K})^+",
        "target_strikes": [9, 11],
        "convergence_strike": 9,
        "seed": 5,
        "reference_samples": 2_000,
        "trainer": TINY_TRAINER,
        "cases": [
            {"name": "base"},
            {"name": "basket", "extends": "base",
             "families": [{"payoff": "(avg(x1, x2) - {K})^+", "strikes": [10]}],
             "notes": ["single basket"]},
            {"name": "both", "extends": "basket",
             "families": [{"payoff": "(min(x1, x2) - {K})^+", "strikes": [9, 10]},
                          {"payoff": "(avg(x1,x2) - {K})^+", "strikes": [10]}]},
        ],
    })


class TestBundles:
    """Test cases for the checked-in experiment bundles."""

    @pytest.mark.parametrize("case, count", [
        ("E1.0", 0), ("E1.1", 1), ("E1.2", 2), ("E1.3", 5), ("E1.4", 7),
        ("E1.5", 5), ("E1.6", 9), ("E1.7", 14), ("E1.8", 16),
    ])
    def test_experiment1_nesting(self, case, count):
        bundle = load_bundle(CONFIGS / "experiment1.json")
        assert len(render_case(bundle, case)) == count

    @pytest.mark.parametrize("case, count", [
        ("E2.0", 0), ("E2.1", 8), ("E2.2", 16), ("E2.3", 40), ("E2.4", 24),
        ("E2.5", 32), ("E2.6", 40), ("E2.7", 64), ("E2.8", 24),
    ])
    def test_experiment2_nesting(self, case, count):
        bundle = load_bundle(CONFIGS / "experiment2.json")
        assert len(render_case(bundle, case)) == count

    @pytest.mark.parametrize("case, count", [
        ("E2.0", 0), ("E2.1", 3), ("E2.2", 6), ("E2.3", 15), ("E2.4", 9),
        ("E2.5", 12), ("E2.6", 15), ("E2.7", 24), ("E2.8", 9),
    ])
    def test_experiment2_desk_nesting(self, case, count):
        bundle = load_bundle(CONFIGS / "experiment2_desk.json")
        assert len(render_case(bundle, case)) == count

    def test_experiment2_desk_is_a_subset(self):
        """Same market and target; every desk instrument is quoted in the full bundle."""
        full = load_bundle(CONFIGS / "experiment2.json")
        desk = load_bundle(CONFIGS / "experiment2_desk.json")
        assert desk.market == full.market
        assert desk.target == full.target
        assert set(desk.target_strikes) <= set(full.target_strikes)
        for case in desk.cases:
            assert set(render_case(desk, case)) <= set(render_case(full, case.name))

    def test_cases_extend_their_parent(self):
        bundle = load_bundle(CONFIGS / "experiment1.json")
        for case in bundle.cases:
            if case.extends:
                parent = render_case(bundle, case.extends)
                assert render_case(bundle, case)[:len(parent)] == parent

    def test_experiment1_markets(self):
        bundle = load_bundle(CONFIGS / "experiment1.json")
        assert bundle.market.d == 3
        assert bundle.market.sigma == [0.3, 0.4, 0.5]
        assert bundle.target_strikes == [float(k) for k in range(2, 15)]
        assert render_template(bundle.target, 6) == "(max(x1, x2, x3) - 6)^+"

    def test_experiment2_market_is_six_assets(self):
        bundle = load_bundle(CONFIGS / "experiment2.json")
        assert bundle.market.d == 6
        assert render_template(bundle.target, 6.5) == "(avg(x1, x2, x3, x4, x5, x6) - 6.5)^+"

    def test_notes_are_inherited(self):
        bundle = load_bundle(CONFIGS / "experiment1.json")
        assert case_notes(bundle, "E1.1") == []
        assert len(case_notes(bundle, "E1.2")) == 1
        assert case_notes(bundle, "E1.4") == case_notes(bundle, "E1.2")


class TestBundleValidation:
    """Test cases for bundle validation."""

    def _payload(self, **overrides):
        payload = {
            "name": "x",
            "market": {"s0": [10.0], "sigma": [0.3], "rho": [[1.0]], "maturity": 1.0},
            "target": "(x1 - {K})^+",
            "target_strikes": [10],
            "cases": [{"name": "base"}],
        }
        payload.update(overrides)
        return payload

    def test_target_needs_placeholder(self):
        with pytest.raises(ValidationError):
            ExperimentBundle.model_validate(self._payload(target="(x1 - 10)^+"))

    def test_family_needs_placeholder(self):
        cases = [{"name": "base", "families": [{"payoff": "(x1 - 10)^+", "strikes": [1]}]}]
        with pytest.raises(ValidationError):
            ExperimentBundle.model_validate(self._payload(cases=cases))

    def test_duplicate_case_names(self):
        with pytest.raises(ValidationError):
            ExperimentBundle.model_validate(self._payload(cases=[{"name": "a"}, {"name": "a"}]))

    def test_forward_extends_rejected(self):
        cases = [{"name": "a", "extends": "b"}, {"name": "b"}]
        with pytest.raises(ValidationError):
            ExperimentBundle.model_validate(self._payload(cases=cases))

    def test_unknown_key_rejected(self):
        with pytest.raises(ValidationError):
            ExperimentBundle.model_validate(self._payload(strikes=[1]))

    def test_load_missing_bundle(self, tmp_path):
        with pytest.raises(ConfigurationError):
            load_bundle(tmp_path / "absent.json")

    def test_load_malformed_bundle(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{not json")
        with pytest.raises(ConfigurationError):
            load_bundle(path)

    def test_load_invalid_bundle(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps(self._payload(cases=[])))
        with pytest.raises(ConfigurationError):
            load_bundle(path)


class TestConstraintResolution:
    """Test cases for case lineage and rendering."""

    def test_inherited_first(self, tiny_bundle):
        assert resolve_constraints(tiny_bundle, "both") == [
            "(avg(x1, x2) - 10)^+",
            "(min(x1, x2) - 9)^+",
            "(min(x1, x2) - 10)^+",
            "(avg(x1,x2) - 10)^+",
        ]

    def test_canonical_duplicates_dropped(self, tiny_bundle):
        assert render_case(tiny_bundle, "both") == [
            "(avg(x1, x2) - 10)^+",
            "(min(x1, x2) - 9)^+",
            "(min(x1, x2) - 10)^+",
        ]

    def test_unknown_case(self, tiny_bundle):
        with pytest.raises(ConfigurationError):
            render_case(tiny_bundle, "missing")
        with pytest.raises(ConfigurationError):
            run_case(tiny_bundle, "missing")

    def test_bundle_trainer_precedence(self, tiny_bundle):
        trainer = bundle_trainer(tiny_bundle, TrainerConfig(iterations=7))
        assert trainer.iterations == 7
        assert trainer.hidden_width == 8
        assert trainer.gamma == TrainerConfig().gamma

    def test_bundle_trainer_invalid_override(self, tiny_bundle):
        bad = tiny_bundle.model_copy(update={"trainer": {"gamma": -1.0}})
        with pytest.raises(ConfigurationError):
            bundle_trainer(bad)

    def test_price_bundle(self, tiny_bundle):
        constraints, references = price_bundle(tiny_bundle, seed=1)
        assert set(constraints) == {"(avg(x1, x2) - 10)^+", "(min(x1, x2) - 9)^+", "(min(x1, x2) - 10)^+"}
        assert set(references) == {9.0, 11.0}
        assert references[9.0].price > references[11.0].price
        assert all(p.n_samples == 2_000 for p in constraints.values())


class TestRunners:
    """Test cases for the sweep, convergence and timing runners."""

    def test_run_case_rows(self, tiny_bundle):
        table = run_case(tiny_bundle, "basket")
        assert table.constraints == ["(avg(x1, x2) - 10)^+"]
        assert [row.strike for row in table.rows] == [9.0, 11.0]
        assert table.notes == ["single basket"]
        for row in table.rows:
            assert row.gap == pytest.approx(row.upper - row.lower)
            assert row.upper_excess == pytest.approx(row.upper - row.reference)
        assert set(table.seeds) == {"root", "prices", "K=9/upper", "K=9/lower", "K=11/upper", "K=11/lower"}

    def test_threads_do_not_change_results(self, tiny_bundle):
        serial = run_case(tiny_bundle, "basket", threads=1)
        parallel = run_case(tiny_bundle, "basket", threads=2)
        for a, b in zip(serial.rows, parallel.rows):
            assert (a.upper, a.lower, a.reference) == (b.upper, b.lower, b.reference)

    def test_seeds_shared_across_cases(self, tiny_bundle):
        tables = run_sweep(tiny_bundle, directions=["upper"])
        assert [t.case for t in tables] == ["base", "basket", "both"]
        assert tables[0].seeds == tables[1].seeds == tables[2].seeds
        assert all(row.lower is None for t in tables for row in t.rows)

    def test_upper_only_direction(self, tiny_bundle):
        table = run_case(tiny_bundle, "base", directions=[Direction.UPPER], strikes=[11])
        assert table.rows[0].lower is None
        assert table.rows[0].gap is None

    def test_sweep_frame(self, tiny_bundle):
        tables = run_sweep(tiny_bundle, cases=["base", "basket"], directions=["upper"])
        frame = sweep_frame(tables)
        assert list(frame.columns) == ["strike", "reference", "stderr", "upper_base", "upper_basket"]
        assert frame["strike"].tolist() == [9.0, 11.0]

    def test_aborted_job_names_case_and_strike(self, tiny_bundle):
        bundle = tiny_bundle.model_copy(update={"target": "1e200 * (x1 + {K})"})
        with pytest.raises(TrainingAbortedError) as info:
            run_case(bundle, "base", directions=["upper"], strikes=[9])
        assert "case base K=9 upper" in str(info.value)

    def test_unexpected_job_failure_names_case_and_strike(self, tiny_bundle, monkeypatch):
        def broken(problem, config):
            raise RuntimeError("backend exploded")

        monkeypatch.setattr("app.services.experiments.train", broken)
        with pytest.raises(ExperimentJobError) as info:
            run_case(tiny_bundle, "base", directions=["upper"], strikes=[9])
        assert "case base K=9 upper" in str(info.value)
        assert isinstance(info.value.__cause__, RuntimeError)

    def test_convergence(self, tiny_bundle):
        table = run_convergence(tiny_bundle, every=10)
        assert table.strike == 9.0
        assert set(table.finals) == {"base", "basket", "both"}
        assert len(table.points) == 3 * 4
        assert set(table.stability) == {"base", "basket", "both"}
        assert all(value >= 0.0 for value in table.stability.values())
        frame = convergence_frame(table)
        assert list(frame.columns) == ["iteration", "base", "basket", "both"]
        assert frame["iteration"].tolist() == [10, 20, 30, 40]

    def test_trace_stability(self):
        assert trace_stability([5.0] * 100) == pytest.approx(0.0, abs=1e-15)
        # alternating noise averages out over an even window
        assert trace_stability([9.0, 11.0] * 5_000, window=2) == pytest.approx(0.0, abs=1e-15)
        assert trace_stability([1.0] * 80 + [1.0, 3.0] * 10, window=1) == pytest.approx(0.5)

    def test_trace_stability_empty(self):
        with pytest.raises(InvalidArgumentError):
            trace_stability([])

    def test_convergence_needs_strike(self, tiny_bundle):
        bundle = tiny_bundle.model_copy(update={"convergence_strike": None})
        with pytest.raises(ConfigurationError):
            run_convergence(bundle)

    def test_timing(self):
        trainer = TrainerConfig(**TINY_TRAINER)
        table = run_timing(TimingConfig(d_values=[1, 2], iterations=20), trainer, seed=1)
        assert [row.d for row in table.rows] == [1, 2]
        assert all(row.iterations == 20 and row.seconds > 0 for row in table.rows)
        assert "numpy" in table.environment
        assert list(timing_frame(table).columns) == ["d", "iterations", "seconds"]

    def test_timing_market(self):
        market = timing_market(12, TimingConfig())
        assert market.d == 12
        assert market.sigma[:6] == market.sigma[6:]
        assert market.rho[0][1] == 0.4


@pytest.mark.slow
class TestExperimentAcceptance:
    """Desk-scale versions of the published experiments."""

    def test_base_case_brackets_reference(self):
        bundle = load_bundle(CONFIGS / "experiment1.json")
        table = run_case(bundle, "E1.0", threads=4)
        for row in table.rows:
            assert row.lower - 0.05 <= row.reference <= row.upper + 0.05

    def test_information_monotonicity(self):
        bundle = load_bundle(CONFIGS / "experiment1.json")
        strikes = [4, 6, 8, 13, 14]
        tables = run_sweep(bundle, cases=["E1.0", "E1.1", "E1.2", "E1.3", "E1.4"],
                           directions=["upper"], threads=4, strikes=strikes)
        uppers = [[row.upper for row in t.rows] for t in tables]
        for looser, tighter in zip(uppers, uppers[1:]):
            assert all(t <= u + 0.05 for t, u in zip(tighter, looser))
        for upper in uppers[1:]:
            for k, value, base in zip(strikes, upper, uppers[0]):
                if k >= 13:
                    assert abs(value - base) <= 0.1

    def test_near_linear_scaling(self):
        table = run_timing(TimingConfig(d_values=[3, 12]))
        seconds = {row.d: row.seconds for row in table.rows}
        assert seconds[12] / seconds[3] <= 4.5

    def test_convergence_traces_flatten(self):
        """Moving-average spread over the final fifth stays below 1% of its level."""
        bundle = load_bundle(CONFIGS / "experiment1.json")
        table = run_convergence(bundle, 6, cases=["E1.0", "E1.1", "E1.2", "E1.3", "E1.4"], threads=4, every=100)
        assert set(table.stability) == {"E1.0", "E1.1", "E1.2", "E1.3", "E1.4"}
        for case, value in table.stability.items():
            assert value < 0.01, case

    def test_relevant_information_effect(self):
        """Basket quotes alone recover most of the tightening of the full information set."""
        bundle = load_bundle(CONFIGS / "experiment2_desk.json")
        tables = run_sweep(bundle, cases=["E2.0", "E2.7", "E2.8"], directions=["upper"], threads=4)
        uppers = {t.case: [row.upper for row in t.rows] for t in tables}
        full_vs_relevant = max(abs(a - b) for a, b in zip(uppers["E2.7"], uppers["E2.8"]))
        none_vs_relevant = max(abs(a - b) for a, b in zip(uppers["E2.0"], uppers["E2.8"]))
        assert full_vs_relevant <= 0.3 * none_vs_relevant
