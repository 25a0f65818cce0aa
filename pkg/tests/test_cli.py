"""
End-to-end tests for the command-line front end.
"""
import json

import pandas as pd
import pytest

from app.api.cli import (
    EXIT_CONFIG,
    EXIT_INFEASIBLE,
    EXIT_OK,
    EXIT_PAYOFF,
    EXIT_SIZE_CAP,
    EXIT_TRAINING,
    EXIT_UNEXPECTED,
    build_parser,
    exit_code_for,
    main,
)
from app.core.exceptions import (
    DimensionMismatchError,
    FactorizationError,
    InfeasibleProblemError,
    InstrumentNotFoundError,
    PayoffArityError,
    TrainingAbortedError,
)

E1_MARKET = {
    "s0": [10.0, 10.0, 10.0],
    "sigma": [0.3, 0.4, 0.5],
    "rho": [[1.0, 0.5, 0.5], [0.5, 1.0, 0.5], [0.5, 0.5, 1.0]],
    "maturity": 1.5,
}
TWO_ASSET_MARKET = {"s0": [10.0, 10.0], "sigma": [0.3, 0.4], "rho": [[1.0, 0.5], [0.5, 1.0]], "maturity": 1.5}
TINY_TRAINER = {
    "iterations": 30,
    "hidden_layers": 1,
    "hidden_width": 8,
    "eval_samples": 1024,
    "slack_samples": 256,
    "log_every": 0,
}


@pytest.fixture
def out_dir(tmp_path):
    return tmp_path / "out"


def _run(command, path, *flags):
    return main([command, "--config", str(path), *flags])


def _read(path):
    return json.loads(path.read_text())


class TestGenerate:
    """Test cases for the generate command."""

    def test_prices_constraints_and_target(self, write_config, out_dir):
        path = write_config({
            "market": E1_MARKET,
            "target": "(max(x1, x2, x3) - 6)^+",
            "constraints": [{"payoff": "(max(x1,x2) - 6)^+"}, {"payoff": "(x1 - 10)^+", "price": 1.9}],
            "mc_samples": 2_000,
            "output_dir": str(out_dir),
        })
        assert _run("generate", path) == EXIT_OK
        table = _read(out_dir / "instruments.json")
        assert {i["payoff"] for i in table["instruments"]} == {"(max(x1, x2) - 6)^+", "(x1 - 10)^+"}
        sources = {i["payoff"]: i["source"] for i in table["instruments"]}
        assert sources == {"(max(x1, x2) - 6)^+": "copula", "(x1 - 10)^+": "declared"}
        assert [r["payoff"] for r in table["references"]] == ["(max(x1, x2, x3) - 6)^+"]
        assert table["n_samples"] == 2_000
        assert table["config"]["target"] == "(max(x1, x2, x3) - 6)^+"

    def test_empty_constraint_set(self, write_config, out_dir):
        path = write_config({"market": E1_MARKET, "mc_samples": 2_000, "output_dir": str(out_dir)})
        assert _run("generate", path) == EXIT_OK
        assert _read(out_dir / "instruments.json")["instruments"] == []

    def test_malformed_payoff(self, write_config, out_dir, capsys):
        path = write_config({
            "market": E1_MARKET,
            "constraints": [{"payoff": "(x1 - 6)^"}],
            "mc_samples": 2_000,
            "output_dir": str(out_dir),
        })
        assert _run("generate", path) == EXIT_PAYOFF
        assert "offset 8" in capsys.readouterr().err

    def test_market_required(self, write_config, out_dir):
        assert _run("generate", write_config({"output_dir": str(out_dir)})) == EXIT_CONFIG


class TestConfigErrors:
    """Test cases for config loading and overrides."""

    def test_unknown_key(self, write_config, out_dir):
        path = write_config({"market": E1_MARKET, "gamma": 80, "output_dir": str(out_dir)})
        assert _run("generate", path) == EXIT_CONFIG

    def test_missing_file(self, tmp_path):
        assert _run("bound", tmp_path / "absent.json") == EXIT_CONFIG

    def test_not_json(self, tmp_path):
        path = tmp_path / "run.json"
        path.write_text("market: yes")
        assert _run("bound", path) == EXIT_CONFIG

    def test_schema_version(self, write_config):
        assert _run("bound", write_config({"schema_version": 2})) == EXIT_CONFIG

    def test_out_flag_overrides_config(self, write_config, tmp_path):
        path = write_config({"market": E1_MARKET, "mc_samples": 2_000, "output_dir": str(tmp_path / "ignored")})
        assert _run("generate", path, "--out", str(tmp_path / "chosen")) == EXIT_OK
        assert (tmp_path / "chosen" / "instruments.json").exists()
        assert not (tmp_path / "ignored").exists()

    def test_parser_requires_config(self):
        with pytest.raises(SystemExit):
            build_parser().parse_args(["bound"])


class TestBound:
    """Test cases for the bound command."""

    def test_lower_only(self, write_config, out_dir):
        path = write_config({"market": E1_MARKET, "target": "5", "trainer": TINY_TRAINER, "output_dir": str(out_dir)})
        assert _run("bound", path, "--direction", "lower") == EXIT_OK
        result = _read(out_dir / "result.json")
        assert "lower" in result and "upper" not in result
        assert result["lower"]["direction"] == "lower"
        assert list(result["seeds"]) == ["lower"]
        assert result["config"]["direction"] == "lower"

    def test_trace_thinning(self, write_config, out_dir):
        path = write_config({"market": E1_MARKET, "target": "5", "trainer": TINY_TRAINER, "trace_every": 7,
                             "output_dir": str(out_dir)})
        assert _run("bound", path, "--direction", "upper") == EXIT_OK
        result = _read(out_dir / "result.json")
        # steps 1, 8, 15, 22, 29 and the last one
        assert len(result["upper"]["trace"]) == 6
        assert result["upper"]["iterations"] == 30
        assert result["config"]["trace_every"] == 7

    def test_both_directions_with_generated_prices(self, write_config, out_dir):
        payload = {
            "market": E1_MARKET,
            "target": "(max(x1, x2, x3) - 6)^+",
            "constraints": [{"payoff": "(max(x1, x2) - 6)^+"}],
            "trainer": TINY_TRAINER,
            "mc_samples": 2_000,
            "output_dir": str(out_dir),
        }
        path = write_config(payload)
        assert _run("generate", path) == EXIT_OK
        assert _run("bound", path) == EXIT_OK
        generated = _read(out_dir / "instruments.json")["instruments"][0]["price"]
        result = _read(out_dir / "result.json")
        assert result["constraints"] == [{"payoff": "(max(x1, x2) - 6)^+", "price": generated}]
        assert set(result["seeds"]) == {"upper", "lower"}
        assert result["seeds"]["upper"] != result["seeds"]["lower"]
        assert len(result["upper"]["trace"]) == 30

    def test_unpriced_constraint_without_table(self, write_config, out_dir):
        path = write_config({
            "market": E1_MARKET,
            "target": "x1",
            "constraints": [{"payoff": "(x1 - 6)^+"}],
            "trainer": TINY_TRAINER,
            "output_dir": str(out_dir),
        })
        assert _run("bound", path) == EXIT_CONFIG

    def test_training_abort(self, write_config, out_dir):
        path = write_config({
            "market": E1_MARKET, "target": "1e200 * x1", "trainer": TINY_TRAINER, "output_dir": str(out_dir),
        })
        assert _run("bound", path, "--direction", "upper") == EXIT_TRAINING

    def test_target_dimension(self, write_config, out_dir):
        path = write_config({"market": E1_MARKET, "target": "x4", "trainer": TINY_TRAINER, "output_dir": str(out_dir)})
        assert _run("bound", path) == EXIT_PAYOFF


class TestVerify:
    """Test cases for the LP verification command."""

    def _payload(self, out_dir, **overrides):
        payload = {
            "market": TWO_ASSET_MARKET,
            "target": "(max(x1, x2) - 10)^+",
            "constraints": [{"payoff": "(avg(x1, x2) - 10)^+"}],
            "oracle": {"grid_sizes": [10], "reprice_samples_per_atom": 200},
            "trainer": TINY_TRAINER,
            "output_dir": str(out_dir),
        }
        payload.update(overrides)
        return payload

    def test_grid_priced_constraints_feasible(self, write_config, out_dir):
        assert _run("verify", write_config(self._payload(out_dir))) == EXIT_OK
        report = _read(out_dir / "lp_report.json")
        assert report["feasibility"]["feasible"]
        assert report["grid_sizes"] == [10, 10]
        assert report["constraints"][0]["source"] == "discrete"
        assert report["min"]["value"] <= report["max"]["value"]
        assert report["max"]["marginal_residual"] < 1e-9

    def test_inflated_price_infeasible(self, write_config, out_dir):
        payload = self._payload(out_dir, constraints=[{"payoff": "(avg(x1, x2) - 10)^+", "price": 50.0, "tolerance": 0.0}])
        assert _run("verify", write_config(payload)) == EXIT_INFEASIBLE
        report = _read(out_dir / "lp_report.json")
        assert not report["feasibility"]["feasible"]
        assert "max" not in report

    def test_dimension_beyond_oracle(self, write_config, out_dir):
        six = {"s0": [10.0] * 6, "sigma": [0.3] * 6, "rho": [[1.0 if i == j else 0.0 for j in range(6)] for i in range(6)],
               "maturity": 1.5}
        assert _run("verify", write_config(self._payload(out_dir, market=six))) == EXIT_SIZE_CAP

    def test_grid_size_count(self, write_config, out_dir):
        payload = self._payload(out_dir, oracle={"grid_sizes": [10, 10, 10]})
        assert _run("verify", write_config(payload)) == EXIT_CONFIG

    def test_gap_against_bound_result(self, write_config, out_dir):
        bound_path = write_config(self._payload(out_dir, constraints=[]), name="bound.json")
        assert _run("bound", bound_path) == EXIT_OK
        payload = self._payload(out_dir, constraints=[], bound_result_path=str(out_dir / "result.json"))
        assert _run("verify", write_config(payload, name="verify.json")) == EXIT_OK
        assert set(_read(out_dir / "lp_report.json")["gap"]) == {"upper", "lower"}


class TestExperimentCommands:
    """Test cases for sweep, convergence and timing."""

    bundle = {
        "name": "tiny",
        "market": TWO_ASSET_MARKET,
        "target": "(max(x1, x2) - {K})^+",
        "target_strikes": [9, 11],
        "convergence_strike": 9,
        "reference_samples": 2_000,
        "trainer": TINY_TRAINER,
        "cases": [
            {"name": "base"},
            {"name": "basket", "extends": "base", "families": [{"payoff": "(avg(x1, x2) - {K})^+", "strikes": [10]}]},
        ],
    }

    def test_sweep(self, write_config, out_dir):
        path = write_config({"experiment": self.bundle, "cases": ["base", "basket"], "output_dir": str(out_dir)})
        assert _run("sweep", path, "--direction", "upper", "--threads", "2") == EXIT_OK
        figure = pd.read_csv(out_dir / "sweep_tiny.csv")
        assert list(figure.columns) == ["strike", "reference", "stderr", "upper_base", "upper_basket"]
        assert len(pd.read_csv(out_dir / "sweep_tiny_basket.csv")) == 2
        manifest = _read(out_dir / "sweep_tiny_manifest.json")
        assert manifest["files"] == ["sweep_tiny_base.csv", "sweep_tiny_basket.csv", "sweep_tiny.csv"]
        assert manifest["config"]["threads"] == 2

    def test_sweep_reruns_from_manifest(self, write_config, tmp_path):
        """The echoed config reproduces the tables, bundle seed and trainer overrides included."""
        first, second = tmp_path / "first", tmp_path / "second"
        path = write_config({"experiment": {**self.bundle, "seed": 5}, "cases": ["base"], "output_dir": str(first)})
        assert _run("sweep", path, "--direction", "upper") == EXIT_OK
        manifest = _read(first / "sweep_tiny_manifest.json")
        assert manifest["seed"] == 5
        assert "seed" not in manifest["config"]
        assert manifest["trainer"]["iterations"] == TINY_TRAINER["iterations"]

        rerun = write_config(manifest["config"], name="rerun.json")
        assert _run("sweep", rerun, "--out", str(second)) == EXIT_OK
        again = _read(second / "sweep_tiny_manifest.json")
        assert again["seed"] == 5
        assert again["trainer"] == manifest["trainer"]
        pd.testing.assert_frame_equal(pd.read_csv(first / "sweep_tiny.csv"), pd.read_csv(second / "sweep_tiny.csv"))

    def test_sweep_needs_bundle(self, write_config, out_dir):
        assert _run("sweep", write_config({"output_dir": str(out_dir)})) == EXIT_CONFIG

    def test_convergence(self, write_config, out_dir):
        path = write_config({"experiment": self.bundle, "output_dir": str(out_dir)})
        assert _run("convergence", path) == EXIT_OK
        frame = pd.read_csv(out_dir / "convergence_tiny.csv")
        assert list(frame.columns) == ["iteration", "base", "basket"]
        assert len(frame) == 30
        assert set(_read(out_dir / "convergence_tiny_manifest.json")["finals"]) == {"base", "basket"}

    def test_timing(self, write_config, out_dir):
        path = write_config({
            "timing": {"d_values": [1, 2], "iterations": 10},
            "trainer": TINY_TRAINER,
            "output_dir": str(out_dir),
        })
        assert _run("timing", path) == EXIT_OK
        frame = pd.read_csv(out_dir / "timing.csv")
        assert frame["d"].tolist() == [1, 2]
        assert "environment" in _read(out_dir / "timing_manifest.json")


class TestExitCodes:
    """Test cases for the error to exit-code mapping."""

    @pytest.mark.parametrize("error, code", [
        (PayoffArityError("max needs arguments", 0), EXIT_PAYOFF),
        (DimensionMismatchError("x"), EXIT_PAYOFF),
        (TrainingAbortedError("non-finite loss", 3), EXIT_TRAINING),
        (InfeasibleProblemError("x"), EXIT_INFEASIBLE),
        (FactorizationError("x"), EXIT_CONFIG),
        (InstrumentNotFoundError("x"), EXIT_CONFIG),
        (FileNotFoundError("x"), 7),
        (KeyError("x"), EXIT_UNEXPECTED),
    ])
    def test_mapping(self, error, code):
        assert exit_code_for(error) == code
