import json
import logging
from unittest.mock import MagicMock, patch

import numpy as np
import pandas as pd
import pytest

import main
from cli import EXIT_INPUT, EXIT_NUMERICAL, EXIT_OK, PglmmCli, exit_code_for
from core.mcecm import FitResult
from core.model_core import UNSTRUCTURED, CovStructure, Theta
from utils.exceptions import ConfigError, MissingColumn, MStepDivergence, SamplerError

QUICK = [
    "--nmc-burnin", "50",
    "--nmc-start", "50",
    "--nmc-max", "100",
    "--nmc-report", "100",
    "--maxit-em", "3",
    "--var-start", "1",
    "--came-m-star", "200",
]


@pytest.fixture
def cli():
    return PglmmCli()


@pytest.fixture
def simulated(cli, tmp_path):
    """A small simulated binomial dataset written through the simulate verb."""
    out = tmp_path / "sim"
    assert cli.run(["simulate", "--out", str(out), "--n", "60", "--p", "3", "--k", "3"]) == EXIT_OK
    return out / "data.csv"


@pytest.fixture
def fitted_dir(cli, simulated, tmp_path):
    out = tmp_path / "fit"
    code = cli.run(["fit", "--data", str(simulated), "--random", "none", "--out", str(out)] + QUICK)
    assert code == EXIT_OK
    return out


@pytest.mark.parametrize(
    "error, expected",
    [
        (MissingColumn("x"), EXIT_INPUT),
        (ConfigError("x"), EXIT_INPUT),
        (MStepDivergence("x"), EXIT_NUMERICAL),
        (SamplerError("x"), EXIT_NUMERICAL),
        (RuntimeError("x"), EXIT_NUMERICAL),
    ],
)
def test_exit_codes(error, expected):
    assert exit_code_for(error) == expected


def test_every_verb_is_loaded(cli):
    assert set(cli.commands) == {"diagnose", "fit", "predict", "select", "simulate"}


def test_simulate_is_deterministic(cli, tmp_path):
    for name in ("a", "b"):
        args = ["simulate", "--out", str(tmp_path / name), "--n", "80", "--p", "4", "--k", "4", "--seed", "3"]
        assert cli.run(args) == EXIT_OK
    for filename in ("data.csv", "truth.json"):
        assert (tmp_path / "a" / filename).read_bytes() == (tmp_path / "b" / filename).read_bytes()
    truth = json.loads((tmp_path / "a" / "truth.json").read_text())
    assert truth["group_sizes"] == [27, 18, 18, 17]


def test_fit_is_deterministic(cli, simulated, tmp_path):
    for name in ("a", "b"):
        args = ["fit", "--data", str(simulated), "--random", "none", "--out", str(tmp_path / name)] + QUICK
        assert cli.run(args) == EXIT_OK
    for filename in ("fit_report.json", "posterior.pglmpost", "residuals.csv"):
        assert (tmp_path / "a" / filename).read_bytes() == (tmp_path / "b" / filename).read_bytes()


def test_select_is_deterministic(cli, simulated, tmp_path):
    for name in ("a", "b"):
        args = [
            "select", "--data", str(simulated), "--random", "none", "--out", str(tmp_path / name),
            "--no-pre-screen", "--bic-option", "BIC", "--lambda0-seq", "0.05", "0.2", "--lambda1-seq", "0",
        ] + QUICK
        assert cli.run(args) == EXIT_OK
    for filename in ("selection.json", "fit_report.json"):
        assert (tmp_path / "a" / filename).read_bytes() == (tmp_path / "b" / filename).read_bytes()


def test_malformed_var_start_is_a_config_error(cli, simulated, tmp_path, caplog):
    args = ["fit", "--data", str(simulated), "--out", str(tmp_path)] + QUICK + ["--var-start", "banana"]
    with caplog.at_level(logging.ERROR):
        assert cli.run(args) == EXIT_INPUT
    assert "var_start" in caplog.text


def test_fit_writes_report_posterior_and_residuals(fitted_dir):
    report = json.loads((fitted_dir / "fit_report.json").read_text())
    assert report["family"] == "binomial"
    assert report["data"]["random_effects"] == ["(Intercept)"]
    assert report["convergence"]["iterations"] <= 3
    assert report["criteria"]["BICq"] is None
    assert report["criteria"]["BIC"] is not None
    assert (fitted_dir / "posterior.pglmpost").exists()
    residuals = pd.read_csv(fitted_dir / "residuals.csv")
    assert len(residuals) == 60
    assert set(residuals["series"]) == {"residual_deviance"}


def test_diagnose_writes_one_series_per_group(cli, fitted_dir, tmp_path):
    out = tmp_path / "diag"
    args = ["diagnose", "--posterior", str(fitted_dir / "posterior.pglmpost"), "--out", str(out), "--bins", "10"]
    assert cli.run(args) == EXIT_OK
    frame = pd.read_csv(out / "diagnostics.csv")
    paths = frame[frame["series"] == "sample_path"]
    assert paths["group"].nunique() == 3
    assert len(paths) == 3 * 100
    assert len(frame[frame["series"] == "histogram"]) == 3 * 10


def test_diagnose_unknown_group(cli, fitted_dir, tmp_path):
    args = ["diagnose", "--posterior", str(fitted_dir / "posterior.pglmpost"), "--grps", "99", "--out", str(tmp_path)]
    assert cli.run(args) == EXIT_INPUT


def test_predict_from_report(cli, simulated, fitted_dir, tmp_path):
    out = tmp_path / "pred"
    args = ["predict", "--report", str(fitted_dir / "fit_report.json"), "--data", str(simulated), "--out", str(out)]
    assert cli.run(args) == EXIT_OK
    predictions = pd.read_csv(out / "predictions.csv")
    assert len(predictions) == 60
    assert predictions["prediction"].between(0, 1).all()


def test_predict_missing_covariate(cli, simulated, fitted_dir, tmp_path, caplog):
    frame = pd.read_csv(simulated).drop(columns=["X2"])
    partial = tmp_path / "partial.csv"
    frame.to_csv(partial, index=False)
    args = ["predict", "--report", str(fitted_dir / "fit_report.json"), "--data", str(partial), "--out", str(tmp_path)]
    with caplog.at_level(logging.ERROR):
        assert cli.run(args) == EXIT_INPUT
    assert "missing column: X2" in caplog.text


def test_missing_response_column(cli, simulated, tmp_path, caplog):
    args = ["fit", "--data", str(simulated), "--response", "outcome", "--out", str(tmp_path)] + QUICK
    with caplog.at_level(logging.ERROR):
        assert cli.run(args) == EXIT_INPUT
    assert "missing column: outcome" in caplog.text


def test_missing_data_file(cli, tmp_path):
    assert cli.run(["fit", "--data", str(tmp_path / "none.csv"), "--out", str(tmp_path)]) == EXIT_INPUT


def test_flags_override_config_document(cli, tmp_path):
    document = tmp_path / "run.json"
    document.write_text(json.dumps({"seed": 5, "nlambda": 3, "covariates": ["X1", "X2"]}))
    cfg = cli.parse(["select", "--config", str(document), "--seed", "9", "--random", "none"])
    assert cfg.verb == "select"
    assert cfg.seed == 9
    assert cfg.nlambda == 3
    assert cfg.covariates == ["X1", "X2"]
    assert cfg.random == "none"
    assert cfg.pre_screen is True
    assert cli.parse(["select", "--no-pre-screen"]).pre_screen is False


def test_unknown_config_key(cli, tmp_path):
    document = tmp_path / "run.json"
    document.write_text(json.dumps({"lamda0": 0.1}))
    assert cli.run(["fit", "--config", str(document)]) == EXIT_INPUT


def test_bad_flag_value_exits_with_usage_error(cli):
    with pytest.raises(SystemExit) as excinfo:
        cli.run(["fit", "--family", "gamma"])
    assert excinfo.value.code == 2


def test_threads_from_environment(cli, monkeypatch):
    monkeypatch.setenv("PGLMM_THREADS", "3")
    assert cli.parse(["fit"]).threads == 3
    monkeypatch.setenv("PGLMM_THREADS", "many")
    assert cli.run(["fit"]) == EXIT_INPUT


def empty_selection(dataset, family, cfg):
    """Stands in for select_model: intercept-only model, nothing selected."""
    struct = CovStructure(UNSTRUCTURED, dataset.q)
    fit = FitResult(theta=Theta(np.zeros(dataset.p + 1), np.zeros(struct.n_gamma)), struct=struct, draws=None)
    return MagicMock(best_fit=fit, dataset=dataset)


def test_simulate_replicates_writes_scores(cli, tmp_path):
    outputs = []
    for name in ("a", "b"):
        out = tmp_path / name
        with patch("commands.simulate_cmd.select_model", side_effect=empty_selection) as mock_select:
            code = cli.run(["simulate", "--out", str(out), "--n", "60", "--p", "3", "--k", "3", "--replicates", "2"])
        assert code == EXIT_OK
        assert mock_select.call_count == 2
        outputs.append((out / "scores.jsonl").read_bytes())
    assert outputs[0] == outputs[1]
    rows = [json.loads(line) for line in outputs[0].decode().splitlines()]
    assert [row["seed"] for row in rows] == [1618, 1619]
    assert all(row["tp_fixef"] == 0 and row["fp_fixef"] == 0 for row in rows)
    summary = json.loads((tmp_path / "a" / "scores_summary.json").read_text())
    assert summary["replicates"] == 2


def test_main_loads_environment_and_runs():
    with (
        patch("main.load_dotenv") as mock_dotenv,
        patch("main.setup_logging") as mock_logging,
        patch("main.PglmmCli") as mock_cli,
    ):
        mock_cli.return_value.run.return_value = EXIT_INPUT
        assert main.main(["fit"]) == EXIT_INPUT
    mock_dotenv.assert_called_once()
    mock_logging.assert_called_once()
    mock_cli.return_value.run.assert_called_once_with(["fit"])
