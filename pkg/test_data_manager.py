import json
from unittest.mock import MagicMock

import numpy as np
import pandas as pd
import pytest

from core.mcecm import FitResult, IterationRecord
from core.model_core import BINOMIAL, GAUSSIAN, UNSTRUCTURED, CovStructure, FamilySpec, Theta
from core.sampler import PosteriorDraws
from utils.data_manager import DataManager
from utils.exceptions import InputError, InvalidResponse, MissingColumn
from utils.models import ColumnRoles, SelectionScore
from utils.reports import create_fit_report, create_score_row, create_score_summary, five_number_summary


@pytest.fixture
def manager(tmp_path):
    """A DataManager writing under a temporary output directory."""
    return DataManager(str(tmp_path / "out"))


@pytest.fixture
def frame():
    rng = np.random.default_rng(1)
    return pd.DataFrame(
        {
            "site": np.repeat(["north", "south", "east"], 8),
            "outcome": (np.arange(24) % 2).astype(float),
            "age": rng.normal(40, 10, size=24),
            "dose": rng.normal(size=24),
            "weight": rng.normal(70, 5, size=24),
        }
    )


def test_load_frame_missing_file(manager, tmp_path):
    with pytest.raises(InputError, match="data file not found"):
        manager.load_frame(str(tmp_path / "absent.csv"))


def test_load_frame_empty_file(manager, tmp_path):
    path = tmp_path / "empty.csv"
    path.write_text("")
    with pytest.raises(InputError):
        manager.load_frame(str(path))


def test_load_frame_reads_csv(manager, tmp_path, frame):
    path = tmp_path / "data.csv"
    frame.to_csv(path, index=False)
    loaded = manager.load_frame(str(path))
    assert list(loaded.columns) == list(frame.columns)
    assert len(loaded) == 24


def test_missing_column_is_named(manager, frame):
    roles = ColumnRoles(response="response", group="site")
    with pytest.raises(MissingColumn, match="missing column: response"):
        manager.resolve_roles(frame, roles)


@pytest.mark.parametrize(
    "covariates, random, expected_cov, expected_random",
    [
        ("all", "all", ["age", "dose", "weight"], ["age", "dose", "weight"]),
        ("all", "none", ["age", "dose", "weight"], []),
        (["dose", "age"], ["age"], ["dose", "age"], ["age"]),
    ],
)
def test_resolve_roles(manager, frame, covariates, random, expected_cov, expected_random):
    roles = ColumnRoles(response="outcome", group="site", covariates=covariates, random=random)
    assert manager.resolve_roles(frame, roles) == (expected_cov, expected_random)


def test_random_effect_must_be_a_covariate(manager, frame):
    roles = ColumnRoles(response="outcome", group="site", covariates=["age"], random=["dose"])
    with pytest.raises(InputError, match="dose"):
        manager.resolve_roles(frame, roles)


def test_build_dataset(manager, frame):
    roles = ColumnRoles(response="outcome", group="site", random=["dose"])
    ds = manager.build_dataset(frame, roles, FamilySpec(BINOMIAL))
    assert (ds.N, ds.p, ds.K, ds.q) == (24, 3, 3, 2)
    assert ds.random_names == ("(Intercept)", "dose")
    assert ds.levels == ("east", "north", "south")


def test_build_dataset_checks_response(manager, frame):
    frame["outcome"] = frame["outcome"] * 2
    with pytest.raises(InvalidResponse):
        manager.build_dataset(frame, ColumnRoles(response="outcome", group="site"), FamilySpec(BINOMIAL))


def test_non_numeric_covariates_rejected(manager, frame):
    frame["dose"] = "high"
    with pytest.raises(InputError, match="numeric"):
        manager.covariate_matrix(frame, ["dose"])


def test_write_json_is_sorted_and_terminated(manager):
    path = manager.write_json({"b": 1, "a": [1, 2]}, "doc.json")
    with open(path, encoding="utf-8") as handle:
        text = handle.read()
    assert text.endswith("\n")
    assert text.index('"a"') < text.index('"b"')
    assert manager.read_json(path) == {"a": [1, 2], "b": 1}


def test_read_json_errors(manager, tmp_path):
    with pytest.raises(InputError, match="file not found"):
        manager.read_json(str(tmp_path / "nothing.json"))
    broken = tmp_path / "broken.json"
    broken.write_text("{not json")
    with pytest.raises(InputError, match="not valid JSON"):
        manager.read_json(str(broken))


def test_write_jsonl(manager):
    path = manager.write_jsonl([{"x": 1}, {"x": 2}], "rows.jsonl")
    with open(path, encoding="utf-8") as handle:
        assert [json.loads(line) for line in handle] == [{"x": 1}, {"x": 2}]


def test_write_residuals_and_predictions(manager):
    dataset = MagicMock()
    dataset.group = np.array(["a", "a", "b"])
    dataset.N = 3
    residual_path = manager.write_residuals(np.array([0.5, -0.5, 1.0]), dataset, "deviance")
    residuals = pd.read_csv(residual_path)
    assert list(residuals.columns) == [
        DataManager.H_SERIES, DataManager.H_GROUP, DataManager.H_VARIABLE, DataManager.H_INDEX, DataManager.H_VALUE,
    ]
    assert set(residuals[DataManager.H_SERIES]) == {"residual_deviance"}
    predictions = pd.read_csv(manager.write_predictions(np.array([0.1, 0.9])))
    assert predictions[DataManager.P_PREDICTION].tolist() == [0.1, 0.9]
    assert predictions[DataManager.P_ROW].tolist() == [0, 1]


def test_five_number_summary():
    summary = five_number_summary([1.0, 2.0, 3.0, 4.0, 5.0])
    assert summary == {"min": 1.0, "q1": 2.0, "median": 3.0, "q3": 4.0, "max": 5.0}
    assert five_number_summary([])["median"] is None


def test_fit_report_document(manager, frame):
    roles = ColumnRoles(response="outcome", group="site", random=["dose"])
    ds = manager.build_dataset(frame, roles, FamilySpec(GAUSSIAN))
    struct = CovStructure(UNSTRUCTURED, 2)
    draws = PosteriorDraws.from_array(np.ones((3, 3, 2)), ds.levels, ds.random_names)
    fit = FitResult(
        theta=Theta(beta=np.array([0.5, 0.0, 0.2, 0.0]), gamma=np.array([1.0, 0.0, 0.0]), tau=4.0),
        struct=struct,
        draws=draws,
        converged=True,
        reason="converged",
        iterations=2,
        trace=[IterationRecord(1, 100, None, 0, 3, False), IterationRecord(2, 110, 1e-4, 1, 2, True)],
    )
    report = create_fit_report(fit, ds, FamilySpec(GAUSSIAN))
    assert report["sigma"] == pytest.approx(2.0)
    assert report["fixef"]["dose"] == pytest.approx(0.2)
    assert report["ranef_variance"] == {"(Intercept)": 1.0, "dose": 0.0}
    assert report["convergence"]["final_n_mc"] == 110
    assert report["convergence"]["mstep_cap_hits"] == 1
    assert report["residuals"]["type"] == "pearson"
    assert report["criteria"] is None
    assert report["ranef"]["north"] == {"(Intercept)": 1.0, "dose": 0.0}
    assert report["coef"]["east"]["(Intercept)"] == pytest.approx(1.5)
    json.dumps(report)


def test_score_rows_leave_out_wall_time():
    scores = [SelectionScore(2, 0, 2, 1, [1.0, 0.5], 3.2), SelectionScore(1, 1, 2, 0, [0.0, 1.5], 2.8)]
    row = create_score_row(scores[0], replicate=0, seed=1618)
    assert "wall_time" not in row
    assert row["seed"] == 1618
    summary = create_score_summary(scores)
    assert summary["replicates"] == 2
    assert summary["mean_tp_fixef"] == pytest.approx(1.5)
    assert summary["mean_beta_hat"] == pytest.approx([0.5, 1.0])
    assert create_score_summary([]) == {"replicates": 0}
