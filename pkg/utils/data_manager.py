import json
import logging
import os

import numpy as np
import pandas as pd

import config
from core.model_core import Dataset, FamilySpec, make_dataset
from utils.exceptions import InputError, MissingColumn
from utils.models import ColumnRoles

logger = logging.getLogger(__name__)


class DataManager:
    # Diagnostics and residual table header names
    H_SERIES = "series"
    H_GROUP = "group"
    H_VARIABLE = "variable"
    H_INDEX = "index"
    H_VALUE = "value"
    # Prediction table header names
    P_ROW = "row"
    P_PREDICTION = "prediction"

    def __init__(self, out_dir: str = config.DEFAULT_OUT_DIR):
        self.out_dir = out_dir

    def path(self, name: str) -> str:
        os.makedirs(self.out_dir, exist_ok=True)
        return os.path.join(self.out_dir, name)

    def load_frame(self, path: str) -> pd.DataFrame:
        if path is None or not os.path.exists(path):
            logger.warning(f"Data file not found: {path}")
            raise InputError(f"data file not found: {path}")
        try:
            frame = pd.read_csv(path)
        except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
            raise InputError(f"cannot parse {path}: {e}") from e
        if frame.empty:
            raise InputError(f"{path} has no rows")
        logger.info(f"Loaded {len(frame)} rows and {frame.shape[1]} columns from {path}")
        return frame

    def _require(self, frame: pd.DataFrame, columns):
        for column in columns:
            if column not in frame.columns:
                logger.warning(f"Column '{column}' missing from data")
                raise MissingColumn(f"missing column: {column}")

    def resolve_roles(self, frame: pd.DataFrame, roles: ColumnRoles) -> tuple[list[str], list[str]]:
        """Covariate and random-effect column names after expanding 'all'."""
        self._require(frame, [roles.response, roles.group])
        if roles.covariates == "all":
            covariates = [c for c in frame.columns if c not in (roles.response, roles.group)]
        else:
            covariates = list(roles.covariates)
            self._require(frame, covariates)
        if roles.random == "all":
            random = list(covariates)
        elif roles.random in ("none", None):
            random = []
        else:
            random = list(roles.random)
            self._require(frame, random)
            for name in random:
                if name not in covariates:
                    raise InputError(f"random effect '{name}' is not among the covariates")
        if not covariates:
            raise InputError("no covariate columns selected")
        return covariates, random

    def covariate_matrix(self, frame: pd.DataFrame, names) -> np.ndarray:
        self._require(frame, names)
        try:
            X = frame[list(names)].apply(pd.to_numeric).to_numpy(dtype=float)
        except (ValueError, TypeError) as e:
            raise InputError(f"covariates must be numeric: {e}") from e
        if not np.all(np.isfinite(X)):
            raise InputError("covariates contain missing or non-finite values")
        return X

    def build_dataset(self, frame: pd.DataFrame, roles: ColumnRoles, family: FamilySpec) -> Dataset:
        covariates, random = self.resolve_roles(frame, roles)
        X = self.covariate_matrix(frame, covariates)
        try:
            y = pd.to_numeric(frame[roles.response]).to_numpy(dtype=float)
        except (ValueError, TypeError) as e:
            raise InputError(f"response column '{roles.response}' must be numeric: {e}") from e
        family.validate_response(y)
        group = frame[roles.group]
        if group.isna().any():
            raise InputError(f"group column '{roles.group}' has missing labels")
        z_cols = [covariates.index(name) for name in random]
        return make_dataset(y, X, group.to_numpy(), z_cols, names=covariates)

    def write_frame(self, frame: pd.DataFrame, name: str) -> str:
        path = self.path(name)
        frame.to_csv(path, index=False)
        logger.info(f"Wrote {len(frame)} rows to {path}")
        return path

    def write_json(self, document: dict, name: str) -> str:
        path = self.path(name)
        with open(path, "w", encoding="utf-8") as handle:
            handle.write(json.dumps(document, sort_keys=True, indent=2))
            handle.write("\n")
        logger.info(f"Wrote {path}")
        return path

    def write_jsonl(self, rows: list[dict], name: str) -> str:
        path = self.path(name)
        with open(path, "w", encoding="utf-8") as handle:
            for row in rows:
                handle.write(json.dumps(row, sort_keys=True))
                handle.write("\n")
        logger.info(f"Wrote {len(rows)} rows to {path}")
        return path

    def read_json(self, path: str) -> dict:
        if path is None or not os.path.exists(path):
            raise InputError(f"file not found: {path}")
        try:
            with open(path, encoding="utf-8") as handle:
                return json.load(handle)
        except ValueError as e:
            raise InputError(f"{path} is not valid JSON: {e}") from e

    def write_diagnostics(self, series, name: str = "diagnostics.csv") -> str:
        return self.write_frame(series.to_frame(), name)

    def write_residuals(self, values: np.ndarray, dataset: Dataset, kind: str, name: str = "residuals.csv") -> str:
        frame = pd.DataFrame(
            {
                self.H_SERIES: f"residual_{kind}",
                self.H_GROUP: dataset.group,
                self.H_VARIABLE: "",
                self.H_INDEX: np.arange(dataset.N),
                self.H_VALUE: values,
            }
        )
        return self.write_frame(frame, name)

    def write_predictions(self, values: np.ndarray, name: str = "predictions.csv") -> str:
        frame = pd.DataFrame({self.P_ROW: np.arange(len(values)), self.P_PREDICTION: values})
        return self.write_frame(frame, name)
