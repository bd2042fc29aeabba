import logging
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy.special import xlogy

import config
from core.mcecm import FitResult
from core.model_core import BINOMIAL, GAUSSIAN, Dataset, FamilySpec
from core.sampler import PosteriorDraws
from utils.exceptions import ConfigError, DimensionMismatch, InputError, UnknownSeriesName

logger = logging.getLogger(__name__)

LINK = "link"
RESPONSE = "response"

DEVIANCE = "deviance"
PEARSON = "pearson"
RESPONSE_RESID = "response"
WORKING = "working"
RESIDUAL_TYPES = (DEVIANCE, PEARSON, RESPONSE_RESID, WORKING)

SAMPLE_PATH = "sample_path"
AUTOCORR = "autocorr"
CUMSUM = "cumsum"
HISTOGRAM = "histogram"
HISTOGRAM_EDGES = "histogram_edges"

POSTERIOR_MEAN = "posterior_mean"


@dataclass
class RanefSummary:
    values: np.ndarray
    levels: tuple
    names: tuple[str, ...]
    method: str = POSTERIOR_MEAN

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.values, index=list(self.levels), columns=list(self.names))


@dataclass
class SigmaReport:
    cov: np.ndarray
    names: tuple[str, ...]
    residual_sd: float | None = None


@dataclass
class SeriesSet:
    path: np.ndarray
    autocorr: np.ndarray
    cumsum: np.ndarray
    hist_counts: np.ndarray
    hist_edges: np.ndarray


@dataclass
class DiagnosticSeries:
    series: dict[tuple, SeriesSet] = field(default_factory=dict)

    def to_frame(self) -> pd.DataFrame:
        """Long table with one row per (series, group, variable, index)."""
        frames = []
        for (group, variable), s in self.series.items():
            for kind, values in (
                (SAMPLE_PATH, s.path),
                (AUTOCORR, s.autocorr),
                (CUMSUM, s.cumsum),
                (HISTOGRAM, s.hist_counts),
                (HISTOGRAM_EDGES, s.hist_edges),
            ):
                frames.append(
                    pd.DataFrame(
                        {
                            "series": kind,
                            "group": group,
                            "variable": variable,
                            "index": np.arange(len(values)),
                            "value": np.asarray(values, dtype=float),
                        }
                    )
                )
        if not frames:
            return pd.DataFrame(columns=["series", "group", "variable", "index", "value"])
        return pd.concat(frames, ignore_index=True)


def ranef_estimate(fit: FitResult, dataset: Dataset) -> RanefSummary:
    """Posterior mean of Gamma alpha_k per group, standing in for the mode."""
    if fit.draws is None:
        raise DimensionMismatch("random-effect estimates need posterior draws")
    mean_alpha = fit.draws.by_group().mean(axis=0)
    values = mean_alpha @ fit.Gamma.T
    return RanefSummary(values=values, levels=dataset.levels, names=dataset.random_names)


def _standardize_new(dataset: Dataset, X_new: np.ndarray) -> np.ndarray:
    X_new = np.atleast_2d(np.asarray(X_new, dtype=float))
    if X_new.shape[1] != dataset.p:
        raise DimensionMismatch(f"new data has {X_new.shape[1]} covariates, expected {dataset.p}")
    return (X_new - dataset.centers) / dataset.scales


def _to_type(eta: np.ndarray, family: FamilySpec, type: str) -> np.ndarray:
    if type == LINK:
        return eta
    if type == RESPONSE:
        return family.linkinv(eta)
    raise ConfigError(f"Unknown prediction type '{type}'")


def predict(
    fit: FitResult,
    dataset: Dataset,
    family: FamilySpec,
    X_new: np.ndarray | None = None,
    type: str = LINK,
    fixed_only: bool | None = None,
) -> np.ndarray:
    """
    Predictions on the link or response scale.

    X_new is on the raw covariate scale. New data only ever gets the
    fixed-effect part.
    """
    if X_new is not None:
        if fixed_only is False:
            raise InputError("random effects cannot be applied to new data; use fixed_only")
        X = _standardize_new(dataset, X_new)
        eta = fit.theta.beta[0] + X @ fit.theta.beta[1:]
        return _to_type(eta, family, type)
    return _to_type(fitted(fit, dataset, fixed_only=bool(fixed_only)), family, type)


def predict_from_coefficients(
    beta_raw: np.ndarray, X_raw: np.ndarray, family: FamilySpec, type: str = LINK
) -> np.ndarray:
    """Fixed-effect prediction from raw-scale coefficients (intercept first)."""
    beta_raw = np.asarray(beta_raw, dtype=float)
    X_raw = np.atleast_2d(np.asarray(X_raw, dtype=float))
    if X_raw.shape[1] != beta_raw.size - 1:
        raise DimensionMismatch(f"new data has {X_raw.shape[1]} covariates, expected {beta_raw.size - 1}")
    return _to_type(beta_raw[0] + X_raw @ beta_raw[1:], family, type)


def fitted(fit: FitResult, dataset: Dataset, fixed_only: bool = False) -> np.ndarray:
    """Linear predictor on the training rows."""
    eta = dataset.design @ fit.theta.beta
    if fixed_only:
        return eta
    ranef = ranef_estimate(fit, dataset).values
    return eta + np.einsum("nq,nq->n", dataset.Z, ranef[dataset.codes])


def unit_deviance(family: FamilySpec, y: np.ndarray, mu: np.ndarray) -> np.ndarray:
    if family.kind == GAUSSIAN:
        return (y - mu) ** 2
    if family.kind == BINOMIAL:
        # saturated fits give mu of exactly 0 or 1
        mu = np.clip(mu, config.MU_EPS, 1.0 - config.MU_EPS)
        return 2.0 * (xlogy(y, y / mu) + xlogy(1.0 - y, (1.0 - y) / (1.0 - mu)))
    return 2.0 * (xlogy(y, y / mu) - (y - mu))


def residuals(
    fit: FitResult,
    dataset: Dataset,
    family: FamilySpec,
    type: str | None = None,
    fixed_only: bool = True,
) -> np.ndarray:
    """Deviance by default, Pearson for the Gaussian family."""
    if type is None:
        type = PEARSON if family.kind == GAUSSIAN else DEVIANCE
    if type not in RESIDUAL_TYPES:
        raise ConfigError(f"Unknown residual type '{type}', expected one of {RESIDUAL_TYPES}")
    y = dataset.y
    mu = family.linkinv(fitted(fit, dataset, fixed_only))
    raw = y - mu
    if type == RESPONSE_RESID:
        return raw
    if type == PEARSON:
        return raw / np.sqrt(family.variance(mu) * fit.theta.tau)
    if type == WORKING:
        return raw / family.variance(mu)
    return np.sign(raw) * np.sqrt(np.maximum(unit_deviance(family, y, mu), 0.0))


def deviance(fit: FitResult, dataset: Dataset, family: FamilySpec, fixed_only: bool = True) -> float:
    mu = family.linkinv(fitted(fit, dataset, fixed_only))
    return float(np.sum(unit_deviance(family, dataset.y, mu)))


def coef_table(fit: FitResult, dataset: Dataset) -> pd.DataFrame:
    """Fixed effects plus each group's random-effect estimate, per group."""
    ranef = ranef_estimate(fit, dataset)
    table = np.tile(fit.theta.beta, (dataset.K, 1))
    positions = [0] + [c + 1 for c in dataset.z_cols]
    table[:, positions] += ranef.values
    return pd.DataFrame(table, index=list(dataset.levels), columns=list(dataset.fixed_names))


def sigma_report(fit: FitResult, dataset: Dataset, family: FamilySpec) -> SigmaReport:
    residual_sd = float(np.sqrt(fit.theta.tau)) if family.has_dispersion else None
    return SigmaReport(cov=fit.ranef_cov, names=dataset.random_names, residual_sd=residual_sd)


def autocorrelation(x: np.ndarray, max_lag: int) -> np.ndarray:
    """Lag-h autocorrelation with the lagged products averaged over n - h terms."""
    x = np.asarray(x, dtype=float)
    n = x.size
    lags = min(max_lag, n - 1)
    centered = x - x.mean()
    c0 = np.mean(centered**2)
    out = np.zeros(lags + 1)
    out[0] = 1.0
    if c0 == 0.0:
        return out
    for h in range(1, lags + 1):
        out[h] = np.mean(centered[:-h] * centered[h:]) / c0
    return out


def standardized_cumsum(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    centered = np.cumsum(x - x.mean())
    sd = x.std()
    return centered / (sd * np.sqrt(x.size)) if sd > 0 else centered


def _select(requested, available, kind: str):
    if requested is None or requested == "all":
        return list(available)
    requested = [requested] if isinstance(requested, (str, int)) else list(requested)
    lookup = {str(a): a for a in available}
    chosen = []
    for name in requested:
        if str(name) not in lookup:
            raise UnknownSeriesName(f"unknown {kind} '{name}'")
        chosen.append(lookup[str(name)])
    return chosen


def mcmc_diagnostics(
    draws: PosteriorDraws,
    grps="all",
    vars="all",
    max_lag: int = config.MAX_LAG,
    bins: int = config.HIST_BINS,
) -> DiagnosticSeries:
    if draws.M == 0:
        raise DimensionMismatch("diagnostics need at least one draw")
    groups = list(dict.fromkeys(label[0] for label in draws.labels))
    variables = list(dict.fromkeys(label[1] for label in draws.labels))
    chosen_groups = _select(grps, groups, "group")
    chosen_vars = _select(vars, variables, "variable")

    column = {label: j for j, label in enumerate(draws.labels)}
    result = DiagnosticSeries()
    for g in chosen_groups:
        for v in chosen_vars:
            x = draws.data[:, column[(g, v)]]
            counts, edges = np.histogram(x, bins=bins)
            result.series[(g, v)] = SeriesSet(
                path=x.copy(),
                autocorr=autocorrelation(x, max_lag),
                cumsum=standardized_cumsum(x),
                hist_counts=counts,
                hist_edges=edges,
            )
    return result
