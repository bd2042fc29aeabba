import numpy as np
import pytest

from core.inference import (
    AUTOCORR,
    CUMSUM,
    DEVIANCE,
    HISTOGRAM,
    HISTOGRAM_EDGES,
    PEARSON,
    RESPONSE,
    RESPONSE_RESID,
    SAMPLE_PATH,
    autocorrelation,
    coef_table,
    deviance,
    fitted,
    mcmc_diagnostics,
    predict,
    predict_from_coefficients,
    ranef_estimate,
    residuals,
    sigma_report,
    standardized_cumsum,
    unit_deviance,
)
from core.mcecm import FitResult
from core.model_core import BINOMIAL, GAUSSIAN, UNSTRUCTURED, CovStructure, FamilySpec, Theta, make_dataset
from core.sampler import PosteriorDraws
from utils.exceptions import ConfigError, DimensionMismatch, InputError, UnknownSeriesName

GROUP_ALPHA = np.array([[0.5, -1.0], [0.0, 0.25], [-0.5, 1.0]])


@pytest.fixture
def raw_X():
    return np.random.default_rng(12).normal(3.0, 2.0, size=(30, 2))


@pytest.fixture
def gaussian_fit(raw_X):
    """Three groups, random intercept and slope on the first covariate, Gamma = diag(1, 2)."""
    rng = np.random.default_rng(13)
    y = rng.normal(size=30)
    ds = make_dataset(y, raw_X, np.repeat([1, 2, 3], 10), z_cols=[0], names=["a", "b"])
    struct = CovStructure(UNSTRUCTURED, 2)
    draws = PosteriorDraws.from_array(np.tile(GROUP_ALPHA, (4, 1, 1)), ds.levels, ds.random_names)
    theta = Theta(beta=np.array([0.2, 0.7, -0.3]), gamma=np.array([1.0, 0.0, 2.0]), tau=0.25)
    return ds, FitResult(theta=theta, struct=struct, draws=draws)


def binomial_fit(raw_X):
    y = (np.arange(30) % 3 == 0).astype(float)
    ds = make_dataset(y, raw_X, np.repeat([1, 2, 3], 10), z_cols=[])
    draws = PosteriorDraws.from_array(np.zeros((2, 3, 1)), ds.levels, ds.random_names)
    theta = Theta(beta=np.array([-0.5, 0.4, 0.1]), gamma=np.zeros(1))
    return ds, FitResult(theta=theta, struct=CovStructure(UNSTRUCTURED, 1), draws=draws)


def test_autocorrelation_of_alternating_series():
    x = np.tile([1.0, -1.0], 10)
    acf = autocorrelation(x, 3)
    np.testing.assert_allclose(acf, [1.0, -1.0, 1.0, -1.0])


def test_autocorrelation_edge_cases():
    np.testing.assert_array_equal(autocorrelation(np.full(8, 2.0), 3), [1.0, 0.0, 0.0, 0.0])
    assert autocorrelation(np.arange(5.0), 40).size == 5


def test_standardized_cumsum_ends_at_zero():
    x = np.random.default_rng(0).normal(size=200)
    path = standardized_cumsum(x)
    assert path.size == 200
    assert path[-1] == pytest.approx(0.0, abs=1e-10)
    np.testing.assert_array_equal(standardized_cumsum(np.ones(5)), np.zeros(5))


def test_diagnostics_one_series_per_group_and_variable():
    """q = 1 gives exactly K series of each kind."""
    rng = np.random.default_rng(3)
    draws = PosteriorDraws.from_array(rng.normal(size=(50, 4, 1)), [1, 2, 3, 4], ["(Intercept)"])
    result = mcmc_diagnostics(draws, max_lag=10, bins=5)
    assert len(result.series) == 4
    frame = result.to_frame()
    for kind, per_series in [(SAMPLE_PATH, 50), (AUTOCORR, 11), (CUMSUM, 50), (HISTOGRAM, 5), (HISTOGRAM_EDGES, 6)]:
        rows = frame[frame["series"] == kind]
        assert len(rows) == 4 * per_series
        assert rows["group"].nunique() == 4
    assert frame.loc[frame["series"] == HISTOGRAM, "value"].sum() == 200


def test_diagnostics_select_by_name():
    rng = np.random.default_rng(3)
    draws = PosteriorDraws.from_array(rng.normal(size=(20, 3, 2)), [1, 2, 3], ["(Intercept)", "x"])
    result = mcmc_diagnostics(draws, grps=["2"], vars="x")
    assert list(result.series) == [(2, "x")]
    np.testing.assert_array_equal(result.series[(2, "x")].path, draws.by_group()[:, 1, 1])


@pytest.mark.parametrize("grps, vars", [(["9"], "all"), ("all", ["slope"])])
def test_diagnostics_unknown_name(grps, vars):
    draws = PosteriorDraws.from_array(np.zeros((5, 2, 1)), [1, 2], ["(Intercept)"])
    with pytest.raises(UnknownSeriesName):
        mcmc_diagnostics(draws, grps=grps, vars=vars)


def test_ranef_estimate_scales_by_gamma(gaussian_fit):
    ds, fit = gaussian_fit
    ranef = ranef_estimate(fit, ds)
    np.testing.assert_allclose(ranef.values, GROUP_ALPHA * [1.0, 2.0])
    assert list(ranef.to_frame().index) == [1, 2, 3]


def test_ranef_estimate_needs_draws(gaussian_fit):
    ds, fit = gaussian_fit
    fit.draws = None
    with pytest.raises(DimensionMismatch):
        ranef_estimate(fit, ds)


def test_fitted_adds_group_effects(gaussian_fit):
    ds, fit = gaussian_fit
    fixed = fitted(fit, ds, fixed_only=True)
    full = fitted(fit, ds)
    ranef = GROUP_ALPHA * [1.0, 2.0]
    expected = fixed + ranef[ds.codes, 0] + ds.Z[:, 1] * ranef[ds.codes, 1]
    np.testing.assert_allclose(full, expected)


def test_predict_new_data_is_fixed_only(gaussian_fit, raw_X):
    ds, fit = gaussian_fit
    np.testing.assert_allclose(predict(fit, ds, FamilySpec(GAUSSIAN), X_new=raw_X), fitted(fit, ds, fixed_only=True))
    with pytest.raises(InputError):
        predict(fit, ds, FamilySpec(GAUSSIAN), X_new=raw_X, fixed_only=False)
    with pytest.raises(DimensionMismatch):
        predict(fit, ds, FamilySpec(GAUSSIAN), X_new=raw_X[:, :1])


def test_predict_response_scale(raw_X):
    ds, fit = binomial_fit(raw_X)
    family = FamilySpec(BINOMIAL)
    probs = predict(fit, ds, family, type=RESPONSE, fixed_only=True)
    assert np.all((probs > 0) & (probs < 1))
    with pytest.raises(ConfigError):
        predict(fit, ds, family, type="odds")


def test_predict_from_coefficients():
    beta = np.array([1.0, 2.0, -1.0])
    X = np.array([[1.0, 1.0], [0.0, 3.0]])
    np.testing.assert_allclose(predict_from_coefficients(beta, X, FamilySpec(GAUSSIAN)), [2.0, -2.0])
    np.testing.assert_allclose(
        predict_from_coefficients(beta, X, FamilySpec(BINOMIAL), type=RESPONSE), 1 / (1 + np.exp([-2.0, 2.0]))
    )
    with pytest.raises(DimensionMismatch):
        predict_from_coefficients(beta, X[:, :1], FamilySpec(GAUSSIAN))


def test_gaussian_residuals_default_to_pearson(gaussian_fit):
    ds, fit = gaussian_fit
    family = FamilySpec(GAUSSIAN)
    raw = ds.y - fitted(fit, ds, fixed_only=True)
    np.testing.assert_allclose(residuals(fit, ds, family), raw / 0.5)
    np.testing.assert_allclose(residuals(fit, ds, family, RESPONSE_RESID), raw)
    with pytest.raises(ConfigError):
        residuals(fit, ds, family, "studentized")


def test_binomial_deviance_residuals_square_to_deviance(raw_X):
    ds, fit = binomial_fit(raw_X)
    family = FamilySpec(BINOMIAL)
    r = residuals(fit, ds, family)
    assert np.sum(r**2) == pytest.approx(deviance(fit, ds, family))
    np.testing.assert_array_equal(np.sign(r), np.where(ds.y == 1.0, 1.0, -1.0))
    mu = family.linkinv(fitted(fit, ds, fixed_only=True))
    np.testing.assert_allclose(residuals(fit, ds, family, PEARSON), (ds.y - mu) / np.sqrt(mu * (1 - mu)))
    assert residuals(fit, ds, family, DEVIANCE).shape == (30,)


def test_coef_table_adds_group_effects(gaussian_fit):
    ds, fit = gaussian_fit
    table = coef_table(fit, ds)
    assert list(table.columns) == ["(Intercept)", "a", "b"]
    ranef = GROUP_ALPHA * [1.0, 2.0]
    np.testing.assert_allclose(table["(Intercept)"], 0.2 + ranef[:, 0])
    np.testing.assert_allclose(table["a"], 0.7 + ranef[:, 1])
    np.testing.assert_allclose(table["b"], -0.3)


def test_sigma_report(gaussian_fit, raw_X):
    ds, fit = gaussian_fit
    report = sigma_report(fit, ds, FamilySpec(GAUSSIAN))
    assert report.residual_sd == pytest.approx(0.5)
    np.testing.assert_allclose(report.cov, np.diag([1.0, 4.0]))
    ds_b, fit_b = binomial_fit(raw_X)
    assert sigma_report(fit_b, ds_b, FamilySpec(BINOMIAL)).residual_sd is None


def test_binomial_deviance_survives_saturated_fits():
    y = np.array([1.0, 0.0, 1.0, 0.0])
    mu = np.array([1.0, 0.0, 0.0, 1.0])
    dev = unit_deviance(FamilySpec(BINOMIAL), y, mu)
    assert np.all(np.isfinite(dev))
    np.testing.assert_allclose(dev[:2], 0.0, atol=1e-8)
    assert np.all(dev[2:] > 40.0)
