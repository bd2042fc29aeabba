import logging
import math
from dataclasses import dataclass

import numpy as np
import pandas as pd
from scipy.special import expit

import config
from core.mcecm import FitResult
from core.model_core import BINOMIAL, GAUSSIAN, POISSON, Dataset, destandardize, make_dataset
from utils.exceptions import ConfigError
from utils.models import SelectionScore, TruthRecord

logger = logging.getLogger(__name__)

GROUP_COLUMN = "group"
RESPONSE_COLUMN = "y"


@dataclass(frozen=True)
class SimScenario:
    """
    Simulation design: N observations in K unbalanced groups, p standard normal covariates.

    beta_true defaults to (0, effect, effect, 0, ..., 0); the random effects sit
    on the intercept and the nonzero slopes with standard deviation sigma.
    """

    N: int = 500
    p: int = 10
    K: int = 5
    sigma: float = 1.0
    effect: float = 1.0
    beta_true: tuple[float, ...] | None = None
    seed: int = config.DEFAULT_SEED
    family: str = BINOMIAL

    def __post_init__(self):
        if self.p < 2:
            raise ConfigError("simulation needs at least two covariates")
        if self.K < 1 or self.N < self.K:
            raise ConfigError("need at least one observation per group")
        if self.sigma < 0:
            raise ConfigError("sigma must be nonnegative")
        if self.family not in (BINOMIAL, GAUSSIAN, POISSON):
            raise ConfigError(f"Unknown family '{self.family}'")
        if self.beta_true is not None and len(self.beta_true) != self.p + 1:
            raise ConfigError(f"beta_true needs {self.p + 1} entries (intercept first)")

    @property
    def beta(self) -> np.ndarray:
        if self.beta_true is not None:
            return np.asarray(self.beta_true, dtype=float)
        beta = np.zeros(self.p + 1)
        beta[1:3] = self.effect
        return beta

    @property
    def names(self) -> list[str]:
        return [f"X{j + 1}" for j in range(self.p)]


def group_sizes(N: int, K: int) -> list[int]:
    """ceil(N/3) to the first group, the rest split evenly with leftovers to the lowest indices."""
    if K == 1:
        return [N]
    first = math.ceil(N / 3)
    rest = N - first
    base, extra = divmod(rest, K - 1)
    return [first] + [base + (1 if k < extra else 0) for k in range(K - 1)]


def _generate(scenario: SimScenario):
    rng = np.random.default_rng(scenario.seed)
    sizes = group_sizes(scenario.N, scenario.K)
    group = np.repeat(np.arange(1, scenario.K + 1), sizes)
    X = rng.standard_normal((scenario.N, scenario.p))
    beta = scenario.beta
    fixed_positions = [j for j in range(scenario.p) if beta[j + 1] != 0]
    random_positions = list(fixed_positions)

    alpha = scenario.sigma * rng.standard_normal((scenario.K, 1 + len(random_positions)))
    Z = np.column_stack([np.ones(scenario.N), X[:, random_positions]])
    eta = beta[0] + X @ beta[1:] + np.einsum("nq,nq->n", Z, alpha[group - 1])

    if scenario.family == BINOMIAL:
        y = rng.binomial(1, expit(eta)).astype(float)
    elif scenario.family == POISSON:
        y = rng.poisson(np.exp(eta)).astype(float)
    else:
        y = eta + rng.standard_normal(scenario.N)

    truth = TruthRecord(
        family=scenario.family,
        seed=scenario.seed,
        sigma=scenario.sigma,
        beta_true=[float(b) for b in beta],
        covariate_names=scenario.names,
        fixed_positions=fixed_positions,
        random_positions=random_positions,
        group_sizes=sizes,
    )
    return y, X, group, truth


def simulate_frame(scenario: SimScenario) -> tuple[pd.DataFrame, TruthRecord]:
    """Raw simulated data in the CSV layout: group, y, X1..Xp."""
    y, X, group, truth = _generate(scenario)
    frame = pd.DataFrame(X, columns=scenario.names)
    frame.insert(0, RESPONSE_COLUMN, y)
    frame.insert(0, GROUP_COLUMN, group)
    return frame, truth


def simulate(scenario: SimScenario) -> tuple[Dataset, TruthRecord]:
    """Standardized dataset with every covariate also a random-effect candidate."""
    y, X, group, truth = _generate(scenario)
    dataset = make_dataset(y, X, group, z_cols=range(scenario.p), names=scenario.names)
    return dataset, truth


def score(result, truth: TruthRecord, dataset: Dataset | None = None, wall_time: float = 0.0) -> SelectionScore:
    """
    True and false positives of the selected model against the simulation truth.

    result is a SelectionResult or a FitResult; dataset defaults to the one the
    selection ran on.
    """
    fit: FitResult = getattr(result, "best_fit", result)
    dataset = dataset if dataset is not None else result.dataset
    beta = fit.theta.beta
    fixed_selected = {j for j in range(dataset.p) if beta[j + 1] != 0}
    variances = np.diag(fit.ranef_cov)
    random_selected = {c for t, c in enumerate(dataset.z_cols, start=1) if variances[t] > 0}

    true_fixed = set(truth.fixed_positions)
    true_random = set(truth.random_positions)
    raw = destandardize(beta, dataset.centers, dataset.scales)
    return SelectionScore(
        tp_fixef=len(fixed_selected & true_fixed),
        fp_fixef=len(fixed_selected - true_fixed),
        tp_ranef=len(random_selected & true_random),
        fp_ranef=len(random_selected - true_random),
        beta_hat=[float(raw[j + 1]) for j in truth.fixed_positions],
        wall_time=wall_time,
    )
