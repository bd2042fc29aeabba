import logging
from dataclasses import dataclass, field

import numpy as np

import config
from core.model_core import (
    DIAGONAL,
    GAUSSIAN,
    UNSTRUCTURED,
    CovStructure,
    Dataset,
    FamilySpec,
    Theta,
    build_Jq,
    gamma_to_matrix,
    initial_gamma,
    normalize_gamma_signs,
)
from core.mstep import MStepConfig, PenaltyConfig, m_step, naive_fit
from core.sampler import (
    ChainState,
    PosteriorDraws,
    SamplerConfig,
    estep_sample,
    new_chain,
    sample_size_schedule,
)
from utils.decorators import timed
from utils.exceptions import ConfigError, DimensionMismatch, InsufficientGroups

logger = logging.getLogger(__name__)

AUTO = "auto"
RECOMMEND = "recommend"


@dataclass(frozen=True)
class FitConfig:
    conv_em: float = config.CONV_EM
    t_lag: int = config.T_LAG
    mcc: int = config.MCC
    maxit_em: int | None = None
    var_start: str | float = RECOMMEND
    covar: str = AUTO
    mstep: MStepConfig = field(default_factory=MStepConfig)

    def __post_init__(self):
        if self.conv_em <= 0:
            raise ConfigError("conv_em must be positive")
        if self.t_lag < 1:
            raise ConfigError("t_lag must be at least 1")
        if self.mcc < 2:
            raise ConfigError("mcc must be at least 2")
        if self.maxit_em is not None and self.maxit_em < 0:
            raise ConfigError("maxit_em cannot be negative")
        if self.covar not in (AUTO, UNSTRUCTURED, DIAGONAL):
            raise ConfigError(f"Unknown covariance structure '{self.covar}'")
        if self.var_start != RECOMMEND:
            try:
                positive = float(self.var_start) > 0
            except (TypeError, ValueError):
                positive = False
            if not positive:
                raise ConfigError("var_start must be 'recommend' or a positive number")

    def maxit_for(self, family: FamilySpec) -> int:
        if self.maxit_em is not None:
            return self.maxit_em
        return config.MAXIT_EM_GAUSSIAN if family.kind == GAUSSIAN else config.MAXIT_EM_OTHER


@dataclass
class IterationRecord:
    iteration: int
    n_mc: int
    distance: float | None
    counter: int
    mstep_iterations: int
    mstep_cap_hit: bool
    variance_shift: float | None = None


@dataclass
class FitResult:
    theta: Theta
    struct: CovStructure
    draws: PosteriorDraws | None
    chain: ChainState | None = None
    penalty: PenaltyConfig = field(default_factory=PenaltyConfig)
    converged: bool = False
    reason: str = ""
    iterations: int = 0
    trace: list[IterationRecord] = field(default_factory=list)
    active: tuple[bool, ...] | None = None
    criteria: object | None = None

    @property
    def Gamma(self) -> np.ndarray:
        return gamma_to_matrix(self.theta.gamma, self.struct)

    @property
    def ranef_cov(self) -> np.ndarray:
        G = self.Gamma
        return G @ G.T

    def nonzero_random(self) -> np.ndarray:
        """Random effects whose variance is nonzero."""
        return np.diag(self.ranef_cov) > 0


def resolve_structure(covar: str, q: int, n_active: int | None = None) -> CovStructure:
    """Auto picks a diagonal covariance once 10 or more random effects are in play."""
    if covar == AUTO:
        n = q if n_active is None else n_active
        covar = DIAGONAL if n >= config.LARGE_Q else UNSTRUCTURED
    return CovStructure(covar, q)


def initialize_theta(
    dataset: Dataset,
    family: FamilySpec,
    cfg: FitConfig,
    penalty_cfg: PenaltyConfig,
    struct: CovStructure,
    sampler_cfg: SamplerConfig | None = None,
    active=None,
) -> Theta:
    """
    Starting values from a penalized GLM without random effects.

    Gamma starts diagonal with sqrt(var_start) on the active rows.
    """
    naive = naive_fit(dataset, family, penalty_cfg, delta=cfg.mstep.delta)
    if not naive.converged:
        logger.warning("Naive fixed-effects fit hit its iteration cap")
    if cfg.var_start == RECOMMEND:
        var_start = var_start_recommend(dataset, family, sampler_cfg)
    else:
        var_start = float(cfg.var_start)
    rows = None if active is None else [t for t in range(struct.q) if active[t]]
    gamma = initial_gamma(struct, var_start, rows)
    tau = max(naive.residual_variance, 1e-10) if family.has_dispersion else 1.0
    return Theta(beta=naive.beta, gamma=gamma, tau=tau)


@timed
def var_start_recommend(
    dataset: Dataset, family: FamilySpec, sampler_cfg: SamplerConfig | None = None
) -> float:
    """Twice the random-intercept variance of a short unpenalized fit, floored."""
    if dataset.K < 2:
        raise InsufficientGroups(
            f"at least two groups are needed to estimate a starting variance, got {dataset.K}"
        )
    sampler_cfg = sampler_cfg or SamplerConfig()
    intercept_only = dataset.with_random_columns(())
    short = SamplerConfig(
        kind=sampler_cfg.kind,
        nmc_burnin=sampler_cfg.nmc_burnin,
        nmc_start=min(sampler_cfg.start_for(1), config.VAR_START_NMC_MAX),
        nmc_max=config.VAR_START_NMC_MAX,
        nmc_report=config.VAR_START_NMC_MAX,
        seed=sampler_cfg.seed,
        threads=sampler_cfg.threads,
    )
    fit = fit_single(
        intercept_only,
        family,
        PenaltyConfig(),
        FitConfig(maxit_em=config.VAR_START_MAXIT_EM, var_start=1.0),
        short,
        final_draws=False,
    )
    variance = float(fit.ranef_cov[0, 0])
    recommended = max(config.VAR_START_FLOOR, config.VAR_START_MULTIPLIER * variance)
    logger.info(f"Recommended starting variance {recommended:.4f} (intercept variance {variance:.4f})")
    return recommended


def coefficient_distance(coef_s: np.ndarray, coef_lag: np.ndarray) -> float:
    d_n = int(np.count_nonzero(coef_lag))
    if d_n == 0:
        return 0.0
    return float(np.sum((coef_s - coef_lag) ** 2) / d_n)


def variance_shift(gamma_s: np.ndarray, gamma_lag: np.ndarray, struct: CovStructure) -> float:
    """Largest relative change of a random-effect variance between two gamma vectors."""
    new = np.sum(gamma_to_matrix(gamma_s, struct) ** 2, axis=1)
    old = np.sum(gamma_to_matrix(gamma_lag, struct) ** 2, axis=1)
    scale = np.maximum(np.maximum(new, old), config.VARIANCE_SHIFT_FLOOR)
    return float(np.max(np.abs(new - old) / scale))


def em_converged(
    coef_s: np.ndarray,
    coef_lag: np.ndarray,
    eps: float,
    counter: int,
    mcc: int = config.MCC,
    shift: float = 0.0,
) -> tuple[bool, int, float]:
    """
    Advances the consecutive-pass counter; converged once it reaches mcc.

    A pass needs the lagged coefficient distance below eps and the lagged
    relative variance shift below config.VARIANCE_SHIFT_TOL.
    """
    distance = coefficient_distance(np.asarray(coef_s, dtype=float), np.asarray(coef_lag, dtype=float))
    passed = distance < eps and shift < config.VARIANCE_SHIFT_TOL
    counter = counter + 1 if passed else 0
    return counter >= mcc, counter, distance


def _apply_active(theta: Theta, struct: CovStructure, active) -> Theta:
    if active is None:
        return theta
    G = gamma_to_matrix(theta.gamma, struct)
    off = ~np.asarray(active, dtype=bool)
    G[off, :] = 0.0
    G[:, off] = 0.0
    gamma = np.empty(struct.n_gamma)
    for t in range(struct.q):
        gamma[struct.row_indices(t)] = G[t, struct.row_columns(t)]
    return Theta(beta=theta.beta, gamma=gamma, tau=theta.tau)


def _normalized(theta: Theta, struct: CovStructure, draws, chain):
    gamma, signs = normalize_gamma_signs(theta.gamma, struct)
    if np.all(signs > 0):
        return theta, draws, chain
    theta = Theta(beta=theta.beta, gamma=gamma, tau=theta.tau)
    if draws is not None:
        flipped = draws.by_group() * signs[None, None, :]
        draws = PosteriorDraws(
            data=flipped.reshape(draws.M, -1), labels=list(draws.labels), K=draws.K, q=draws.q
        )
    if chain is not None:
        chain.current = chain.current * signs[None, :]
    return theta, draws, chain


def fit_single(
    dataset: Dataset,
    family: FamilySpec,
    penalty_cfg: PenaltyConfig,
    fit_cfg: FitConfig,
    sampler_cfg: SamplerConfig,
    theta_init: Theta | None = None,
    chain_init: ChainState | None = None,
    struct: CovStructure | None = None,
    active=None,
    final_draws: bool = True,
) -> FitResult:
    """
    MCECM fit at one penalty pair.

    Alternates E-steps (chain warm-started from the previous iteration) and
    M-steps until the lagged coefficient distance passes mcc times in a row
    or maxit_em is reached, then draws the final posterior sample.
    """
    n_active = None if active is None else int(np.sum(active))
    struct = struct or resolve_structure(fit_cfg.covar, dataset.q, n_active)
    if struct.q != dataset.q:
        raise DimensionMismatch(f"covariance has q={struct.q}, data has q={dataset.q}")
    active = None if active is None else tuple(bool(a) for a in active)
    Jq = build_Jq(struct)

    theta = theta_init or initialize_theta(dataset, family, fit_cfg, penalty_cfg, struct, sampler_cfg, active)
    theta = _apply_active(theta, struct, active)
    chain = chain_init.copy() if chain_init is not None else new_chain(dataset, sampler_cfg.seed)

    maxit = fit_cfg.maxit_for(family)
    history = [theta.coefficients()]
    gammas = [theta.gamma]
    trace: list[IterationRecord] = []
    counter = 0
    converged = False
    M = None
    logger.info(
        f"Fitting {family.kind} model: lambda0={penalty_cfg.lambda0:.5g}, "
        f"lambda1={penalty_cfg.lambda1:.5g}, {struct.kind} q={struct.q}"
    )

    for s in range(1, maxit + 1):
        M = sample_size_schedule(s, M, dataset.q, sampler_cfg.start_for(dataset.q), sampler_cfg.max_for(dataset.q))
        draws = estep_sample(
            dataset,
            theta,
            family,
            chain,
            M,
            sampler_cfg.nmc_burnin,
            sampler_cfg.kind,
            struct,
            sampler_cfg.seed,
            sampler_cfg.threads,
        )
        step = m_step(theta, dataset, draws, family, penalty_cfg, struct, fit_cfg.mstep, active, Jq)
        theta = step.theta
        history.append(theta.coefficients())
        gammas.append(theta.gamma)

        distance = shift = None
        if s >= fit_cfg.t_lag:
            shift = variance_shift(gammas[-1], gammas[-1 - fit_cfg.t_lag], struct)
            converged, counter, distance = em_converged(
                history[-1], history[-1 - fit_cfg.t_lag], fit_cfg.conv_em, counter, fit_cfg.mcc, shift
            )
        trace.append(IterationRecord(s, M, distance, counter, step.iterations, step.cap_hit, shift))
        if converged:
            break

    iterations = len(trace)
    if converged:
        reason = (
            f"coefficient distance below {fit_cfg.conv_em} with stable variances "
            f"for {fit_cfg.mcc} consecutive iterations"
        )
    else:
        reason = f"reached maxit_em={maxit}"
        logger.warning(f"EM did not converge: {reason}")

    draws = None
    if final_draws:
        draws = estep_sample(
            dataset,
            theta,
            family,
            chain,
            sampler_cfg.nmc_report,
            sampler_cfg.nmc_burnin,
            sampler_cfg.kind,
            struct,
            sampler_cfg.seed,
            sampler_cfg.threads,
        )
    theta, draws, chain = _normalized(theta, struct, draws, chain)
    logger.info(f"Fit finished after {iterations} EM iterations (converged={converged})")
    return FitResult(
        theta=theta,
        struct=struct,
        draws=draws,
        chain=chain,
        penalty=penalty_cfg,
        converged=converged,
        reason=reason,
        iterations=iterations,
        trace=trace,
        active=active,
    )


@timed
def prescreen(
    dataset: Dataset,
    family: FamilySpec,
    fit_cfg: FitConfig,
    sampler_cfg: SamplerConfig,
    lambda_min_presc: float,
    lambda0_min: float,
    lambda_max: float,
    penalty_cfg: PenaltyConfig | None = None,
) -> tuple[int, ...]:
    """
    Random-effect columns that survive one lax, lightly penalized fit.

    Returns X column indices; the random intercept is always kept.
    """
    if dataset.q < config.PRESCREEN_MIN_Q:
        return dataset.z_cols
    penalty_cfg = (penalty_cfg or PenaltyConfig()).with_lambdas(lambda0_min, lambda_min_presc * lambda_max)
    maxit = fit_cfg.maxit_for(family)
    lax = FitConfig(
        conv_em=fit_cfg.conv_em * config.PRESCREEN_CONV_FACTOR,
        t_lag=fit_cfg.t_lag,
        mcc=fit_cfg.mcc,
        maxit_em=max(1, maxit // 2),
        var_start=fit_cfg.var_start,
        covar=fit_cfg.covar,
        mstep=fit_cfg.mstep,
    )
    fit = fit_single(dataset, family, penalty_cfg, lax, sampler_cfg, final_draws=False)
    variances = np.diag(fit.ranef_cov)
    kept = tuple(
        c for t, c in enumerate(dataset.z_cols, start=1) if variances[t] >= config.PRESCREEN_VAR_THRESHOLD
    )
    dropped = [dataset.covariate_names[c] for c in dataset.z_cols if c not in kept]
    logger.info(f"Pre-screening kept {len(kept)} of {len(dataset.z_cols)} random effects; dropped {dropped}")
    return kept
