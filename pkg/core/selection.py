import logging
import os
import zlib
from dataclasses import dataclass, field

import numpy as np
from scipy import stats
from scipy.special import logsumexp

import config
from core.mcecm import FitConfig, FitResult, fit_single, prescreen, resolve_structure
from core.model_core import CovStructure, Dataset, FamilySpec
from core.mstep import PenaltyConfig, linear_predictor_draws
from core.sampler import PosteriorDraws, SamplerConfig, read_posterior, write_posterior
from utils.decorators import timed
from utils.exceptions import ConfigError, DimensionMismatch

logger = logging.getLogger(__name__)

BICQ = "BICq"
BICH = "BICh"
BIC = "BIC"
BICNGRP = "BICNgrp"
CRITERIA = (BICQ, BICH, BIC, BICNGRP)

ABBREV = "abbrev"
FULL_GRID = "full_grid"

STAGE1 = "stage1"
STAGE2 = "stage2"
BOTH_STAGES = "stage1+2"
GRID = "grid"

_CAME_STREAM = 0xCA4E
_LOG_2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True)
class PenaltySequence:
    lambda0_seq: tuple[float, ...]
    lambda1_seq: tuple[float, ...]
    lambda_min_ratio: float = config.LAMBDA_MIN_RATIO
    nlambda: int = config.NLAMBDA

    def __post_init__(self):
        for name in ("lambda0_seq", "lambda1_seq"):
            seq = np.asarray(getattr(self, name), dtype=float)
            if seq.size == 0:
                raise ConfigError(f"{name} is empty")
            if np.any(seq < 0) or np.any(np.diff(seq) < 0):
                raise ConfigError(f"{name} must be nonnegative and ascending")
            object.__setattr__(self, name, tuple(float(v) for v in seq))

    @classmethod
    def automatic(
        cls,
        lam_max: float,
        ratio: float = config.LAMBDA_MIN_RATIO,
        nlambda: int = config.NLAMBDA,
        lambda0_seq=None,
        lambda1_seq=None,
    ) -> "PenaltySequence":
        auto = make_sequence(lam_max, ratio, nlambda)
        return cls(
            lambda0_seq=tuple(lambda0_seq) if lambda0_seq is not None else auto,
            lambda1_seq=tuple(lambda1_seq) if lambda1_seq is not None else auto,
            lambda_min_ratio=ratio,
            nlambda=nlambda,
        )


@dataclass
class CriterionSet:
    BICq: float | None
    BICh: float
    BIC: float
    BICNgrp: float
    d_lambda: int
    d_beta: int
    d_gamma: int
    loglik: float
    loglik_weighted: float

    def value(self, name: str) -> float | None:
        return getattr(self, name)


@dataclass
class MinimalPenaltyPosterior:
    draws: PosteriorDraws
    lambda0: float
    lambda1: float
    seed: int
    path: str | None = None
    reused: bool = False


@dataclass
class SelectionEntry:
    lambda0: float
    lambda1: float
    fit: FitResult
    criteria: CriterionSet
    stage: str
    grid: tuple[int, int]
    parent: int | None = None


@dataclass
class SelectionResult:
    entries: list[SelectionEntry]
    criterion: str
    search: str
    best: dict[str, int]
    dataset: Dataset
    struct: CovStructure
    sequences: PenaltySequence
    kept_random: tuple[int, ...] = ()
    minpen: MinimalPenaltyPosterior | None = None
    all_nonconverged: bool = False
    lambda_max: float = 0.0

    @property
    def best_entry(self) -> SelectionEntry:
        return self.entries[self.best[self.criterion]]

    @property
    def best_fit(self) -> FitResult:
        return self.best_entry.fit

    def init_graph(self) -> list[tuple[int, int | None]]:
        return [(i, e.parent) for i, e in enumerate(self.entries)]


@dataclass(frozen=True)
class SelectionConfig:
    penalty: PenaltyConfig = field(default_factory=PenaltyConfig)
    fit: FitConfig = field(default_factory=FitConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    criterion: str = BICQ
    search: str = ABBREV
    pre_screen: bool = True
    lambda_min_presc: float | None = None
    lambda_min_ratio: float = config.LAMBDA_MIN_RATIO
    nlambda: int = config.NLAMBDA
    lambda0_seq: tuple[float, ...] | None = None
    lambda1_seq: tuple[float, ...] | None = None
    came_m_star: int = config.CAME_M_STAR
    came_thin: int = config.CAME_THIN
    posterior_path: str | None = None

    def __post_init__(self):
        if self.criterion not in CRITERIA:
            raise ConfigError(f"Unknown criterion '{self.criterion}', expected one of {CRITERIA}")
        if self.search not in (ABBREV, FULL_GRID):
            raise ConfigError(f"Unknown search '{self.search}'")
        if not 0 < self.lambda_min_ratio <= 1:
            raise ConfigError("lambda_min_ratio must lie in (0, 1]")
        if self.nlambda < 1:
            raise ConfigError("nlambda must be at least 1")
        if self.came_m_star < 1 or self.came_thin < 1:
            raise ConfigError("CAME sample size and thinning must be positive")

    def presc_for(self, q: int) -> float:
        if self.lambda_min_presc is not None:
            return self.lambda_min_presc
        return config.LAMBDA_MIN_PRESC_LARGE_Q if q >= config.LARGE_Q_PRESC else config.LAMBDA_MIN_PRESC


def lambda_max(
    dataset: Dataset, family: FamilySpec, alpha_mix: float = 1.0, no_pen=()
) -> float:
    """Smallest penalty that zeroes every penalized fixed effect of the null model."""
    resid = dataset.y - dataset.y.mean()
    score = np.abs(dataset.X.T @ resid) / (dataset.N * alpha_mix)
    penalized = [j for j in range(dataset.p) if j not in set(no_pen)]
    if not penalized:
        return 0.0
    return float(score[penalized].max())


def make_sequence(lam_max: float, ratio: float, nlambda: int) -> tuple[float, ...]:
    if lam_max <= 0:
        return (0.0,)
    if nlambda == 1:
        return (float(lam_max),)
    seq = np.exp(np.linspace(np.log(ratio * lam_max), np.log(lam_max), nlambda))
    seq[-1] = lam_max
    return tuple(float(v) for v in seq)


def _group_rng(seed: int, label) -> np.random.Generator:
    key = zlib.crc32(str(label).encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(_CAME_STREAM, key)))


def came_estimate(log_lik, log_prior, log_importance, inside) -> float:
    """log of mean(f * phi * 1_A / s) over importance draws."""
    log_lik = np.asarray(log_lik, dtype=float)
    inside = np.asarray(inside, dtype=bool)
    if not np.any(inside):
        return -np.inf
    terms = (log_lik + log_prior - log_importance)[inside]
    return float(logsumexp(terms) - np.log(log_lik.size))


@dataclass
class CameResult:
    loglik_weighted: float
    loglik: float
    per_group: list[float]


def _importance_cov(draws_k: np.ndarray, thin: int, label) -> np.ndarray:
    thinned = draws_k[::thin]
    c = draws_k.shape[1]
    cov = np.cov(thinned, rowvar=False).reshape(c, c) if thinned.shape[0] > 1 else np.zeros((c, c))
    try:
        np.linalg.cholesky(cov)
        if np.all(np.isfinite(cov)):
            return cov
    except np.linalg.LinAlgError:
        pass
    logger.warning(f"Importance covariance for group {label} is singular; adding a {config.CAME_RIDGE} ridge")
    return np.nan_to_num(cov) + config.CAME_RIDGE * np.eye(c)


def came_marginal_loglik(
    fit: FitResult,
    dataset: Dataset,
    family: FamilySpec,
    m_star: int = config.CAME_M_STAR,
    thin: int = config.CAME_THIN,
    seed: int = config.DEFAULT_SEED,
) -> CameResult:
    """
    Corrected arithmetic mean estimate of the marginal log-likelihood.

    Each group integrates only over the random effects whose Gamma column is
    nonzero; the rest leave the likelihood unchanged. The importance density
    is a normal fitted to the posterior draws and A_k is their bounding box.
    """
    if fit.draws is None or fit.draws.M == 0:
        raise DimensionMismatch("the marginal likelihood needs posterior draws")
    Gamma = fit.Gamma
    live = np.flatnonzero(np.any(Gamma != 0.0, axis=0))
    A = fit.draws.by_group()
    U = dataset.Z @ Gamma
    eta_fixed = dataset.design @ fit.theta.beta
    tau = fit.theta.tau

    per_group = []
    for k, idx in enumerate(dataset.group_index):
        y_k = dataset.y[idx]
        if live.size == 0:
            per_group.append(float(np.sum(family.log_density(y_k, eta_fixed[idx], tau))))
            continue
        label = dataset.levels[k]
        draws_k = A[:, k][:, live]
        mean = draws_k.mean(axis=0)
        cov = _importance_cov(draws_k, thin, label)
        importance = stats.multivariate_normal(mean=mean, cov=cov)
        samples = np.asarray(importance.rvs(size=m_star, random_state=_group_rng(seed, label)))
        samples = samples.reshape(m_star, live.size)
        log_s = np.atleast_1d(importance.logpdf(samples))
        lo, hi = draws_k.min(axis=0), draws_k.max(axis=0)
        inside = np.all((samples >= lo) & (samples <= hi), axis=1)
        eta = eta_fixed[idx][None, :] + samples @ U[idx][:, live].T
        log_lik = family.log_density(y_k[None, :], eta, tau).sum(axis=1)
        log_prior = -0.5 * np.sum(samples**2, axis=1) - 0.5 * live.size * _LOG_2PI
        value = came_estimate(log_lik, log_prior, log_s, inside)
        if not np.isfinite(value):
            logger.warning(f"No importance draws fell inside the posterior support for group {label}")
        per_group.append(value)

    weighted = float(sum(v / n for v, n in zip(per_group, dataset.sizes)))
    return CameResult(loglik_weighted=weighted, loglik=float(sum(per_group)), per_group=per_group)


def nonzero_counts(fit: FitResult) -> tuple[int, int]:
    return int(np.count_nonzero(fit.theta.beta)), int(np.count_nonzero(fit.theta.gamma))


def bic_icq(
    fit: FitResult,
    minpen: MinimalPenaltyPosterior,
    dataset: Dataset,
    family: FamilySpec,
) -> float:
    """Q-function criterion evaluated on the minimal-penalty posterior draws."""
    draws = minpen.draws
    if draws.q != fit.struct.q or draws.K != dataset.K:
        raise DimensionMismatch(
            f"minimal-penalty draws have K={draws.K}, q={draws.q}; model has K={dataset.K}, q={fit.struct.q}"
        )
    eta = linear_predictor_draws(dataset, fit.theta.beta, fit.theta.gamma, draws, fit.struct)
    log_lik = float(np.sum(family.log_density(dataset.y[None, :], eta, fit.theta.tau)))
    log_phi = float(np.sum(-0.5 * draws.data**2 - 0.5 * _LOG_2PI))
    d_beta, d_gamma = nonzero_counts(fit)
    return -2.0 * (log_lik + log_phi) / draws.M + (d_beta + d_gamma) * np.log(dataset.N)


def bic_family(fit: FitResult, loglik: float, n_obs: int, n_grps: int) -> tuple[float, float, float]:
    """(BIC, BICh, BICNgrp)."""
    d_beta, d_gamma = nonzero_counts(fit)
    d = d_beta + d_gamma
    bic = -2.0 * loglik + d * np.log(n_obs)
    bich = -2.0 * loglik + d_beta * np.log(n_obs) + d_gamma * np.log(n_grps)
    bic_ngrp = -2.0 * loglik + d * np.log(n_grps)
    return float(bic), float(bich), float(bic_ngrp)


def compute_criteria(
    fit: FitResult,
    dataset: Dataset,
    family: FamilySpec,
    minpen: MinimalPenaltyPosterior | None,
    cfg: SelectionConfig,
) -> CriterionSet:
    came = came_marginal_loglik(fit, dataset, family, cfg.came_m_star, cfg.came_thin, cfg.sampler.seed)
    bic, bich, bic_ngrp = bic_family(fit, came.loglik_weighted, dataset.N, dataset.K)
    bicq = bic_icq(fit, minpen, dataset, family) if minpen is not None else None
    d_beta, d_gamma = nonzero_counts(fit)
    return CriterionSet(
        BICq=bicq,
        BICh=bich,
        BIC=bic,
        BICNgrp=bic_ngrp,
        d_lambda=d_beta + d_gamma,
        d_beta=d_beta,
        d_gamma=d_gamma,
        loglik=came.loglik,
        loglik_weighted=came.loglik_weighted,
    )


def _best_index(entries: list[SelectionEntry], indices, criterion: str) -> int:
    """Smallest criterion; ties go to the larger lambda0, then the larger lambda1."""
    scored = [i for i in indices if entries[i].criteria.value(criterion) is not None]
    if not scored:
        raise ConfigError(f"criterion {criterion} was not computed for any fit")
    return min(
        scored,
        key=lambda i: (entries[i].criteria.value(criterion), -entries[i].lambda0, -entries[i].lambda1),
    )


def _best_by_criterion(entries, indices) -> dict[str, int]:
    return {
        name: _best_index(entries, indices, name)
        for name in CRITERIA
        if any(entries[i].criteria.value(name) is not None for i in indices)
    }


def _release_draws(entries: list[SelectionEntry], keep: int):
    for i, entry in enumerate(entries):
        if i != keep:
            entry.fit.draws = None


class _Search:
    """Shared bookkeeping for the warm-started searches."""

    def __init__(self, dataset, family, struct, cfg: SelectionConfig, minpen):
        self.dataset = dataset
        self.family = family
        self.struct = struct
        self.cfg = cfg
        self.minpen = minpen
        self.entries: list[SelectionEntry] = []

    def run(self, lambda0, lambda1, parent: int | None, stage: str, grid, active=None) -> int:
        penalty = self.cfg.penalty.with_lambdas(lambda0, lambda1)
        warm = self.entries[parent].fit if parent is not None else None
        fit = fit_single(
            self.dataset,
            self.family,
            penalty,
            self.cfg.fit,
            self.cfg.sampler,
            theta_init=warm.theta if warm else None,
            chain_init=warm.chain if warm else None,
            struct=self.struct,
            active=active,
        )
        criteria = compute_criteria(fit, self.dataset, self.family, self.minpen, self.cfg)
        self.entries.append(
            SelectionEntry(float(lambda0), float(lambda1), fit, criteria, stage, grid, parent)
        )
        index = len(self.entries) - 1
        logger.info(
            f"[{stage}] lambda0={lambda0:.5g} lambda1={lambda1:.5g} "
            f"{self.cfg.criterion}={criteria.value(self.cfg.criterion)}"
        )
        return index

    def result(self, candidates, seqs: PenaltySequence, search: str) -> SelectionResult:
        best = _best_by_criterion(self.entries, candidates)
        _release_draws(self.entries, best[self.cfg.criterion])
        flagged = not any(self.entries[i].fit.converged for i in candidates)
        if flagged:
            logger.warning("No fit in the search converged; reporting the best by criterion anyway")
        return SelectionResult(
            entries=self.entries,
            criterion=self.cfg.criterion,
            search=search,
            best=best,
            dataset=self.dataset,
            struct=self.struct,
            sequences=seqs,
            minpen=self.minpen,
            all_nonconverged=flagged,
        )


@timed
def two_stage_search(
    dataset: Dataset,
    family: FamilySpec,
    seqs: PenaltySequence,
    cfg: SelectionConfig,
    struct: CovStructure | None = None,
    minpen: MinimalPenaltyPosterior | None = None,
) -> SelectionResult:
    """
    Abbreviated search.

    Stage 1 holds lambda0 at its minimum and sweeps lambda1 upward, never
    re-admitting a random effect once it has been zeroed. Stage 2 holds
    lambda1 at the stage-1 optimum and sweeps lambda0 upward over the
    stage-1 survivors; the overall best comes from stage 2.
    """
    struct = struct or resolve_structure(cfg.fit.covar, dataset.q)
    search = _Search(dataset, family, struct, cfg, minpen)
    lambda0_min = seqs.lambda0_seq[0]

    active = np.ones(dataset.q, dtype=bool)
    stage1 = []
    parent = None
    for h, lambda1 in enumerate(seqs.lambda1_seq):
        parent = search.run(lambda0_min, lambda1, parent, STAGE1, (0, h), tuple(active))
        stage1.append(parent)
        active &= search.entries[parent].fit.nonzero_random()
        active[0] = True

    best1 = _best_index(search.entries, stage1, cfg.criterion)
    lambda1_opt = search.entries[best1].lambda1
    survivors = search.entries[best1].fit.nonzero_random()
    survivors[0] = True
    search.entries[best1].stage = BOTH_STAGES
    h_opt = search.entries[best1].grid[1]
    logger.info(f"Stage 1 picked lambda1={lambda1_opt:.5g} with {int(survivors.sum())} random effects")

    stage2 = [best1]
    parent = best1
    for l, lambda0 in enumerate(seqs.lambda0_seq[1:], start=1):
        parent = search.run(lambda0, lambda1_opt, parent, STAGE2, (l, h_opt), tuple(survivors))
        stage2.append(parent)
    return search.result(stage2, seqs, ABBREV)


@timed
def full_grid_search(
    dataset: Dataset,
    family: FamilySpec,
    seqs: PenaltySequence,
    cfg: SelectionConfig,
    struct: CovStructure | None = None,
    minpen: MinimalPenaltyPosterior | None = None,
) -> SelectionResult:
    """Every (lambda0, lambda1) pair; lambda0 sweeps upward inside each lambda1."""
    struct = struct or resolve_structure(cfg.fit.covar, dataset.q)
    search = _Search(dataset, family, struct, cfg, minpen)
    position: dict[tuple[int, int], int] = {}
    for h, lambda1 in enumerate(seqs.lambda1_seq):
        for l, lambda0 in enumerate(seqs.lambda0_seq):
            if l > 0:
                parent = position[(l - 1, h)]
            elif h > 0:
                parent = position[(0, h - 1)]
            else:
                parent = None
            position[(l, h)] = search.run(lambda0, lambda1, parent, GRID, (l, h))
    return search.result(list(range(len(search.entries))), seqs, FULL_GRID)


def fit_minimal_penalty_model(
    dataset: Dataset,
    family: FamilySpec,
    cfg: SelectionConfig,
    lambda_min_presc: float,
    lambda0_min: float,
    lam_max: float,
    struct: CovStructure | None = None,
) -> MinimalPenaltyPosterior:
    """
    Posterior draws for BIC-ICQ, reloaded from cfg.posterior_path when that file exists.
    """
    path = cfg.posterior_path
    if path and os.path.exists(path):
        draws = read_posterior(path)
        if draws.K != dataset.K or draws.q != dataset.q:
            raise DimensionMismatch(
                f"posterior file {path} has K={draws.K}, q={draws.q}; data has K={dataset.K}, q={dataset.q}"
            )
        logger.info(f"Reusing minimal-penalty posterior from {path}; no refit")
        return MinimalPenaltyPosterior(draws, float("nan"), float("nan"), cfg.sampler.seed, path, reused=True)

    if dataset.q < config.MINPEN_MIN_Q:
        lambda0, lambda1 = 0.0, 0.0
    else:
        lambda0, lambda1 = lambda0_min, lambda_min_presc * lam_max
    logger.info(f"Fitting minimal-penalty model at lambda0={lambda0:.5g}, lambda1={lambda1:.5g}")
    struct = struct or resolve_structure(cfg.fit.covar, dataset.q)
    fit = fit_single(dataset, family, cfg.penalty.with_lambdas(lambda0, lambda1), cfg.fit, cfg.sampler, struct=struct)
    if path:
        write_posterior(fit.draws, path, seed=cfg.sampler.seed)
    return MinimalPenaltyPosterior(fit.draws, lambda0, lambda1, cfg.sampler.seed, path)


@timed
def select_model(dataset: Dataset, family: FamilySpec, cfg: SelectionConfig) -> SelectionResult:
    """
    Prescreen, minimal-penalty posterior, tuning search and criteria in one call.
    """
    lam_max = lambda_max(dataset, family, cfg.penalty.alpha_mix, cfg.penalty.no_pen)
    seqs = PenaltySequence.automatic(lam_max, cfg.lambda_min_ratio, cfg.nlambda, cfg.lambda0_seq, cfg.lambda1_seq)
    presc = cfg.presc_for(dataset.q)
    logger.info(f"lambda_max={lam_max:.5g}; {len(seqs.lambda0_seq)} x {len(seqs.lambda1_seq)} penalty values")

    if cfg.pre_screen and dataset.q >= config.PRESCREEN_MIN_Q:
        kept = prescreen(
            dataset, family, cfg.fit, cfg.sampler, presc, seqs.lambda0_seq[0], lam_max, cfg.penalty
        )
        dataset = dataset.with_random_columns(kept)

    struct = resolve_structure(cfg.fit.covar, dataset.q)
    minpen = None
    if cfg.criterion == BICQ or cfg.posterior_path:
        minpen = fit_minimal_penalty_model(dataset, family, cfg, presc, seqs.lambda0_seq[0], lam_max, struct)

    searcher = two_stage_search if cfg.search == ABBREV else full_grid_search
    result = searcher(dataset, family, seqs, cfg, struct, minpen)
    result.kept_random = dataset.z_cols
    result.lambda_max = lam_max
    return result
