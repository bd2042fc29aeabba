import json
import logging
import os
from dataclasses import dataclass, field, fields, replace

import config
from core.mcecm import AUTO, RECOMMEND, FitConfig
from core.model_core import BINOMIAL, DIAGONAL, Dataset
from core.mstep import MCP, MStepConfig, PenaltyConfig
from core.sampler import ADAPTIVE_RW, SamplerConfig
from core.selection import ABBREV, BICQ, SelectionConfig
from core.simgen import SimScenario
from utils.exceptions import ConfigError, InputError
from utils.models import ColumnRoles

logger = logging.getLogger(__name__)

THREADS_ENV = "PGLMM_THREADS"

# Alternative spellings accepted for covar
_COVAR_ALIASES = {"independent": DIAGONAL, "independence": DIAGONAL}


def default_threads() -> int:
    raw = os.getenv(THREADS_ENV)
    if not raw:
        return config.DEFAULT_THREADS
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be an integer, got '{raw}'")


@dataclass
class RunConfig:
    """
    Everything one CLI run needs.

    Built from config.py defaults, then an optional JSON document, then
    command-line flags, each layer overriding the previous one.
    """

    verb: str = ""
    data: str | None = None
    out: str = config.DEFAULT_OUT_DIR
    seed: int = config.DEFAULT_SEED
    threads: int = field(default_factory=default_threads)

    # Columns
    response: str = "y"
    group: str = "group"
    covariates: list[str] | str = "all"
    random: list[str] | str = "all"

    # Model
    family: str = BINOMIAL
    covar: str = AUTO
    penalty: str = MCP
    lambda0: float = 0.0
    lambda1: float = 0.0
    gamma_scale: float | None = None
    alpha: float = 1.0
    fixef_nopen: list[str] = field(default_factory=list)

    # Selection
    search: str = ABBREV
    bic_option: str = BICQ
    pre_screen: bool = True
    lambda_min_presc: float | None = None
    lambda_min_ratio: float = config.LAMBDA_MIN_RATIO
    nlambda: int = config.NLAMBDA
    lambda0_seq: list[float] | None = None
    lambda1_seq: list[float] | None = None
    came_m_star: int = config.CAME_M_STAR
    posterior: str | None = None

    # Sampler and EM
    sampler: str = ADAPTIVE_RW
    nmc_burnin: int = config.NMC_BURNIN
    nmc_start: int | None = None
    nmc_max: int | None = None
    nmc_report: int = config.NMC_REPORT
    var_start: str | float = RECOMMEND
    conv_em: float = config.CONV_EM
    t_lag: int = config.T_LAG
    mcc: int = config.MCC
    maxit_em: int | None = None
    conv_cd: float = config.CONV_CD
    maxit_cd: int = config.MAXIT_CD

    # predict
    report: str | None = None
    type: str = "response"

    # simulate
    n: int = 500
    p: int = 10
    k: int = 5
    sigma: float = 1.0
    effect: float = 1.0
    replicates: int = 0

    # diagnose
    grps: list[str] | str = "all"
    vars: list[str] | str = "all"
    max_lag: int = config.MAX_LAG
    bins: int = config.HIST_BINS

    @classmethod
    def field_names(cls) -> set[str]:
        return {f.name for f in fields(cls)}

    @classmethod
    def from_sources(cls, verb: str, flags: dict, config_path: str | None = None) -> "RunConfig":
        cfg = cls(verb=verb)
        if config_path:
            cfg = cfg.merged(cls.load_document(config_path), source=config_path)
        return cfg.merged({k: v for k, v in flags.items() if v is not None}, source="command line")

    @staticmethod
    def load_document(path: str) -> dict:
        if not os.path.exists(path):
            raise InputError(f"config file not found: {path}")
        try:
            with open(path, encoding="utf-8") as handle:
                document = json.load(handle)
        except ValueError as e:
            raise ConfigError(f"{path} is not valid JSON: {e}") from e
        if not isinstance(document, dict):
            raise ConfigError(f"{path} must hold a JSON object")
        return document

    def merged(self, values: dict, source: str) -> "RunConfig":
        unknown = sorted(set(values) - self.field_names())
        if unknown:
            raise ConfigError(f"unknown setting(s) {', '.join(unknown)} in {source}")
        return replace(self, **values)

    # Conversions to the solver's config objects

    def roles(self) -> ColumnRoles:
        return ColumnRoles(self.response, self.group, self.covariates, self.random)

    def covar_kind(self) -> str:
        return _COVAR_ALIASES.get(self.covar, self.covar)

    def sampler_config(self) -> SamplerConfig:
        return SamplerConfig(
            kind=self.sampler,
            nmc_burnin=self.nmc_burnin,
            nmc_start=self.nmc_start,
            nmc_max=self.nmc_max,
            nmc_report=self.nmc_report,
            seed=self.seed,
            threads=self.threads,
        )

    def fit_config(self) -> FitConfig:
        var_start = self.var_start
        if var_start != RECOMMEND:
            try:
                var_start = float(var_start)
            except (TypeError, ValueError):
                raise ConfigError(f"var_start must be 'recommend' or a positive number, got '{var_start}'") from None
        return FitConfig(
            conv_em=self.conv_em,
            t_lag=self.t_lag,
            mcc=self.mcc,
            maxit_em=self.maxit_em,
            var_start=var_start,
            covar=self.covar_kind(),
            mstep=MStepConfig(delta=self.conv_cd, maxit_cd=self.maxit_cd),
        )

    def penalty_config(self, dataset: Dataset) -> PenaltyConfig:
        names = list(dataset.covariate_names)
        no_pen = []
        for name in self.fixef_nopen:
            if name not in names:
                raise ConfigError(f"fixef_nopen names unknown covariate '{name}'")
            no_pen.append(names.index(name))
        return PenaltyConfig(
            penalty=self.penalty,
            lambda0=self.lambda0,
            lambda1=self.lambda1,
            gamma_scale=self.gamma_scale,
            alpha_mix=self.alpha,
            no_pen=tuple(no_pen),
        )

    def selection_config(self, dataset: Dataset) -> SelectionConfig:
        return SelectionConfig(
            penalty=self.penalty_config(dataset),
            fit=self.fit_config(),
            sampler=self.sampler_config(),
            criterion=self.bic_option,
            search=self.search,
            pre_screen=self.pre_screen,
            lambda_min_presc=self.lambda_min_presc,
            lambda_min_ratio=self.lambda_min_ratio,
            nlambda=self.nlambda,
            lambda0_seq=tuple(self.lambda0_seq) if self.lambda0_seq is not None else None,
            lambda1_seq=tuple(self.lambda1_seq) if self.lambda1_seq is not None else None,
            came_m_star=self.came_m_star,
            posterior_path=self.posterior,
        )

    def scenario(self, seed: int | None = None) -> SimScenario:
        return SimScenario(
            N=self.n,
            p=self.p,
            K=self.k,
            sigma=self.sigma,
            effect=self.effect,
            seed=self.seed if seed is None else seed,
            family=self.family,
        )
