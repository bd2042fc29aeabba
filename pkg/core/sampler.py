import json
import logging
import math
import os
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

import config
from core.model_core import CovStructure, Dataset, FamilySpec, Theta, gamma_to_matrix
from utils.exceptions import (
    ConfigError,
    DimensionMismatch,
    PosteriorFileError,
    SamplerError,
)

logger = logging.getLogger(__name__)

ADAPTIVE_RW = "adaptive_rw"
INDEPENDENCE = "independence"

POSTERIOR_MAGIC = b"PGLMPOST1"
_HEADER = np.dtype("<u8")
_PAYLOAD = np.dtype("<f8")


@dataclass(frozen=True)
class SamplerConfig:
    kind: str = ADAPTIVE_RW
    nmc_burnin: int = config.NMC_BURNIN
    nmc_start: int | None = None
    nmc_max: int | None = None
    nmc_report: int = config.NMC_REPORT
    seed: int = config.DEFAULT_SEED
    threads: int = config.DEFAULT_THREADS

    def __post_init__(self):
        if self.kind not in (ADAPTIVE_RW, INDEPENDENCE):
            raise ConfigError(f"Unknown sampler '{self.kind}'")
        for name in ("nmc_burnin", "nmc_report", "threads"):
            value = getattr(self, name)
            if value < 0 or (name == "threads" and value < 1):
                raise ConfigError(f"{name} must be positive, got {value}")
        for name in ("nmc_start", "nmc_max"):
            value = getattr(self, name)
            if value is not None and value < 1:
                raise ConfigError(f"{name} must be positive, got {value}")
        if (
            self.nmc_start is not None
            and self.nmc_max is not None
            and self.nmc_start > self.nmc_max
        ):
            raise ConfigError("nmc_start cannot exceed nmc_max")

    def start_for(self, q: int) -> int:
        if self.nmc_start is not None:
            return self.nmc_start
        return config.NMC_START_SMALL_Q if q <= config.LARGE_Q else config.NMC_START_LARGE_Q

    def max_for(self, q: int) -> int:
        if self.nmc_max is not None:
            return self.nmc_max
        return config.NMC_MAX_SMALL_Q if q <= config.LARGE_Q else config.NMC_MAX_LARGE_Q


@dataclass
class ChainState:
    """
    Per-group Metropolis-within-Gibbs state carried from one E-step to the next.

    All arrays are K x q. n_estep counts the E-steps run so far and keys the
    per-group random streams; n_batches drives the diminishing adaptation.
    """

    current: np.ndarray
    rw_log_scales: np.ndarray
    accept_counts: np.ndarray
    n_batches: int = 0
    n_estep: int = 0
    n_sweeps: int = 0

    def copy(self) -> "ChainState":
        return ChainState(
            current=self.current.copy(),
            rw_log_scales=self.rw_log_scales.copy(),
            accept_counts=self.accept_counts.copy(),
            n_batches=self.n_batches,
            n_estep=self.n_estep,
            n_sweeps=self.n_sweeps,
        )

    def acceptance_rates(self) -> np.ndarray:
        if self.n_sweeps == 0:
            return np.zeros_like(self.accept_counts)
        return self.accept_counts / self.n_sweeps


@dataclass
class PosteriorDraws:
    """M x (K*q) draws of the standardized random effects, group-major columns."""

    data: np.ndarray
    labels: list[tuple] = field(default_factory=list)
    K: int = 0
    q: int = 0

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=float)
        if self.data.ndim != 2 or self.data.shape[1] != self.K * self.q:
            raise DimensionMismatch(
                f"draws have shape {self.data.shape}, expected (M, {self.K * self.q})"
            )
        if len(self.labels) != self.K * self.q:
            raise DimensionMismatch("one label per draw column is required")
        if len(set(self.labels)) != len(self.labels):
            raise DimensionMismatch("draw column labels must be unique")

    @property
    def M(self) -> int:
        return self.data.shape[0]

    def by_group(self) -> np.ndarray:
        """View shaped M x K x q."""
        return self.data.reshape(self.M, self.K, self.q)

    @classmethod
    def from_array(cls, draws: np.ndarray, levels, variables) -> "PosteriorDraws":
        M, K, q = draws.shape
        labels = [(_plain(g), v) for g in levels for v in variables]
        return cls(data=draws.reshape(M, K * q), labels=labels, K=K, q=q)


def _plain(value):
    return value.item() if isinstance(value, np.generic) else value


def group_key(label) -> int:
    return zlib.crc32(str(label).encode("utf-8"))


def _group_rng(seed: int, counter: int, label) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence(seed, spawn_key=(counter, group_key(label)))
    )


def _group_streams(seed: int, counter: int, label) -> tuple[np.random.Generator, np.random.Generator]:
    """Separate proposal and acceptance streams, so chunked draws match one long draw."""
    proposal, acceptance = np.random.SeedSequence(seed, spawn_key=(counter, group_key(label))).spawn(2)
    return np.random.default_rng(proposal), np.random.default_rng(acceptance)


def new_chain(dataset: Dataset, seed: int = config.DEFAULT_SEED) -> ChainState:
    """Chain started from independent standard normal draws per group."""
    K, q = dataset.K, dataset.q
    current = np.vstack(
        [_group_rng(seed, 0, label).standard_normal(q) for label in dataset.levels]
    )
    return ChainState(
        current=current,
        rw_log_scales=np.zeros((K, q)),
        accept_counts=np.zeros((K, q)),
    )


def sample_size_schedule(
    s: int, M_prev: int | None, q: int, nmc_start: int | None = None, nmc_max: int | None = None
) -> int:
    """Number of retained draws at EM iteration s."""
    if s < 1:
        raise ConfigError(f"EM iteration must be at least 1, got {s}")
    defaults = SamplerConfig(nmc_start=nmc_start, nmc_max=nmc_max)
    start, cap = defaults.start_for(q), defaults.max_for(q)
    if s == 1 or M_prev is None:
        return min(start, cap)
    factor = (
        config.SCHEDULE_FACTOR_EARLY
        if s <= config.SCHEDULE_SWITCH_ITER
        else config.SCHEDULE_FACTOR_LATE
    )
    # 1.1 * 250 is 275.00000000000006 in floating point
    return min(cap, max(M_prev, math.ceil(factor * M_prev - 1e-9)))


def mh_accept(log_post_prop, log_post_cur, log_q_ratio=0.0, u=None, rng=None):
    """
    Metropolis-Hastings decision, elementwise over arrays.

    u are uniforms on [0, 1); drawn from rng when not given.
    """
    ratio = np.asarray(log_post_prop, dtype=float) - log_post_cur + log_q_ratio
    if u is None:
        rng = rng or np.random.default_rng()
        u = rng.random(ratio.shape)
    with np.errstate(divide="ignore", invalid="ignore"):
        accept = np.log(u) < ratio
    return bool(accept) if np.ndim(accept) == 0 else accept


def adaptation_step(n_batch: int) -> float:
    return min(config.ADAPT_MAX_STEP, n_batch ** -0.5)


def _adapted(log_scales: np.ndarray, rates: np.ndarray, n_batch: int) -> np.ndarray:
    step = adaptation_step(n_batch)
    moved = log_scales + np.where(
        rates > config.ADAPT_TARGET, step, np.where(rates < config.ADAPT_TARGET, -step, 0.0)
    )
    return np.clip(moved, -config.LOG_SCALE_BOUND, config.LOG_SCALE_BOUND)


def adapt_scales(chain: ChainState, batch_accept_rates: np.ndarray) -> ChainState:
    """Widen proposals that accept above target, narrow the rest."""
    chain.n_batches += 1
    chain.rw_log_scales = _adapted(chain.rw_log_scales, batch_accept_rates, chain.n_batches)
    return chain


@dataclass
class _GroupBlock:
    groups: np.ndarray
    y: np.ndarray
    eta_fixed: np.ndarray
    U: np.ndarray
    codes: np.ndarray


def _make_blocks(dataset: Dataset, eta_fixed: np.ndarray, U: np.ndarray, threads: int):
    chunks = np.array_split(np.arange(dataset.K), max(1, min(threads, dataset.K)))
    blocks = []
    for groups in chunks:
        if groups.size == 0:
            continue
        rows = np.concatenate([dataset.group_index[k] for k in groups])
        local = np.concatenate(
            [np.full(dataset.group_index[k].size, g) for g, k in enumerate(groups)]
        )
        blocks.append(
            _GroupBlock(
                groups=groups,
                y=dataset.y[rows],
                eta_fixed=eta_fixed[rows],
                U=U[rows],
                codes=local.astype(np.int64),
            )
        )
    return blocks


def _group_loglik(family: FamilySpec, block: _GroupBlock, eta: np.ndarray, tau: float):
    return np.bincount(
        block.codes,
        weights=family.log_density(block.y, eta, tau),
        minlength=block.groups.size,
    )


def _random_chunk(streams, n: int, q: int):
    """Next n sweeps of proposal normals and acceptance uniforms, G x n x q each."""
    normals = np.empty((len(streams), n, q))
    uniforms = np.empty((len(streams), n, q))
    for g, (proposal, acceptance) in enumerate(streams):
        normals[g] = proposal.standard_normal((n, q))
        uniforms[g] = acceptance.random((n, q))
    return normals, uniforms


def _run_block(
    block: _GroupBlock,
    family: FamilySpec,
    tau: float,
    alpha0: np.ndarray,
    log_scales0: np.ndarray,
    streams: list[tuple[np.random.Generator, np.random.Generator]],
    burnin: int,
    M: int,
    kind: str,
    n_batches0: int,
):
    G, q = alpha0.shape
    alpha = alpha0.copy()
    log_scales = log_scales0.copy()
    eta = block.eta_fixed + np.einsum("nq,nq->n", block.U, alpha[block.codes])
    ll = _group_loglik(family, block, eta, tau)
    if not np.all(np.isfinite(ll)):
        bad = block.groups[~np.isfinite(ll)]
        raise SamplerError(f"posterior log-density is not finite for groups {bad.tolist()}")

    live = [bool(np.any(block.U[:, j] != 0.0)) for j in range(q)]
    out = np.empty((M, G, q))
    accepted = np.zeros((G, q))
    batch = np.zeros((G, q))
    n_batches = n_batches0
    adapt = kind == ADAPTIVE_RW

    for sweep in range(burnin + M):
        offset = sweep % config.RNG_CHUNK
        if offset == 0:
            normals, uniforms = _random_chunk(streams, min(config.RNG_CHUNK, burnin + M - sweep), q)
        for j in range(q):
            cur = alpha[:, j]
            if kind == ADAPTIVE_RW:
                prop = cur + np.exp(log_scales[:, j]) * normals[:, offset, j]
                log_q = 0.0
            else:
                prop = normals[:, offset, j]
                log_q = 0.5 * prop**2 - 0.5 * cur**2
            prior_cur = -0.5 * cur**2
            prior_prop = -0.5 * prop**2
            if live[j]:
                eta_prop = eta + block.U[:, j] * (prop - cur)[block.codes]
                ll_prop = _group_loglik(family, block, eta_prop, tau)
            else:
                ll_prop = ll
            acc = mh_accept(ll_prop + prior_prop, ll + prior_cur, log_q, uniforms[:, offset, j])
            alpha[:, j] = np.where(acc, prop, cur)
            if live[j]:
                eta = np.where(acc[block.codes], eta_prop, eta)
                ll = np.where(acc, ll_prop, ll)
            accepted[:, j] += acc
            batch[:, j] += acc
        if adapt and sweep < burnin and (sweep + 1) % config.ADAPT_BATCH == 0:
            n_batches += 1
            log_scales = _adapted(log_scales, batch / config.ADAPT_BATCH, n_batches)
            batch[:] = 0.0
        if sweep >= burnin:
            out[sweep - burnin] = alpha
    return alpha, log_scales, accepted, out, n_batches - n_batches0


def estep_sample(
    dataset: Dataset,
    theta: Theta,
    family: FamilySpec,
    chain: ChainState,
    M: int,
    burnin: int,
    kind: str,
    struct: CovStructure,
    seed: int = config.DEFAULT_SEED,
    threads: int = 1,
) -> PosteriorDraws:
    """
    Metropolis-within-Gibbs draws from each group's random-effect posterior.

    Runs burnin + M sweeps per group starting from chain.current, keeps the
    last M, and leaves the final state in chain. Proposal scales adapt only
    during burn-in.
    """
    if chain.current.shape != (dataset.K, dataset.q):
        raise DimensionMismatch(
            f"chain state has shape {chain.current.shape}, expected {(dataset.K, dataset.q)}"
        )
    if M < 0 or burnin < 0:
        raise ConfigError("draw counts must be nonnegative")
    if kind not in (ADAPTIVE_RW, INDEPENDENCE):
        raise ConfigError(f"Unknown sampler '{kind}'")
    if not (np.all(np.isfinite(theta.beta)) and np.all(np.isfinite(theta.gamma))):
        raise SamplerError("model parameters are not finite")

    chain.n_estep += 1
    n_sweeps = burnin + M
    Gamma = gamma_to_matrix(theta.gamma, struct)
    U = dataset.Z @ Gamma
    eta_fixed = dataset.design @ theta.beta
    q = dataset.q

    streams = [_group_streams(seed, chain.n_estep, label) for label in dataset.levels]

    blocks = _make_blocks(dataset, eta_fixed, U, threads)

    def run(block):
        g = block.groups
        return _run_block(
            block,
            family,
            theta.tau,
            chain.current[g],
            chain.rw_log_scales[g],
            [streams[k] for k in g],
            burnin,
            M,
            kind,
            chain.n_batches,
        )

    if len(blocks) > 1:
        with ThreadPoolExecutor(max_workers=len(blocks)) as pool:
            results = list(pool.map(run, blocks))
    else:
        results = [run(block) for block in blocks]

    draws = np.empty((M, dataset.K, q))
    batches_run = 0
    for block, (alpha, log_scales, accepted, out, n_new) in zip(blocks, results):
        g = block.groups
        chain.current[g] = alpha
        chain.rw_log_scales[g] = log_scales
        chain.accept_counts[g] += accepted
        draws[:, g, :] = out
        batches_run = n_new
    chain.n_batches += batches_run
    chain.n_sweeps += n_sweeps

    return PosteriorDraws.from_array(draws, dataset.levels, dataset.random_names)


def _sidecar(path: str) -> str:
    return f"{path}.meta.json"


def write_posterior(draws: PosteriorDraws, path: str, seed: int | None = None) -> str:
    """Persists draws as a PGLMPOST1 binary file plus a JSON sidecar."""
    header = np.array([draws.M, draws.K * draws.q], dtype=_HEADER)
    meta = {
        "labels": [list(label) for label in draws.labels],
        "M": draws.M,
        "K": draws.K,
        "q": draws.q,
        "seed": seed,
    }
    try:
        directory = os.path.dirname(path)
        if directory:
            os.makedirs(directory, exist_ok=True)
        with open(path, "wb") as handle:
            handle.write(POSTERIOR_MAGIC)
            handle.write(header.tobytes())
            handle.write(draws.data.astype(_PAYLOAD).tobytes(order="C"))
        with open(_sidecar(path), "w", encoding="utf-8") as handle:
            json.dump(meta, handle, sort_keys=True, indent=2)
    except OSError as e:
        raise PosteriorFileError(f"cannot write posterior file {path}: {e}") from e
    logger.info(f"Wrote {draws.M} posterior draws to {path}")
    return path


def read_posterior(path: str) -> PosteriorDraws:
    if not os.path.exists(path):
        raise PosteriorFileError(f"posterior file not found: {path}")
    if not os.path.exists(_sidecar(path)):
        raise PosteriorFileError(f"posterior metadata not found: {_sidecar(path)}")
    try:
        with open(path, "rb") as handle:
            raw = handle.read()
        with open(_sidecar(path), encoding="utf-8") as handle:
            meta = json.load(handle)
    except (OSError, ValueError) as e:
        raise PosteriorFileError(f"cannot read posterior file {path}: {e}") from e

    offset = len(POSTERIOR_MAGIC)
    if raw[:offset] != POSTERIOR_MAGIC:
        raise PosteriorFileError(f"{path} is not a PGLMPOST1 file")
    M, n_cols = np.frombuffer(raw, dtype=_HEADER, count=2, offset=offset).tolist()
    payload = offset + 2 * _HEADER.itemsize
    if len(raw) - payload != M * n_cols * _PAYLOAD.itemsize:
        raise PosteriorFileError(f"{path} is truncated or has trailing bytes")
    if meta.get("K", 0) * meta.get("q", 0) != n_cols:
        raise PosteriorFileError(f"{path} disagrees with its metadata")
    data = np.frombuffer(raw, dtype=_PAYLOAD, offset=payload).reshape(M, n_cols)
    labels = [tuple(label) for label in meta["labels"]]
    return PosteriorDraws(data=data.astype(float), labels=labels, K=meta["K"], q=meta["q"])
