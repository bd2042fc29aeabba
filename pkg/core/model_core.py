import logging
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy import sparse
from scipy.special import expit, gammaln

from utils.exceptions import (
    ConfigError,
    ConstantColumn,
    DimensionMismatch,
    InvalidResponse,
)

logger = logging.getLogger(__name__)

BINOMIAL = "binomial"
GAUSSIAN = "gaussian"
POISSON = "poisson"

UNSTRUCTURED = "unstructured"
DIAGONAL = "diagonal"

INTERCEPT_NAME = "(Intercept)"

_LOG_2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True)
class FamilySpec:
    """Exponential family with its canonical link."""

    kind: str

    def __post_init__(self):
        if self.kind not in (BINOMIAL, GAUSSIAN, POISSON):
            raise ConfigError(f"Unknown family '{self.kind}'")

    @property
    def link(self) -> str:
        return {BINOMIAL: "logit", GAUSSIAN: "identity", POISSON: "log"}[self.kind]

    @property
    def has_dispersion(self) -> bool:
        return self.kind == GAUSSIAN

    def linkinv(self, eta):
        if self.kind == BINOMIAL:
            return expit(eta)
        if self.kind == POISSON:
            return np.exp(eta)
        return np.asarray(eta, dtype=float)

    def cumulant(self, eta):
        """b(eta) of the canonical form."""
        if self.kind == BINOMIAL:
            return np.logaddexp(0.0, eta)
        if self.kind == POISSON:
            return np.exp(eta)
        return 0.5 * np.asarray(eta, dtype=float) ** 2

    def variance(self, mu):
        if self.kind == BINOMIAL:
            return mu * (1.0 - mu)
        if self.kind == POISSON:
            return mu
        return np.ones_like(mu)

    def validate_response(self, y: np.ndarray):
        y = np.asarray(y, dtype=float)
        if not np.all(np.isfinite(y)):
            raise InvalidResponse("Response contains non-finite values")
        if self.kind == BINOMIAL and not np.all((y == 0) | (y == 1)):
            raise InvalidResponse("Binomial response must be coded 0/1")
        if self.kind == POISSON and (np.any(y < 0) or np.any(y != np.round(y))):
            raise InvalidResponse("Poisson response must be a nonnegative integer")

    def log_density(self, y, eta, tau: float = 1.0):
        """Elementwise log f(y | eta) including normalizing constants."""
        y = np.asarray(y, dtype=float)
        eta = np.asarray(eta, dtype=float)
        if self.kind == BINOMIAL:
            return y * eta - np.logaddexp(0.0, eta)
        if self.kind == POISSON:
            return y * eta - np.exp(eta) - gammaln(y + 1.0)
        return -0.5 * (_LOG_2PI + np.log(tau)) - 0.5 * (y - eta) ** 2 / tau


def family_from_name(name: str) -> FamilySpec:
    return FamilySpec(name.strip().lower())


def log_density(family: FamilySpec, y_i: float, eta_i: float, tau: float = 1.0) -> float:
    """
    Scalar log-density with validation of the response value.
    """
    family.validate_response(np.atleast_1d(y_i))
    return float(family.log_density(y_i, eta_i, tau))


@dataclass(frozen=True)
class CovStructure:
    kind: str
    q: int

    def __post_init__(self):
        if self.kind not in (UNSTRUCTURED, DIAGONAL):
            raise ConfigError(f"Unknown covariance structure '{self.kind}'")
        if self.q < 1:
            raise ConfigError("q must be at least 1")

    @property
    def n_gamma(self) -> int:
        if self.kind == UNSTRUCTURED:
            return self.q * (self.q + 1) // 2
        return self.q

    def row_columns(self, t: int) -> list[int]:
        """Columns of Gamma that may be nonzero in row t."""
        return list(range(t + 1)) if self.kind == UNSTRUCTURED else [t]

    def row_indices(self, t: int) -> np.ndarray:
        """Positions of gamma_t inside the gamma vector."""
        if self.kind == UNSTRUCTURED:
            start = t * (t + 1) // 2
            return np.arange(start, start + t + 1)
        return np.array([t])

    def row_of(self) -> np.ndarray:
        """Row of Gamma for every gamma position."""
        return np.concatenate(
            [np.full(len(self.row_indices(t)), t) for t in range(self.q)]
        )


def build_Jq(struct: CovStructure) -> sparse.csr_matrix:
    """
    0/1 matrix with vec(Gamma) = J_q gamma, vec taken column-major.

    gamma lists the nonzero entries of Gamma row by row.
    """
    q = struct.q
    rows, cols = [], []
    for t in range(q):
        for s, idx in zip(struct.row_columns(t), struct.row_indices(t)):
            rows.append(t + s * q)
            cols.append(idx)
    data = np.ones(len(rows))
    return sparse.csr_matrix((data, (rows, cols)), shape=(q * q, struct.n_gamma))


def gamma_to_matrix(gamma: np.ndarray, struct: CovStructure, Jq=None) -> np.ndarray:
    gamma = np.asarray(gamma, dtype=float)
    if gamma.shape != (struct.n_gamma,):
        raise DimensionMismatch(
            f"gamma has length {gamma.size}, expected {struct.n_gamma} for {struct.kind} q={struct.q}"
        )
    Jq = build_Jq(struct) if Jq is None else Jq
    return np.asarray(Jq @ gamma).reshape(struct.q, struct.q, order="F")


def initial_gamma(struct: CovStructure, variance: float, active=None) -> np.ndarray:
    """Diagonal Gamma with sqrt(variance) on the active rows."""
    gamma = np.zeros(struct.n_gamma)
    rows = range(struct.q) if active is None else active
    for t in rows:
        gamma[struct.row_indices(t)[-1]] = np.sqrt(variance)
    return gamma


@dataclass(frozen=True, eq=False)
class Theta:
    beta: np.ndarray
    gamma: np.ndarray
    tau: float = 1.0

    def coefficients(self) -> np.ndarray:
        return np.concatenate([self.beta, self.gamma])


def random_effect_cov(theta: Theta, struct: CovStructure) -> np.ndarray:
    G = gamma_to_matrix(theta.gamma, struct)
    return G @ G.T


def normalize_gamma_signs(gamma: np.ndarray, struct: CovStructure):
    """
    Make every diagonal entry of Gamma nonnegative.

    Column s of Gamma is negated when Gamma[s, s] < 0, which leaves Gamma Gamma^T
    unchanged. Returns the new gamma and the sign vector applied to the columns,
    to be applied to the matching random-effect draws.
    """
    G = gamma_to_matrix(gamma, struct)
    signs = np.where(np.diag(G) < 0, -1.0, 1.0)
    G = G * signs[None, :]
    out = np.empty_like(gamma, dtype=float)
    for t in range(struct.q):
        out[struct.row_indices(t)] = G[t, struct.row_columns(t)]
    return out, signs


@dataclass(frozen=True, eq=False)
class Dataset:
    """
    Response, standardized covariates and grouping for one analysis.
    """

    y: np.ndarray
    X: np.ndarray
    z_cols: tuple[int, ...]
    group: np.ndarray
    covariate_names: tuple[str, ...] = ()
    centers: np.ndarray | None = None
    scales: np.ndarray | None = None
    levels: tuple = field(init=False)
    codes: np.ndarray = field(init=False)
    group_index: tuple[np.ndarray, ...] = field(init=False)

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float)
        X = np.asarray(self.X, dtype=float)
        if X.ndim != 2 or X.shape[0] != y.shape[0]:
            raise DimensionMismatch(
                f"X has shape {X.shape} but y has length {y.shape[0]}"
            )
        group = np.asarray(self.group)
        if group.shape[0] != y.shape[0]:
            raise DimensionMismatch("group labels and response differ in length")
        for c in self.z_cols:
            if not 0 <= c < X.shape[1]:
                raise DimensionMismatch(f"random-effect column {c} is not a column of X")
        if len(set(self.z_cols)) != len(self.z_cols):
            raise DimensionMismatch("random-effect columns must be distinct")

        levels, codes = np.unique(group, return_inverse=True)
        names = self.covariate_names or tuple(f"X{j + 1}" for j in range(X.shape[1]))
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "group", group)
        object.__setattr__(self, "z_cols", tuple(int(c) for c in self.z_cols))
        object.__setattr__(self, "covariate_names", tuple(names))
        object.__setattr__(self, "levels", tuple(levels.tolist()))
        object.__setattr__(self, "codes", codes.astype(np.int64))
        object.__setattr__(
            self,
            "group_index",
            tuple(np.flatnonzero(codes == k) for k in range(len(levels))),
        )
        if self.centers is None:
            object.__setattr__(self, "centers", np.zeros(X.shape[1]))
        if self.scales is None:
            object.__setattr__(self, "scales", np.ones(X.shape[1]))

    @property
    def N(self) -> int:
        return self.y.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def K(self) -> int:
        return len(self.levels)

    @property
    def q(self) -> int:
        return len(self.z_cols) + 1

    @property
    def sizes(self) -> np.ndarray:
        return np.array([idx.size for idx in self.group_index])

    @cached_property
    def design(self) -> np.ndarray:
        """[1 X], the fixed-effects design with the implicit intercept."""
        return np.column_stack([np.ones(self.N), self.X])

    @cached_property
    def Z(self) -> np.ndarray:
        return np.column_stack([np.ones(self.N), self.X[:, list(self.z_cols)]])

    @cached_property
    def group_ZtZ(self) -> np.ndarray:
        """Per-group Z_k^T Z_k, shape K x q x q."""
        return np.stack([self.Z[idx].T @ self.Z[idx] for idx in self.group_index])

    @property
    def random_names(self) -> tuple[str, ...]:
        return (INTERCEPT_NAME,) + tuple(self.covariate_names[c] for c in self.z_cols)

    @property
    def fixed_names(self) -> tuple[str, ...]:
        return (INTERCEPT_NAME,) + tuple(self.covariate_names)

    def with_random_columns(self, z_cols) -> "Dataset":
        """Same data with a different random-effect column subset."""
        return Dataset(
            y=self.y,
            X=self.X,
            z_cols=tuple(z_cols),
            group=self.group,
            covariate_names=self.covariate_names,
            centers=self.centers,
            scales=self.scales,
        )


def standardize(X_raw: np.ndarray, names=None):
    """
    Center each column to mean 0 and scale it to mean square 1.

    Returns the standardized matrix with the centers and scales needed to
    map coefficients back to the raw scale.
    """
    X_raw = np.asarray(X_raw, dtype=float)
    if X_raw.ndim != 2:
        raise DimensionMismatch("covariate matrix must be two dimensional")
    centers = X_raw.mean(axis=0)
    scales = np.sqrt(((X_raw - centers) ** 2).mean(axis=0))
    for j, s in enumerate(scales):
        if not s > 1e-12 * max(1.0, abs(centers[j])):
            label = names[j] if names is not None else f"column {j}"
            raise ConstantColumn(f"constant column: {label}")
    return (X_raw - centers) / scales, centers, scales


def destandardize(beta: np.ndarray, centers: np.ndarray, scales: np.ndarray) -> np.ndarray:
    """Fixed effects on the raw covariate scale (intercept first)."""
    beta = np.asarray(beta, dtype=float)
    slopes = beta[1:] / scales
    intercept = beta[0] - np.sum(slopes * centers)
    return np.concatenate([[intercept], slopes])


def make_dataset(y, X_raw, group, z_cols, names=None) -> Dataset:
    X, centers, scales = standardize(X_raw, names)
    return Dataset(
        y=np.asarray(y, dtype=float),
        X=X,
        z_cols=tuple(z_cols),
        group=np.asarray(group),
        covariate_names=tuple(names) if names is not None else (),
        centers=centers,
        scales=scales,
    )


def fixed_predictor(dataset: Dataset, beta: np.ndarray) -> np.ndarray:
    beta = np.asarray(beta, dtype=float)
    if beta.shape != (dataset.p + 1,):
        raise DimensionMismatch(f"beta has length {beta.size}, expected {dataset.p + 1}")
    return dataset.design @ beta


def random_predictor(dataset: Dataset, Gamma: np.ndarray, alpha: np.ndarray) -> np.ndarray:
    """z_ki^T Gamma alpha_k for every row, alpha is K x q."""
    U = dataset.Z @ Gamma
    return np.einsum("nq,nq->n", U, alpha[dataset.codes])


def _check_row(dataset: Dataset, k: int, i: int):
    if not 0 <= k < dataset.K:
        raise DimensionMismatch(f"group {k} out of range")
    if dataset.codes[i] != k:
        raise DimensionMismatch(f"row {i} does not belong to group {k}")


def linear_predictor(
    dataset: Dataset,
    theta: Theta,
    alpha_k: np.ndarray,
    k: int,
    i: int,
    struct: CovStructure,
) -> float:
    """eta_ki = x_ki^T beta + z_ki^T Gamma alpha_k."""
    _check_row(dataset, k, i)
    alpha_k = np.asarray(alpha_k, dtype=float)
    if alpha_k.shape != (dataset.q,) or struct.q != dataset.q:
        raise DimensionMismatch(f"alpha_k must have length {dataset.q}")
    Gamma = gamma_to_matrix(theta.gamma, struct)
    return float(dataset.design[i] @ theta.beta + dataset.Z[i] @ Gamma @ alpha_k)


def linear_predictor_augmented(
    dataset: Dataset,
    theta: Theta,
    alpha_k: np.ndarray,
    k: int,
    i: int,
    struct: CovStructure,
) -> float:
    """Same predictor written as (x_ki^T, (alpha_k kron z_ki)^T J_q) . (beta, gamma)."""
    from core.mstep import build_augmented_row

    _check_row(dataset, k, i)
    alpha_k = np.asarray(alpha_k, dtype=float)
    if alpha_k.shape != (dataset.q,) or struct.q != dataset.q:
        raise DimensionMismatch(f"alpha_k must have length {dataset.q}")
    z_tilde = build_augmented_row(dataset.Z[i], alpha_k[None, :], build_Jq(struct))
    return float(dataset.design[i] @ theta.beta + z_tilde[0] @ theta.gamma)
