import logging
from dataclasses import dataclass, replace

import numpy as np
from scipy import sparse

import config
from core.model_core import (
    BINOMIAL,
    GAUSSIAN,
    CovStructure,
    Dataset,
    FamilySpec,
    Theta,
    build_Jq,
    gamma_to_matrix,
)
from core.sampler import PosteriorDraws
from utils.exceptions import (
    ConfigError,
    MStepDivergence,
    NonConvexThreshold,
    WorkingResidualError,
)

logger = logging.getLogger(__name__)

MCP = "MCP"
SCAD = "SCAD"
LASSO = "lasso"

PENALTIES = (MCP, SCAD, LASSO)


def _default_scale(penalty: str) -> float:
    return config.GAMMA_SCAD if penalty == SCAD else config.GAMMA_MCP


@dataclass(frozen=True)
class PenaltyConfig:
    """
    Penalty kind and tuning values for one fit.

    no_pen lists X columns (0-based, intercept excluded) whose fixed effects
    are never penalized.
    """

    penalty: str = MCP
    lambda0: float = 0.0
    lambda1: float = 0.0
    gamma_scale: float | None = None
    alpha_mix: float = 1.0
    no_pen: tuple[int, ...] = ()

    def __post_init__(self):
        if self.penalty not in PENALTIES:
            raise ConfigError(f"Unknown penalty '{self.penalty}'")
        if self.gamma_scale is None:
            object.__setattr__(self, "gamma_scale", _default_scale(self.penalty))
        if self.lambda0 < 0 or self.lambda1 < 0:
            raise ConfigError("penalty parameters must be nonnegative")
        if not 0 < self.alpha_mix <= 1:
            raise ConfigError(f"alpha_mix must lie in (0, 1], got {self.alpha_mix}")
        if self.penalty == MCP and self.gamma_scale <= 1:
            raise ConfigError("MCP scale must exceed 1")
        if self.penalty == SCAD and self.gamma_scale <= 2:
            raise ConfigError("SCAD scale must exceed 2")

    def with_lambdas(self, lambda0: float, lambda1: float) -> "PenaltyConfig":
        return replace(self, lambda0=float(lambda0), lambda1=float(lambda1))

    def beta_penalized(self, p: int) -> np.ndarray:
        mask = np.ones(p + 1, dtype=bool)
        mask[0] = False
        for j in self.no_pen:
            mask[j + 1] = False
        return mask


@dataclass(frozen=True)
class MStepConfig:
    delta: float = config.CONV_CD
    maxit_cd: int = config.MAXIT_CD

    def __post_init__(self):
        if self.delta <= 0:
            raise ConfigError("M-step tolerance must be positive")
        if self.maxit_cd < 1:
            raise ConfigError("maxit_cd must be at least 1")


@dataclass
class MStepState:
    beta: np.ndarray
    gamma: np.ndarray
    eta: np.ndarray
    f: int = 0
    delta: float = config.CONV_CD
    maxit_cd: int = config.MAXIT_CD


@dataclass
class MStepResult:
    theta: Theta
    iterations: int
    cap_hit: bool


def soft_threshold(z: float, lam: float) -> float:
    return float(np.sign(z) * max(abs(z) - lam, 0.0))


def scalar_threshold(
    penalty: str,
    z: float,
    lam: float,
    gamma_scale: float,
    v: float = 1.0,
    alpha: float = 1.0,
) -> float:
    """Minimizer of v/2 b^2 - z b + penalty(|b|) in one coordinate."""
    if v <= 0:
        raise NonConvexThreshold(f"curvature must be positive, got {v}")
    l1 = alpha * lam
    w = v + (1.0 - alpha) * lam
    az = abs(z)
    if penalty == LASSO:
        return soft_threshold(z, l1) / w
    if penalty == MCP:
        if w * gamma_scale <= 1:
            raise NonConvexThreshold(
                f"MCP majorizer is not convex (v*gamma = {w * gamma_scale:.4g} <= 1)"
            )
        if az <= w * gamma_scale * l1:
            return soft_threshold(z, l1) / (w - 1.0 / gamma_scale)
        return z / w
    if penalty == SCAD:
        a = gamma_scale
        if w - 1.0 / (a - 1.0) <= 0:
            raise NonConvexThreshold(f"SCAD majorizer is not convex (v = {w:.4g})")
        if az <= l1:
            return 0.0
        if az <= l1 * (1.0 + w):
            return soft_threshold(z, l1) / w
        if az <= w * a * l1:
            return soft_threshold(z, a * l1 / (a - 1.0)) / (w - 1.0 / (a - 1.0))
        return z / w
    raise ConfigError(f"Unknown penalty '{penalty}'")


def group_threshold(
    penalty: str,
    z_t: np.ndarray,
    lam: float,
    gamma_scale: float,
    v: float = 1.0,
    alpha: float = 1.0,
) -> np.ndarray:
    z_t = np.asarray(z_t, dtype=float)
    norm = np.linalg.norm(z_t)
    if norm == 0.0:
        return np.zeros_like(z_t)
    return z_t * (scalar_threshold(penalty, norm, lam, gamma_scale, v, alpha) / norm)


def penalty_value(penalty: str, x: float, lam: float, gamma_scale: float, alpha: float = 1.0) -> float:
    """rho(|x|) with the elastic-net ridge term folded in."""
    x = abs(x)
    l1 = alpha * lam
    if penalty == LASSO:
        value = l1 * x
    elif penalty == MCP:
        if x <= gamma_scale * l1:
            value = l1 * x - x**2 / (2.0 * gamma_scale)
        else:
            value = 0.5 * gamma_scale * l1**2
    else:
        a = gamma_scale
        if x <= l1:
            value = l1 * x
        elif x <= a * l1:
            value = (2.0 * a * l1 * x - x**2 - l1**2) / (2.0 * (a - 1.0))
        else:
            value = 0.5 * l1**2 * (a + 1.0)
    return value + 0.5 * (1.0 - alpha) * lam * x**2


def _penalty_knots(penalty: str, lam: float, gamma_scale: float, alpha: float) -> list[float]:
    l1 = alpha * lam
    if penalty == MCP:
        return [gamma_scale * l1]
    if penalty == SCAD:
        return [l1, gamma_scale * l1]
    return []


def group_prox(
    penalty: str,
    u: np.ndarray,
    lam: float,
    gamma_scale: float,
    L: float,
    alpha: float = 1.0,
) -> np.ndarray:
    """
    Minimizer of L/2 ||b - u||^2 + penalty(||b||) at the true curvature L.

    Convex cases go through group_threshold. Otherwise the radial objective
    is piecewise quadratic between the penalty knots and the minimum is taken
    over the knots and the clipped vertex of every piece.
    """
    u = np.asarray(u, dtype=float)
    r = float(np.linalg.norm(u))
    if r == 0.0 or lam == 0.0:
        return u.copy()
    try:
        return group_threshold(penalty, L * u, lam, gamma_scale, L, alpha)
    except NonConvexThreshold:
        pass

    def radial(x):
        return 0.5 * L * (x - r) ** 2 + penalty_value(penalty, x, lam, gamma_scale, alpha)

    knots = [0.0] + _penalty_knots(penalty, lam, gamma_scale, alpha)
    ends = knots[1:] + [max(knots[-1], r) + 1.0]
    candidates = list(knots)
    for lo, hi in zip(knots, ends):
        h = 0.5 * (hi - lo)
        f0, f1, f2 = radial(lo), radial(lo + h), radial(hi)
        curvature = (f0 - 2.0 * f1 + f2) / h**2
        if curvature > 0:
            vertex = lo + h - (f2 - f0) / (2.0 * h * curvature)
            candidates.append(min(max(vertex, lo), hi))
    s = min(candidates, key=radial)
    return u * (s / r)


def build_augmented_row(z_ki: np.ndarray, draws_k: np.ndarray, Jq) -> np.ndarray:
    """
    Rows (alpha_k^(m) kron z_ki)^T J_q for every draw m.

    Built for one observation at a time; the full augmented design is never
    formed.
    """
    z_ki = np.asarray(z_ki, dtype=float)
    draws_k = np.atleast_2d(np.asarray(draws_k, dtype=float))
    kron = np.einsum("ms,t->mst", draws_k, z_ki).reshape(draws_k.shape[0], -1)
    return np.asarray(sparse.csr_matrix(Jq).T.dot(kron.T).T)


def random_offsets(dataset: Dataset, Gamma: np.ndarray, draws: PosteriorDraws) -> np.ndarray:
    """M x N matrix of z_ki^T Gamma alpha_k^(m)."""
    A = draws.by_group()
    U = dataset.Z @ Gamma
    offsets = np.empty((draws.M, dataset.N))
    for k, idx in enumerate(dataset.group_index):
        offsets[:, idx] = A[:, k, :] @ U[idx].T
    return offsets


def linear_predictor_draws(
    dataset: Dataset, beta: np.ndarray, gamma: np.ndarray, draws: PosteriorDraws, struct: CovStructure
) -> np.ndarray:
    Gamma = gamma_to_matrix(gamma, struct)
    return (dataset.design @ beta)[None, :] + random_offsets(dataset, Gamma, draws)


def weight_bound(family: FamilySpec, mu: np.ndarray) -> float:
    if family.kind == GAUSSIAN:
        return 1.0
    if family.kind == BINOMIAL:
        return config.BINOMIAL_WEIGHT_BOUND
    return float(np.max(mu))


def beta_update_pass(
    state: MStepState,
    dataset: Dataset,
    draws: PosteriorDraws,
    family: FamilySpec,
    penalty: PenaltyConfig,
) -> np.ndarray:
    """
    One majorize-minimize coordinate sweep over the fixed effects.

    Works on the draw-averaged residual y - mean_m mu, updated after every
    coordinate with the curvature bound v.
    """
    mu = family.linkinv(state.eta)
    v = weight_bound(family, mu)
    if not v > 0:
        raise WorkingResidualError("family weight bound is not positive")
    resid = dataset.y - mu.mean(axis=0)
    if not np.all(np.isfinite(resid)):
        raise WorkingResidualError("working residuals are not finite")

    N = dataset.N
    design = dataset.design
    penalized = penalty.beta_penalized(dataset.p)
    beta = state.beta.copy()
    for j in range(dataset.p + 1):
        x_j = design[:, j]
        z = v * beta[j] + x_j @ resid / N
        lam = penalty.lambda0 if penalized[j] else 0.0
        new = scalar_threshold(penalty.penalty, z, lam, penalty.gamma_scale, 1.0, penalty.alpha_mix) / v
        shift = new - beta[j]
        if shift != 0.0:
            resid -= v * shift * x_j
            beta[j] = new

    state.eta = state.eta + (design @ (beta - state.beta))[None, :]
    state.beta = beta
    return beta


def free_columns(struct: CovStructure, t: int, active) -> list[int]:
    return [s for s in struct.row_columns(t) if active[s]]


def gamma_curvature(
    dataset: Dataset, draws: PosteriorDraws, struct: CovStructure, v_bound: float
) -> np.ndarray:
    """
    Quadratic bound on the curvature of the draw-averaged loss in gamma.

    Entry (j, l) is v_bound * sum_k ZtZ_k[r_j, r_l] * AtA_k[c_j, c_l] / (N M),
    where gamma_j sits at Gamma[r_j, c_j]. Exact for the Gaussian family.
    """
    A = draws.by_group()
    AtA = np.einsum("mka,mkb->kab", A, A)
    rows = struct.row_of()
    cols = np.concatenate([struct.row_columns(t) for t in range(struct.q)])
    ZtZ = dataset.group_ZtZ[:, rows][:, :, rows]
    return v_bound * np.einsum("kjl,kjl->jl", ZtZ, AtA[:, cols][:, :, cols]) / (dataset.N * draws.M)


def _row_solve(
    H_tt: np.ndarray,
    h: np.ndarray,
    start: np.ndarray,
    penalty: PenaltyConfig,
    lam: float,
    tol: float,
) -> np.ndarray:
    """Proximal gradient on 1/2 b^T H_tt b - h^T b + penalty(||b||)."""
    L = float(np.linalg.eigvalsh(H_tt).max())
    if not L > 0:
        return np.zeros_like(start)
    b = start.copy()
    for _ in range(config.GAMMA_PROX_MAXIT):
        new = group_prox(penalty.penalty, b + (h - H_tt @ b) / L, lam, penalty.gamma_scale, L, penalty.alpha_mix)
        moved = np.max(np.abs(new - b))
        b = new
        if moved < tol:
            break
    return b


def gamma_update_pass(
    state: MStepState,
    dataset: Dataset,
    draws: PosteriorDraws,
    family: FamilySpec,
    penalty: PenaltyConfig,
    Jq,
    struct: CovStructure,
    active=None,
) -> np.ndarray:
    """
    One grouped sweep over the rows of Gamma.

    Block coordinate descent over rows on one quadratic majorizer of the
    loss, built from the residuals at the start of the sweep. Inactive
    random effects keep their row and column at zero.
    """
    active = np.ones(struct.q, dtype=bool) if active is None else np.asarray(active, dtype=bool)
    mu = family.linkinv(state.eta)
    resid = dataset.y[None, :] - mu
    if not np.all(np.isfinite(resid)):
        raise WorkingResidualError("working residuals are not finite")
    v_bound = weight_bound(family, mu)

    A = draws.by_group()
    q = struct.q
    G = np.zeros((q, q))
    for k, idx in enumerate(dataset.group_index):
        G += dataset.Z[idx].T @ (resid[:, idx].T @ A[:, k, :])
    # negative gradient of the majorizer at the current gamma
    slope = np.asarray(Jq.T @ G.reshape(-1, order="F")).ravel() / (dataset.N * draws.M)
    H = gamma_curvature(dataset, draws, struct, v_bound)

    gamma = state.gamma.copy()
    for t in range(q):
        idx_t = struct.row_indices(t)
        cols = free_columns(struct, t, active)
        row = np.zeros(idx_t.size)
        if active[t] and cols:
            keep = np.isin(struct.row_columns(t), cols)
            idx = idx_t[keep]
            H_tt = H[np.ix_(idx, idx)]
            lam = 0.0 if t == 0 else penalty.lambda1
            row[keep] = _row_solve(H_tt, slope[idx] + H_tt @ gamma[idx], gamma[idx], penalty, lam, state.delta)
        shift = row - gamma[idx_t]
        if np.any(shift != 0.0):
            slope -= H[:, idx_t] @ shift
            gamma[idx_t] = row

    state.gamma = gamma
    state.eta = linear_predictor_draws(dataset, state.beta, gamma, draws, struct)
    return gamma


def dispersion_update(
    dataset: Dataset,
    theta: Theta,
    draws: PosteriorDraws,
    family: FamilySpec,
    struct: CovStructure,
    eta: np.ndarray | None = None,
) -> float:
    """Mean squared residual over draws and observations; 1 without dispersion."""
    if not family.has_dispersion:
        return 1.0
    if eta is None:
        eta = linear_predictor_draws(dataset, theta.beta, theta.gamma, draws, struct)
    return float(np.mean((dataset.y[None, :] - eta) ** 2))


def penalized_objective(
    theta: Theta,
    dataset: Dataset,
    draws: PosteriorDraws,
    family: FamilySpec,
    penalty: PenaltyConfig,
    struct: CovStructure,
) -> float:
    """Draw-averaged negative log-likelihood per observation plus penalties, at unit dispersion."""
    eta = linear_predictor_draws(dataset, theta.beta, theta.gamma, draws, struct)
    loss = -float(np.mean(family.log_density(dataset.y[None, :], eta, 1.0)))
    penalized = penalty.beta_penalized(dataset.p)
    total = loss + sum(
        penalty_value(penalty.penalty, b, penalty.lambda0, penalty.gamma_scale, penalty.alpha_mix)
        for b in theta.beta[penalized]
    )
    for t in range(1, struct.q):
        norm = np.linalg.norm(theta.gamma[struct.row_indices(t)])
        total += penalty_value(penalty.penalty, norm, penalty.lambda1, penalty.gamma_scale, penalty.alpha_mix)
    return total


def _check_divergence(beta: np.ndarray, gamma: np.ndarray):
    coefs = np.concatenate([beta, gamma])
    if not np.all(np.isfinite(coefs)) or np.max(np.abs(coefs)) > config.DIVERGENCE_LIMIT:
        raise MStepDivergence(
            "coefficients diverged during the M-step; the data may be separable"
        )


def m_step(
    theta_in: Theta,
    dataset: Dataset,
    draws: PosteriorDraws,
    family: FamilySpec,
    penalty: PenaltyConfig,
    struct: CovStructure,
    cfg: MStepConfig | None = None,
    active=None,
    Jq=None,
) -> MStepResult:
    """Alternates beta and gamma sweeps until both move less than delta."""
    cfg = cfg or MStepConfig()
    Jq = build_Jq(struct) if Jq is None else Jq
    if draws.M == 0:
        raise ConfigError("the M-step needs at least one posterior draw")
    state = MStepState(
        beta=np.asarray(theta_in.beta, dtype=float).copy(),
        gamma=np.asarray(theta_in.gamma, dtype=float).copy(),
        eta=linear_predictor_draws(dataset, theta_in.beta, theta_in.gamma, draws, struct),
        delta=cfg.delta,
        maxit_cd=cfg.maxit_cd,
    )
    cap_hit = True
    while state.f < state.maxit_cd:
        state.f += 1
        beta_old, gamma_old = state.beta.copy(), state.gamma.copy()
        beta_update_pass(state, dataset, draws, family, penalty)
        gamma_update_pass(state, dataset, draws, family, penalty, Jq, struct, active)
        _check_divergence(state.beta, state.gamma)
        moved_beta = np.max(np.abs(state.beta - beta_old))
        moved_gamma = np.max(np.abs(state.gamma - gamma_old)) if state.gamma.size else 0.0
        if moved_beta < state.delta and moved_gamma < state.delta:
            cap_hit = False
            break
    if cap_hit:
        logger.warning(f"M-step stopped at the iteration cap ({state.maxit_cd})")

    tau = theta_in.tau
    if family.has_dispersion:
        theta_mid = Theta(beta=state.beta, gamma=state.gamma, tau=tau)
        tau = max(dispersion_update(dataset, theta_mid, draws, family, struct, state.eta), 1e-10)
    return MStepResult(
        theta=Theta(beta=state.beta, gamma=state.gamma, tau=tau),
        iterations=state.f,
        cap_hit=cap_hit,
    )


@dataclass
class NaiveFit:
    beta: np.ndarray
    iterations: int
    converged: bool
    residual_variance: float = 1.0


def naive_fit(
    dataset: Dataset,
    family: FamilySpec,
    penalty: PenaltyConfig,
    delta: float = config.CONV_CD,
    maxit: int = config.NAIVE_MAXIT,
    beta_init: np.ndarray | None = None,
) -> NaiveFit:
    """Penalized GLM without random effects, by repeated beta sweeps."""
    beta = np.zeros(dataset.p + 1) if beta_init is None else np.asarray(beta_init, dtype=float).copy()
    if beta_init is None and family.kind != GAUSSIAN:
        ybar = float(np.clip(dataset.y.mean(), 1e-6, None))
        if family.kind == BINOMIAL:
            ybar = min(ybar, 1 - 1e-6)
            beta[0] = np.log(ybar / (1 - ybar))
        else:
            beta[0] = np.log(ybar)
    no_draws = PosteriorDraws.from_array(
        np.zeros((1, dataset.K, dataset.q)), dataset.levels, dataset.random_names
    )
    state = MStepState(
        beta=beta,
        gamma=np.zeros(0),
        eta=(dataset.design @ beta)[None, :],
    )
    converged = False
    for it in range(1, maxit + 1):
        old = state.beta.copy()
        beta_update_pass(state, dataset, no_draws, family, penalty)
        _check_divergence(state.beta, state.gamma)
        if np.max(np.abs(state.beta - old)) < delta:
            converged = True
            break
    else:
        it = maxit
    resid_var = float(np.mean((dataset.y - dataset.design @ state.beta) ** 2))
    return NaiveFit(beta=state.beta, iterations=it, converged=converged, residual_variance=resid_var)
