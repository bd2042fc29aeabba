import numpy as np
import pytest
from scipy import stats

import config
from core.model_core import GAUSSIAN, UNSTRUCTURED, CovStructure, FamilySpec, Theta, make_dataset
from core.sampler import (
    ADAPTIVE_RW,
    INDEPENDENCE,
    POSTERIOR_MAGIC,
    ChainState,
    PosteriorDraws,
    SamplerConfig,
    adapt_scales,
    adaptation_step,
    estep_sample,
    mh_accept,
    new_chain,
    read_posterior,
    sample_size_schedule,
    write_posterior,
)
from utils.exceptions import ConfigError, DimensionMismatch, PosteriorFileError


@pytest.fixture
def gaussian_groups():
    """Random-intercept Gaussian data: two groups of five."""
    rng = np.random.default_rng(11)
    X = rng.normal(size=(10, 1))
    y = np.array([1.2, 0.8, 1.5, 0.9, 1.1, -0.7, -1.1, -0.4, -0.9, -1.3])
    return make_dataset(y, X, np.repeat([1, 2], 5), z_cols=[])


@pytest.fixture
def posterior_draws():
    rng = np.random.default_rng(5)
    return PosteriorDraws.from_array(rng.normal(size=(40, 3, 2)), ["g1", "g2", 7], ["(Intercept)", "x"])


@pytest.mark.parametrize(
    "s, M_prev, q, expected",
    [
        (1, None, 3, config.NMC_START_SMALL_Q),
        (1, None, 11, config.NMC_START_LARGE_Q),
        (2, 250, 3, 275),
        (15, 1000, 3, 1100),
        (16, 1000, 3, 1200),
        (20, 2400, 3, config.NMC_MAX_SMALL_Q),
        (20, 950, 11, config.NMC_MAX_LARGE_Q),
    ],
)
def test_sample_size_schedule(s, M_prev, q, expected):
    """Growth factor 1.1 through iteration 15, 1.2 afterwards, capped."""
    assert sample_size_schedule(s, M_prev, q) == expected


def test_sample_size_schedule_is_monotone():
    M = None
    sizes = []
    for s in range(1, 40):
        M = sample_size_schedule(s, M, 3)
        sizes.append(M)
    assert sizes == sorted(sizes)
    assert sizes[-1] == config.NMC_MAX_SMALL_Q


def test_sample_size_schedule_rejects_iteration_zero():
    with pytest.raises(ConfigError):
        sample_size_schedule(0, None, 2)


@pytest.mark.parametrize(
    "prop, cur, log_q, u, expected",
    [
        (-1.0, -1.0, 0.0, 0.999, True),
        (-3.0, -1.0, 0.0, 0.2, False),
        (-3.0, -1.0, 0.0, 0.1, True),
        (-3.0, -1.0, 2.0, 0.999, True),
    ],
)
def test_mh_accept(prop, cur, log_q, u, expected):
    assert mh_accept(prop, cur, log_q, u=u) is expected


def test_adaptation_step_diminishes():
    assert adaptation_step(1) == config.ADAPT_MAX_STEP
    assert adaptation_step(40000) == pytest.approx(0.005)


def test_adapt_scales_moves_toward_target_and_clips():
    chain = ChainState(
        current=np.zeros((1, 3)),
        rw_log_scales=np.array([[0.0, 0.0, config.LOG_SCALE_BOUND]]),
        accept_counts=np.zeros((1, 3)),
    )
    adapt_scales(chain, np.array([[0.9, 0.1, 0.9]]))
    assert chain.n_batches == 1
    np.testing.assert_allclose(chain.rw_log_scales, [[0.01, -0.01, config.LOG_SCALE_BOUND]])


def test_sampler_config_validation():
    with pytest.raises(ConfigError):
        SamplerConfig(kind="slice")
    with pytest.raises(ConfigError):
        SamplerConfig(nmc_start=500, nmc_max=100)
    assert SamplerConfig().max_for(20) == config.NMC_MAX_LARGE_Q


def test_zero_gamma_draws_recover_the_prior(gaussian_groups):
    """With Gamma = 0 the independence sampler returns iid standard normals."""
    ds = gaussian_groups
    struct = CovStructure(UNSTRUCTURED, 1)
    theta = Theta(beta=np.zeros(2), gamma=np.zeros(1), tau=1.0)
    chain = new_chain(ds, seed=3)
    draws = estep_sample(ds, theta, FamilySpec(GAUSSIAN), chain, 2000, 10, INDEPENDENCE, struct, seed=3)
    for column in draws.data.T:
        assert stats.kstest(column, "norm").pvalue > 0.001
    assert np.all(chain.acceptance_rates() == 1.0)


def test_random_walk_matches_conjugate_posterior(gaussian_groups):
    """Posterior mean of a Gaussian random intercept has a closed form."""
    ds = gaussian_groups
    struct = CovStructure(UNSTRUCTURED, 1)
    g, tau = 1.0, 0.5
    theta = Theta(beta=np.zeros(2), gamma=np.array([g]), tau=tau)
    draws = estep_sample(ds, theta, FamilySpec(GAUSSIAN), new_chain(ds, 9), 4000, 500, ADAPTIVE_RW, struct, seed=9)
    means = draws.by_group()[:, :, 0].mean(axis=0)
    for k, idx in enumerate(ds.group_index):
        precision = 1.0 + idx.size * g**2 / tau
        expected = (g / tau) * ds.y[idx].sum() / precision
        assert means[k] == pytest.approx(expected, abs=0.1)


def test_draws_do_not_depend_on_thread_count(gaussian_groups):
    ds = gaussian_groups
    struct = CovStructure(UNSTRUCTURED, 1)
    theta = Theta(beta=np.array([0.1, 0.2]), gamma=np.array([0.8]), tau=1.0)
    family = FamilySpec(GAUSSIAN)
    one = estep_sample(ds, theta, family, new_chain(ds, 4), 100, 60, ADAPTIVE_RW, struct, seed=4, threads=1)
    two = estep_sample(ds, theta, family, new_chain(ds, 4), 100, 60, ADAPTIVE_RW, struct, seed=4, threads=2)
    np.testing.assert_array_equal(one.data, two.data)


def test_draws_do_not_depend_on_chunk_size(gaussian_groups, monkeypatch):
    ds = gaussian_groups
    struct = CovStructure(UNSTRUCTURED, 1)
    theta = Theta(beta=np.array([0.1, 0.2]), gamma=np.array([0.8]), tau=1.0)
    family = FamilySpec(GAUSSIAN)
    whole = estep_sample(ds, theta, family, new_chain(ds, 4), 100, 60, ADAPTIVE_RW, struct, seed=4)
    monkeypatch.setattr(config, "RNG_CHUNK", 7)
    chunked = estep_sample(ds, theta, family, new_chain(ds, 4), 100, 60, ADAPTIVE_RW, struct, seed=4, threads=2)
    np.testing.assert_array_equal(whole.data, chunked.data)


def test_draws_follow_group_labels_not_row_order():
    """Reordering whole groups in the input leaves each group's draws unchanged."""
    rng = np.random.default_rng(11)
    X = rng.normal(size=(10, 1))
    y = rng.normal(size=10)
    order = np.r_[5:10, 0:5]
    ds = make_dataset(y, X, np.repeat([1, 2], 5), z_cols=[])
    shuffled = make_dataset(y[order], X[order], np.repeat([2, 1], 5), z_cols=[])
    struct = CovStructure(UNSTRUCTURED, 1)
    family = FamilySpec(GAUSSIAN)
    theta = Theta(beta=np.array([0.1, 0.2]), gamma=np.array([0.8]), tau=1.0)
    one = estep_sample(ds, theta, family, new_chain(ds, 6), 80, 40, ADAPTIVE_RW, struct, seed=6)
    two = estep_sample(shuffled, theta, family, new_chain(shuffled, 6), 80, 40, ADAPTIVE_RW, struct, seed=6)
    assert shuffled.levels == ds.levels
    np.testing.assert_allclose(one.by_group(), two.by_group(), rtol=1e-12)


def test_chain_carries_state_between_esteps(gaussian_groups):
    ds = gaussian_groups
    struct = CovStructure(UNSTRUCTURED, 1)
    theta = Theta(beta=np.zeros(2), gamma=np.array([0.5]), tau=1.0)
    chain = new_chain(ds, 1)
    first = estep_sample(ds, theta, FamilySpec(GAUSSIAN), chain, 30, 100, ADAPTIVE_RW, struct, seed=1)
    assert chain.n_estep == 1
    assert chain.n_batches == 2
    np.testing.assert_array_equal(chain.current, first.by_group()[-1])
    second = estep_sample(ds, theta, FamilySpec(GAUSSIAN), chain, 30, 0, ADAPTIVE_RW, struct, seed=1)
    assert chain.n_estep == 2
    assert not np.array_equal(first.data, second.data)


def test_chain_shape_checked(gaussian_groups):
    ds = gaussian_groups
    chain = ChainState(np.zeros((3, 1)), np.zeros((3, 1)), np.zeros((3, 1)))
    theta = Theta(beta=np.zeros(2), gamma=np.ones(1))
    with pytest.raises(DimensionMismatch):
        estep_sample(ds, theta, FamilySpec(GAUSSIAN), chain, 5, 0, ADAPTIVE_RW, CovStructure(UNSTRUCTURED, 1))


def test_posterior_file_round_trip(tmp_path, posterior_draws):
    path = str(tmp_path / "minpen.pglmpost")
    write_posterior(posterior_draws, path, seed=1618)
    loaded = read_posterior(path)
    assert loaded.data.tobytes() == posterior_draws.data.tobytes()
    assert loaded.labels == posterior_draws.labels
    assert (loaded.K, loaded.q) == (3, 2)
    with open(path, "rb") as handle:
        assert handle.read(len(POSTERIOR_MAGIC)) == POSTERIOR_MAGIC


def test_posterior_file_missing(tmp_path):
    with pytest.raises(PosteriorFileError, match="nowhere.pglmpost"):
        read_posterior(str(tmp_path / "nowhere.pglmpost"))


def test_posterior_file_truncated(tmp_path, posterior_draws):
    path = str(tmp_path / "cut.pglmpost")
    write_posterior(posterior_draws, path)
    with open(path, "rb") as handle:
        raw = handle.read()
    with open(path, "wb") as handle:
        handle.write(raw[:-8])
    with pytest.raises(PosteriorFileError, match="truncated"):
        read_posterior(path)


def test_posterior_file_bad_magic(tmp_path, posterior_draws):
    path = str(tmp_path / "bad.pglmpost")
    write_posterior(posterior_draws, path)
    with open(path, "r+b") as handle:
        handle.write(b"NOTPOST00")
    with pytest.raises(PosteriorFileError, match="not a PGLMPOST1"):
        read_posterior(path)
