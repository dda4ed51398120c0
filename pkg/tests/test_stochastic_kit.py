import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import special, stats

from bbmlab.errors import DomainError
from bbmlab.stochastic_kit import (
    SQRT2, RngStream, WeightedAtomConfiguration, bessel3_transition_cdf, categorical_log_sample,
    gaussian_moment_bound, gaussian_truncated_exp_moment, gumbel_max_sample, log_laplace_poisson_functional,
    log_sum_exp, log_sum_exp_rows, ppp_band_log_sums, ppp_mean_count, ppp_truncation_mass,
    sample_bessel3_path, sample_ppp_exponential, sample_ppp_exponential_batch)


# streams ---------------------------------------------------------------------------

def test_stream_reproducible_and_distinct():
    a = RngStream(7, 3).generator().standard_normal(5)
    b = RngStream(7, 3).generator().standard_normal(5)
    c = RngStream(7, 4).generator().standard_normal(5)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
    assert RngStream(7, 3).child(1) != RngStream(7, 3).child(2)


def test_distinct_streams_uncorrelated():
    x = RngStream(1, 0).generator().standard_normal(20000)
    y = RngStream(1, 1).generator().standard_normal(20000)
    assert abs(np.corrcoef(x, y)[0, 1]) < 0.03


# log-sum-exp -----------------------------------------------------------------------

def test_log_sum_exp_examples():
    assert log_sum_exp([0.0]) == 0.0
    assert log_sum_exp([-1000.0, -1000.0]) == pytest.approx(-1000.0 + np.log(2.0), rel=1e-15)
    with pytest.raises(DomainError):
        log_sum_exp([])


def test_log_sum_exp_direct_sum_oracle():
    v = np.random.default_rng(0).uniform(-5, 5, 50)
    assert log_sum_exp(v) == pytest.approx(np.log(np.sum(np.exp(v))), rel=1e-12)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=40), st.floats(-500, 500))
def test_log_sum_exp_shift_invariance(values, c):
    v = np.array(values)
    lhs = log_sum_exp(v + c)
    rhs = log_sum_exp(v) + c
    assert abs(lhs - rhs) <= 1e-12 * max(1.0, abs(rhs))


def test_log_sum_exp_rows_ignores_padding():
    a = np.array([[0.0, 0.0, -np.inf], [1.0, -np.inf, -np.inf]])
    assert np.allclose(log_sum_exp_rows(a), [np.log(2), 1.0])


# atom configurations ------------------------------------------------------------------

def test_configuration_validation():
    with pytest.raises(DomainError):
        WeightedAtomConfiguration([0.0, 1.0], sorted_flag=True)
    with pytest.raises(DomainError):
        WeightedAtomConfiguration([np.inf])
    c = WeightedAtomConfiguration([0.0, 2.0, 1.0]).sorted()
    assert c.sorted_flag and list(c.locations) == [2.0, 1.0, 0.0]


# PPP -------------------------------------------------------------------------------

def test_ppp_mean_counts():
    gen = np.random.default_rng(1)
    n0 = [len(sample_ppp_exponential(0.0, gen)) for _ in range(20000)]
    assert np.mean(n0) == pytest.approx(1 / SQRT2, abs=4 * np.sqrt(0.7071 / 20000))
    n3 = [len(sample_ppp_exponential(-3.0, gen)) for _ in range(4000)]
    mu = np.exp(3 * SQRT2) / SQRT2
    assert mu == pytest.approx(49.2085, abs=1e-3)
    assert np.mean(n3) == pytest.approx(mu, abs=4 * np.sqrt(mu / 4000))


def test_ppp_sorted_and_above_level():
    c = sample_ppp_exponential(-2.0, RngStream(3))
    assert c.sorted_flag and np.all(np.diff(c.locations) <= 0) and np.all(c.locations >= -2.0)


def test_ppp_max_is_gumbel():
    gen = np.random.default_rng(2)
    mx = []
    for _ in range(10000):
        c = sample_ppp_exponential(-4.0, gen)
        mx.append(c.locations[0] if len(c) else -np.inf)
    mx = np.array(mx)
    # void probability of the PPP above x
    p = stats.kstest(mx, lambda x: np.exp(-np.exp(-SQRT2 * x) / SQRT2)).pvalue
    assert p > 0.01


def test_ppp_counts_poisson_and_independent():
    locs, counts = sample_ppp_exponential_batch(-2.0, 10000, np.random.default_rng(4))
    n1 = np.sum((locs >= -1.0) & (locs < 0.0), axis=1)
    n2 = np.sum((locs >= 0.0) & (locs < 1.0), axis=1)
    assert abs(np.corrcoef(n1, n2)[0, 1]) < 0.05
    for n, (a, b) in ((n1, (-1.0, 0.0)), (n2, (0.0, 1.0))):
        mu = (np.exp(-SQRT2 * a) - np.exp(-SQRT2 * b)) / SQRT2
        k = np.arange(0, n.max() + 1)
        obs = np.bincount(n, minlength=k.size).astype(float)
        exp = stats.poisson.pmf(k, mu) * n.size
        # pool the upper tail so every expected cell has mass >= 5
        cut = np.flatnonzero(exp >= 5)[-1]
        o = np.append(obs[:cut], obs[cut:].sum())
        e = np.append(exp[:cut], n.size - exp[:cut].sum())
        assert stats.chisquare(o, e, ddof=0).pvalue > 0.01


def test_ppp_batch_matches_count_law():
    locs, counts = sample_ppp_exponential_batch(-1.0, 5000, RngStream(5))
    assert counts.mean() == pytest.approx(ppp_mean_count(-1.0), abs=4 * np.sqrt(ppp_mean_count(-1.0) / 5000))
    assert np.all(np.isneginf(locs[np.arange(locs.shape[1])[None, :] >= counts[:, None]]))


def test_truncation_mass_formula():
    # E sum_{xi < a} e^{k xi} = int_{-inf}^a e^{(k - sqrt2) x} dx
    a, k = -2.0, 2 * SQRT2
    assert ppp_truncation_mass(a, k) == pytest.approx(np.exp((k - SQRT2) * a) / (k - SQRT2))
    assert ppp_truncation_mass(a, 1.0) == np.inf


def test_band_sums_mean():
    # E sum_{band} e^{k xi} = int_band e^{(k - sqrt2) x} dx, checked against the exact integral
    lo, hi, k = -3.0, -1.0, 2 * SQRT2
    s = ppp_band_log_sums(lo, hi, [k], np.random.default_rng(6), n_samples=4000)[:, 0]
    exact = (np.exp((k - SQRT2) * hi) - np.exp((k - SQRT2) * lo)) / (k - SQRT2)
    v = np.exp(s)
    assert v.mean() == pytest.approx(exact, abs=4 * v.std() / np.sqrt(v.size))


# Bessel-3 -----------------------------------------------------------------------------

def test_bessel_basic():
    t, r = sample_bessel3_path(1.0, 0.1, RngStream(8), n_paths=10000)
    assert np.all(r[:, 0] == 0.0) and np.all(r >= 0)
    assert np.mean(r[:, -1] ** 2) == pytest.approx(3.0, abs=0.1)
    with pytest.raises(DomainError):
        sample_bessel3_path(1.0, 0.0, RngStream(8))
    with pytest.raises(DomainError):
        sample_bessel3_path(1.0, -0.1, RngStream(8))


def test_bessel_transition_ks():
    t, r = sample_bessel3_path(2.0, 0.5, RngStream(9), n_paths=5000)
    # r_{t+h} given r_t: PIT through the noncentral-chi transition is uniform
    u = bessel3_transition_cdf(r[:, 3], r[:, 2], 0.5)
    assert stats.kstest(u, "uniform").pvalue > 0.01


def test_bessel_upper_envelope_rare():
    t, r = sample_bessel3_path(1000.0, 1.0, RngStream(10), n_paths=2000)
    sel = t >= 100
    frac = np.mean(np.all(r[:, sel] > t[sel] ** 0.6, axis=1))
    assert frac < 0.05


# Gumbel-max -----------------------------------------------------------------------------

def test_gumbel_symmetric_and_weighted():
    gen = np.random.default_rng(11)
    i = gumbel_max_sample([0.0, 0.0], gen, size=10000)
    assert np.mean(i == 0) == pytest.approx(0.5, abs=0.02)
    j = gumbel_max_sample([0.0, np.log(3.0)], gen, size=10000)
    assert np.mean(j == 1) == pytest.approx(0.75, abs=0.02)
    with pytest.raises(DomainError):
        gumbel_max_sample([], gen)


def test_gumbel_chi_square():
    gen = np.random.default_rng(12)
    w = gen.normal(size=10)
    p = np.exp(w - log_sum_exp(w))
    idx = gumbel_max_sample(w, gen, size=100000)
    obs = np.bincount(idx, minlength=10)
    assert stats.chisquare(obs, p * idx.size).pvalue > 0.01


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(-20, 20), min_size=2, max_size=12), st.floats(-1000, 1000), st.integers(0, 2 ** 32))
def test_gumbel_argmax_shift_invariance(w, c, seed):
    w = np.array(w)
    a = gumbel_max_sample(w, np.random.default_rng(seed), size=50)
    b = gumbel_max_sample(w + c, np.random.default_rng(seed), size=50)
    # identical draws up to ties broken by rounding of w + c
    assert np.mean(a == b) >= 0.9


def test_categorical_matches_gumbel_law():
    gen = np.random.default_rng(13)
    w = np.array([0.0, 1.0, -2.0, 0.5])
    p = np.exp(w - log_sum_exp(w))
    idx = categorical_log_sample(w, 100000, gen)
    assert stats.chisquare(np.bincount(idx, minlength=4), p * 100000).pvalue > 0.01


# Gaussian lemmas ---------------------------------------------------------------------------

def test_truncated_moment_values():
    for x in (-1.0, 0.0, 2.0):
        assert gaussian_truncated_exp_moment(0.0, x) == pytest.approx(special.ndtr(x), rel=1e-12)
    assert gaussian_truncated_exp_moment(2.0, 1.0) <= np.exp(1.5)
    g = np.random.default_rng(14).standard_normal(10 ** 6)
    v = np.exp(1.5 * g) * (g <= 0.7)
    assert abs(v.mean() - gaussian_truncated_exp_moment(1.5, 0.7)) < 3 * v.std() / 1000


def test_truncated_moment_bound_grid():
    grid = np.linspace(0.1, 5.0, 50)
    for lam in grid:
        for x in grid[grid < lam]:
            assert gaussian_truncated_exp_moment(lam, x) <= gaussian_moment_bound(lam, x) * (1 + 1e-12)


# Poisson functional ----------------------------------------------------------------------------

def test_laplace_functional_examples():
    grid = np.linspace(0, 1, 201)
    one = lambda t: 1.0
    assert log_laplace_poisson_functional(one, one, None, 0.0, grid) == 0.0
    assert log_laplace_poisson_functional(one, one, None, 1.0, grid) == pytest.approx(1 - np.exp(-1), rel=1e-10)
    with pytest.raises(DomainError):
        log_laplace_poisson_functional(one, one, None, -1.0, grid)


def test_laplace_functional_sublinear_against_simulation():
    grid = np.linspace(0, 10, 2001)
    f = lambda t: np.exp(-t)
    phi = np.array([log_laplace_poisson_functional(f, lambda t: 1.0, None, lam, grid) for lam in (1, 10, 100, 1000)])
    r = phi / np.array([1, 10, 100, 1000])
    assert np.all(np.diff(r) < 0) and r[-1] < 0.01
    # direct simulation of S = sum_{t in PPP(Leb on [0,10])} e^{-t}
    gen = np.random.default_rng(15)
    n = gen.poisson(10.0, 20000)
    s = np.array([np.exp(-gen.uniform(0, 10, k)).sum() for k in n])
    for lam, p in zip((1, 10), phi[:2]):
        assert -np.log(np.mean(np.exp(-lam * s))) == pytest.approx(p, rel=0.03)
