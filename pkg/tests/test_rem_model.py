import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bbmlab import rem_model as rm
from bbmlab.errors import DomainError
from bbmlab.stochastic_kit import BETA_C, SQRT2, RngStream, WeightedAtomConfiguration


def test_q_rem_examples():
    assert rm.overlap_Q_rem_atoms([0.0], 3.0, 4.0) == 1.0
    assert rm.overlap_Q_rem_atoms([0.0, 0.0], 3.0, 3.0) == pytest.approx(0.5, abs=1e-15)
    # direct-sum oracle
    eta = np.array([0.2, -0.4, -1.3, -2.0])
    b, bp = 2.5, 3.5
    direct = np.exp((b + bp) * eta).sum() / (np.exp(b * eta).sum() * np.exp(bp * eta).sum())
    assert rm.overlap_Q_rem_atoms(eta, b, bp) == pytest.approx(direct, rel=1e-13)
    with pytest.raises(DomainError):
        rm.overlap_Q_rem(rm.RemConfiguration(WeightedAtomConfiguration([])), 3.0, 3.0)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-10, 5), min_size=1, max_size=30), st.floats(1.5, 6), st.floats(1.5, 6),
       st.floats(-100, 100))
def test_q_rem_range_symmetry_shift(eta, b, bp, c):
    q = rm.overlap_Q_rem_atoms(eta, b, bp)
    assert 0.0 <= q <= 1.0
    assert q == rm.overlap_Q_rem_atoms(eta, bp, b)
    assert abs(rm.overlap_Q_rem_atoms(np.asarray(eta) + c, b, bp) - q) < 1e-12


def test_batch_matches_scalar():
    from bbmlab.stochastic_kit import sample_ppp_exponential_batch
    locs, counts = sample_ppp_exponential_batch(-2.0, 200, np.random.default_rng(0))
    keep = counts > 0
    qb = rm.q_rem_batch(locs[keep], 3.0, 4.0)
    qs = [rm.overlap_Q_rem_atoms(row[:n], 3.0, 4.0) for row, n in zip(locs[keep], counts[keep])]
    assert np.allclose(qb, qs, rtol=1e-13, atol=0)


def test_mean_overlap_symmetric_point():
    # E Q^REM(beta, beta) = 1 - beta_c / beta; at 2 beta_c this is 1/2
    r = rm.mean_overlap_rem(2 * BETA_C, 2 * BETA_C, 20000, rng=RngStream(2))
    assert abs(r.mean - 0.5) < max(4 * r.std_error, 0.01)
    assert r.truncation_sensitive is not None


def test_mean_overlap_monotone_in_beta():
    ks = (1.5, 2, 3, 4)
    est = [rm.mean_overlap_rem(k * BETA_C, k * BETA_C, 5000, rng=RngStream(3), check_truncation=False) for k in ks]
    for a, b in zip(est, est[1:]):
        assert b.mean - 2 * b.std_error > a.mean + 2 * a.std_error
    for k, e in zip(ks, est):
        assert abs(e.mean - (1 - 1 / k)) < 0.03


def test_mean_overlap_four_beta_c():
    r = rm.mean_overlap_rem(4 * BETA_C, 4 * BETA_C, 20000, rng=RngStream(6), check_truncation=False)
    assert abs(r.mean - 0.75) <= 0.01


def test_mean_overlap_standard_error_budget():
    r = rm.mean_overlap_rem(1.5 * BETA_C, 3 * BETA_C, 10 ** 5, rng=RngStream(4), check_truncation=False,
                            tail_correction=True)
    print(f"E Q_REM(1.5 beta_c, 3 beta_c) = {r.mean:.4f} +- {r.std_error:.4f}")
    assert r.std_error < 0.005


def test_truncation_flag_raised_for_shallow_level():
    # a level of -0.5 leaves out most of the low-beta partition function
    r = rm.mean_overlap_rem(1.5 * BETA_C, 3 * BETA_C, 5000, truncation_lower=-0.5, rng=RngStream(5))
    assert r.truncation_sensitive
    assert r.doubled_mean < r.mean


def test_mean_overlap_domain():
    with pytest.raises(DomainError):
        rm.mean_overlap_rem(1.0, 3.0, 1000)
    with pytest.raises(DomainError):
        rm.mean_overlap_rem(3.0, 3.0, 10)


def test_rem_from_bbm_count():
    m, se = rm.rem_from_bbm_count(1e-9, 3.0, 3.0, rng=1, replicas=50)
    assert m == 1.0 and se == 0.0
    m, se = rm.rem_from_bbm_count(6.0, 2 * BETA_C, 2 * BETA_C, rng=2, replicas=200)
    assert 0 < m <= 1
    m2, _ = rm.rem_from_bbm_count(6.0, 2 * BETA_C, 2 * BETA_C, rng=2, replicas=50, count_source="tree")
    assert 0 < m2 <= 1
    with pytest.raises(DomainError):
        rm.rem_from_bbm_count(13.0, 3.0, 3.0)


def test_rem_csv(tmp_path):
    p = tmp_path / "rem.csv"
    rm.write_rem_csv([{"seed": 1, "stream_id": 0, "beta": 2 * SQRT2, "beta_prime": 2 * SQRT2, "q_rem": 0.25,
                       "n_atoms": 3}], p)
    rows = list(csv.DictReader(open(p)))
    assert list(rows[0]) == rm.CSV_COLUMNS
    assert float(rows[0]["beta"]) == 2 * SQRT2


def test_finite_population_rem_condenses_at_low_temperature():
    m, se = rm.rem_from_bbm_count(12.0, 2 * BETA_C, 2 * BETA_C, rng=7, replicas=200)
    print(f"finite REM, t = 12, 2 beta_c: {m:.4f} +- {se:.4f}")
    assert abs(m - 0.5) < 0.05


def test_finite_population_rem_spreads_at_high_temperature():
    m, se = rm.rem_from_bbm_count(12.0, BETA_C, BETA_C, rng=8, replicas=200)
    print(f"finite REM, t = 12, beta_c: {m:.4f} +- {se:.4f}")
    assert m < 0.05
