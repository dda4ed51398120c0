"""End-to-end acceptance checks; each prints one PASS/FAIL line (also echoed in the terminal summary)."""
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest
from scipy import stats

from bbmlab import bbm_core, fkpp_front as ff, limit_process as lp, observables as ob
from bbmlab.rem_model import mean_overlap_rem
from bbmlab.stochastic_kit import BETA_C, SQRT2, RngStream

from conftest import record

pytestmark = pytest.mark.slow

TRUNC = -8.0 / SQRT2


def fmt(x, se=None):
    return f"{x:.4f}" if se is None else f"{x:.4f} +- {se:.4f}"


# 1, 2: free energy ---------------------------------------------------------------------------------

def test_c1_free_energy_subcritical():
    est = ob.free_energy_estimate(12.0, BETA_C / 2, 200, rng=RngStream(101))
    ok = abs(est.mean - 1.25) <= 0.05
    record(1, "f(beta_c/2), t = 12, 200 replicas", ok, fmt(est.mean, est.std_error), "1.25 +- 0.05")
    assert ok


def test_c2_free_energy_supercritical():
    # cutoff 15 below the running max: log Z at 2 beta_c agrees with the full tree to 1e-6
    est = ob.free_energy_estimate(12.0, 2 * BETA_C, 200, rng=RngStream(102), cutoff=15.0)
    ok = abs(est.corrected_mean - 4.0) <= 0.1
    record(2, "corrected f(2 beta_c), t = 12", ok, fmt(est.corrected_mean, est.corrected_std_error), "4.0 +- 0.1")
    assert ok


# 3, 4, 6: overlaps -----------------------------------------------------------------------------------

@pytest.fixture(scope="module")
def gibbs12():
    # pruning 8 below the running max removes Gibbs mass of relative order e^{-16} at 2 beta_c
    snaps = [bbm_core.snapshot(bbm_core.simulate(12.0, pruning=8.0, rng=RngStream(103, k))) for k in range(200)]
    return ob.overlap_distribution(snaps, 2 * BETA_C, 2 * BETA_C, 0.5, 200, np.random.default_rng(103),
                                   method="exact")


@pytest.fixture(scope="module")
def bank(decoration_bank):
    return decoration_bank[2]


def test_c3a_overlap_bbm(gibbs12):
    ok = abs(gibbs12.mean - 0.5) <= 0.05
    record("3a", "E G x G(q >= 1/2), 2 beta_c, t = 12", ok, fmt(gibbs12.mean, gibbs12.std_error), "0.5 +- 0.05")
    assert ok


def test_c3b_overlap_limit(bank):
    qd, _ = lp.q_samples_from_bank(bank, 10 ** 4, TRUNC, 2 * BETA_C, 2 * BETA_C, np.random.default_rng(104))
    m, se = qd.mean(), qd.std(ddof=1) / np.sqrt(qd.size)
    ok = abs(m - 0.5) <= 0.03
    record("3b", "E Q(2 beta_c, 2 beta_c), decorated limit", ok, fmt(m, se), "0.5 +- 0.03")
    assert ok


def test_c3c_overlap_rem():
    r = mean_overlap_rem(2 * BETA_C, 2 * BETA_C, 10 ** 5, rng=RngStream(105), check_truncation=False)
    ok = abs(r.mean - 0.5) <= 0.01
    record("3c", "E Q^REM(2 beta_c, 2 beta_c)", ok, fmt(r.mean, r.std_error), "0.5 +- 0.01")
    assert ok


@pytest.mark.parametrize("k1,k2", [(1.5, 3.0), (2.0, 4.0)])
def test_c4_decorated_below_rem(bank, k1, k2):
    qd, qr = lp.q_samples_from_bank(bank, 10 ** 4, TRUNC, k1 * BETA_C, k2 * BETA_C, np.random.default_rng(106))
    d = qd - qr
    se = d.std(ddof=1) / np.sqrt(d.size)
    p = stats.t.cdf(d.mean() / se, df=d.size - 1)
    ok = d.mean() < 0 and p < 1e-3
    record(4, f"E Q - E Q^REM at ({k1}, {k2}) beta_c", ok, f"{fmt(d.mean(), se)}, one-sided p = {p:.2e}",
           "negative, p < 0.001")
    assert ok


def test_c6_overlap_dichotomy(gibbs12):
    mid = gibbs12.mass_between(0.2, 0.8)
    ok = mid < 0.05
    record(6, "Gibbs pair mass of q in (0.2, 0.8), 2 beta_c, t = 12", ok, fmt(mid), "< 0.05")
    assert ok


# 5: mixed temperatures -------------------------------------------------------------------------------

def test_c5_mixed_temperature_overlap_decays():
    means = []
    for i, t in enumerate((8.0, 10.0, 12.0)):
        snaps = (bbm_core.snapshot(bbm_core.simulate(t, rng=RngStream(107 + i, k))) for k in range(100))
        est = ob.overlap_distribution(snaps, BETA_C / 2, 2 * BETA_C, 0.5, 50, np.random.default_rng(107),
                                      method="exact")
        means.append(est.mean)
    ok = bool(np.all(np.diff(means) < 0) and means[-1] < 0.05)
    record(5, "E G x G'(q >= 1/2), (beta_c/2, 2 beta_c), t = 8, 10, 12", ok,
           ", ".join(fmt(m) for m in means), "decreasing and < 0.05 at t = 12")
    assert ok


# 7, 8: tail and level sets ------------------------------------------------------------------------

def test_c7_max_tail_rate():
    t = 12.0
    m = np.array([bbm_core.simulate_positions(t, cutoff=7.0, rng=RngStream(109, k)).max()
                  for k in range(10 ** 4)]) - bbm_core.centering(t)
    rep = ob.max_statistics(m, fit_range=(2.0, 6.0))
    ok = abs(rep.decay_rate + SQRT2) <= 0.2
    record(7, "decay rate of log P(max - m_t > A), A in [2, 6]", ok, fmt(rep.decay_rate, rep.decay_rate_se),
           "-1.4142 +- 0.2")
    assert ok


def test_c8_level_set_slope():
    t = 12.0
    levels = np.arange(2.0, 8.01, 0.5)
    counts, mx = [], []
    for k in range(1000):
        x = bbm_core.simulate_positions(t, cutoff=15.0, rng=RngStream(110, k)) - bbm_core.centering(t)
        counts.append([ob.level_set_count(x, a) for a in levels])
        mx.append(x.max())
    slope, se, _ = ob.level_set_slope(np.array(counts), np.array(mx), levels)
    ok = abs(slope - SQRT2) <= 0.15
    record(8, "slope of log E[N^A; max <= A], A in [2, 8]", ok, fmt(slope, se), "1.4142 +- 0.15")
    assert ok


# 9, 10: FKPP and backward paths -----------------------------------------------------------------------

def test_c9_fkpp_matches_simulation(fkpp100):
    n = 10 ** 4
    m = np.sort([bbm_core.simulate_positions(8.0, "abbs", cutoff=8.0, rng=RngStream(111, k)).min()
                 for k in range(n)])
    g = ff.query(fkpp100, 8.0, m)
    dist = max(np.max(np.abs(np.arange(1, n + 1) / n - g)), np.max(np.abs(np.arange(n) / n - g)))
    ok = dist < 0.05
    record(9, "sup |G_8 - empirical CDF of the abbs minimum|", ok, fmt(dist), "< 0.05")
    assert ok


def test_c10_backward_path_envelope():
    table = ff.cached_solve(1000.0)
    gen = np.random.default_rng(112)
    bad = 0
    n = 1000
    for _ in range(n):
        p = lp.sample_backward_path(1000.0, 0.01, table, rng=gen)
        sel = (p.grid >= 100) & (p.grid <= 1000)
        s, y = p.grid[sel], p.values[sel]
        bad += bool(np.any((y <= s ** 0.4) | (y >= s ** 0.6)))
    frac = bad / n
    ok = frac < 0.1
    record(10, "fraction of paths leaving (t^0.4, t^0.6) on [100, 1000]", ok, fmt(frac), "< 0.10")
    assert ok


# 11: decoration functional --------------------------------------------------------------------------------

def test_c11_support_of_zero(decoration_bank):
    _, decs, bank = decoration_bank
    r = np.array([lp.decoration_functional_R(d, 2 * BETA_C) for d in decs])
    w = bank.weights
    p0 = float(np.dot(w, r < 0.05))
    lams = np.array([1.0, 10.0, 100.0])
    phi = np.array([-np.log(np.dot(w, np.exp(-lam * r))) for lam in lams])
    ratio = phi / lams
    ok = p0 > 0 and bool(np.all(np.diff(ratio) < 0))
    record(11, "P(R_{2 beta_c} < 0.05) and phi(lambda)/lambda at 1, 10, 100", ok,
           f"{p0:.4f}; " + ", ".join(fmt(v) for v in ratio), "> 0; decreasing")
    assert ok


# 12: property suites ---------------------------------------------------------------------------------------

PROPERTY_TESTS = [
    "test_stochastic_kit.py::test_log_sum_exp_shift_invariance",
    "test_limit_process.py::test_q_symmetry_shift_range",
    "test_rem_model.py::test_q_rem_range_symmetry_shift",
    "test_limit_process.py::test_degenerate_decorations_equal_rem_bitwise",
    "test_bbm_core.py::test_ultrametric_inequality",
    "test_bbm_core.py::test_gamma_lineage_consistency",
    "test_stochastic_kit.py::test_gumbel_chi_square",
    "test_stochastic_kit.py::test_ppp_counts_poisson_and_independent",
    "test_stochastic_kit.py::test_truncated_moment_bound_grid",
    "test_observables.py::test_ibp_identity",
    "test_bbm_core.py::test_pruned_log_partition_matches_unpruned",
]


def test_c12_property_suites():
    here = Path(__file__).parent
    ids = [str(here / t) for t in PROPERTY_TESTS]
    res = subprocess.run([sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider", *ids],
                         capture_output=True, text=True, cwd=here.parent)
    tail = res.stdout.strip().splitlines()[-1] if res.stdout.strip() else res.stderr[-200:]
    ok = res.returncode == 0
    record(12, "property suites", ok, tail, "all pass")
    assert ok, res.stdout[-3000:]
