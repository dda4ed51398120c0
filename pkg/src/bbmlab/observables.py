"""Thermodynamic and extremal statistics of BBM populations.

Gibbs weights are always handled as log-weights ``beta * x``. Pair sampling
uses one population for both temperatures.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from . import bbm_core
from .bbm_core import PopulationSnapshot, centering
from .errors import DomainError
from .stochastic_kit import (BETA_C, SQRT2, RngStream, as_generator, categorical_log_sample,
                             gumbel_max_sample, log_sum_exp)

N_BINS = 50
DEFAULT_DELTA = 1e-3
DEFAULT_WINDOW = 6.0
CSV_COLUMNS = ["seed", "stream_id", "t", "beta", "beta_prime", "a", "q_mean", "n_pairs",
               "logZ_beta", "logZ_betaprime", "Z_derivative", "max_centered"]


@dataclass(frozen=True)
class GibbsSpec:
    beta: float
    centered: bool = True

    def __post_init__(self):
        if not (np.isfinite(self.beta) and self.beta > 0):
            raise DomainError("beta must be finite and positive")


def _positions(snap: PopulationSnapshot, centered: bool) -> np.ndarray:
    return snap.centered if centered else snap.position


def log_partition(snap: PopulationSnapshot, spec: GibbsSpec) -> float:
    if len(snap) == 0:
        raise DomainError("empty population")
    return log_sum_exp(spec.beta * _positions(snap, spec.centered))


@dataclass
class FreeEnergyEstimate:
    horizon: float
    beta: float
    mean: float
    std_error: float
    corrected_mean: float
    corrected_std_error: float
    log_partitions: np.ndarray = field(repr=False)

    @property
    def limit(self):
        return free_energy_limit(self.beta)


def free_energy_limit(beta):
    """1 + beta^2/2 below beta_c, sqrt2 beta above."""
    beta = np.asarray(beta, dtype=float)
    out = np.where(beta <= BETA_C, 1.0 + 0.5 * beta * beta, SQRT2 * beta)
    return out if out.ndim else float(out)


def free_energy_estimate(horizon: float, beta: float, replicas: int, rng=None,
                         cutoff: float | None = None) -> FreeEnergyEstimate:
    """(1/t) E log Z_{beta,t} over independent trees, with the recentred statistic.

    The corrected statistic ``(1/t) log Z - beta m_t / t + sqrt2 beta`` removes
    the logarithmic part of the centring, which dominates the finite-t error
    above beta_c.
    """
    if replicas < 2:
        raise DomainError("need at least two replicas")
    base = rng if isinstance(rng, RngStream) else RngStream(0 if rng is None else int(rng))
    logz = np.empty(replicas)
    for k in range(replicas):
        x = bbm_core.simulate_positions(horizon, cutoff=cutoff, rng=base.replica(k))
        logz[k] = log_sum_exp(beta * x)
    f = logz / horizon
    corr = f - beta * centering(horizon) / horizon + SQRT2 * beta
    se = f.std(ddof=1) / np.sqrt(replicas)
    return FreeEnergyEstimate(horizon, beta, float(f.mean()), float(se), float(corr.mean()), float(se), logz)


def gibbs_sample_pair(snap: PopulationSnapshot, beta: float, beta_prime: float, rng,
                      size: int | None = None, as_address: bool = False):
    """Independent draws from G_beta and G_beta' on the same population.

    Returns indices into the snapshot arrays (addresses with ``as_address``).
    A single pair uses Gumbel-max; bulk draws a log-space cumulative table.
    """
    if len(snap) == 0:
        raise DomainError("empty population")
    gen = as_generator(rng)
    x = snap.centered
    if size is None:
        i = gumbel_max_sample(beta * x, gen)
        j = gumbel_max_sample(beta_prime * x, gen)
        if as_address:
            return snap.addresses[i], snap.addresses[j]
        return i, j
    i = categorical_log_sample(beta * x, size, gen)
    j = categorical_log_sample(beta_prime * x, size, gen)
    if as_address:
        return [snap.addresses[k] for k in i], [snap.addresses[k] for k in j]
    return i, j


def ancestors_at(tree, nodes, s):
    """For each node, its ancestor alive at time ``s`` (the node itself if born before)."""
    anc = np.asarray(nodes, dtype=np.int64).copy()
    while True:
        late = tree.birth[anc] > s
        if not late.any():
            return anc
        anc[late] = tree.parent[anc[late]]


def exact_overlap_mass(snap: PopulationSnapshot, beta: float, beta_prime: float, a: float) -> float:
    """G_beta x G_beta'(q >= a) computed exactly on one population.

    Two particles have overlap at least ``a`` exactly when they descend from
    the same particle alive at time ``a t``; the mass is then a sum over those
    ancestral families of products of family weights.
    """
    tree = snap.tree
    anc = ancestors_at(tree, snap.nodes, a * snap.horizon)
    _, fam = np.unique(anc, return_inverse=True)
    x = snap.centered
    w1 = np.exp(beta * x - beta * x.max())
    w2 = np.exp(beta_prime * x - beta_prime * x.max())
    f1 = np.bincount(fam, w1)
    f2 = np.bincount(fam, w2)
    return float(np.dot(f1, f2) / (f1.sum() * f2.sum()))


@dataclass
class OverlapEstimate:
    threshold: float
    n_pairs: int
    mean: float
    std_error: float
    histogram: np.ndarray
    replica_means: np.ndarray = field(repr=False)
    between_variance: float = float("nan")
    within_variance: float = float("nan")

    @property
    def bin_edges(self):
        return np.linspace(0.0, 1.0, self.histogram.size + 1)

    def mass_between(self, lo, hi):
        """Fraction of sampled pairs with q in bins fully inside [lo, hi]."""
        e = self.bin_edges
        sel = (e[:-1] >= lo - 1e-12) & (e[1:] <= hi + 1e-12)
        return self.histogram[sel].sum() / max(self.n_pairs, 1)


def overlap_distribution(snapshots, beta: float, beta_prime: float, a: float, n_pairs: int, rng,
                         method: str = "pairs") -> OverlapEstimate:
    """E[G_beta x G_beta'(q_t >= a)] over a stream of populations.

    ``method="pairs"`` samples ``n_pairs`` Gibbs pairs per population;
    ``method="exact"`` uses :func:`exact_overlap_mass` per population (the
    histogram is still filled from sampled pairs). The standard error is the
    spread of per-population values, which contains both the between- and
    within-population components; both are reported.
    """
    if not (0 < a < 1):
        raise DomainError("threshold a must lie in (0, 1)")
    if n_pairs <= 0:
        raise DomainError("n_pairs must be positive")
    gen = as_generator(rng)
    hist = np.zeros(N_BINS, dtype=np.int64)
    means, within = [], []
    for snap in snapshots:
        i, j = gibbs_sample_pair(snap, beta, beta_prime, gen, size=n_pairs)
        q = bbm_core.overlap_nodes(snap.tree, snap.nodes[i], snap.nodes[j])
        hist += np.bincount(np.minimum((q * N_BINS).astype(np.int64), N_BINS - 1), minlength=N_BINS)
        if method == "exact":
            p = exact_overlap_mass(snap, beta, beta_prime, a)
            within.append(0.0)
        else:
            p = float(np.mean(q >= a))
            within.append(p * (1 - p) / n_pairs)
        means.append(p)
    means = np.asarray(means)
    r = means.size
    if r == 0:
        raise DomainError("no populations supplied")
    total_var = means.var(ddof=1) if r > 1 else float("nan")
    w = float(np.mean(within))
    return OverlapEstimate(a, int(n_pairs * r), float(means.mean()),
                           float(np.sqrt(total_var / r)) if r > 1 else float("nan"),
                           hist, means, float(max(total_var - w, 0.0)), w)


@dataclass
class RhoMeasure:
    """Atoms (gamma_t(u), beta * centred position)."""

    gamma: np.ndarray
    log_mass: np.ndarray
    beta: float

    def total_log_mass(self):
        return log_sum_exp(self.log_mass)

    def restricted_log_mass(self, lower=-np.inf, upper=np.inf):
        """Log mass of atoms whose centred position lies in [lower, upper]."""
        x = self.log_mass / self.beta
        sel = (x >= lower) & (x <= upper)
        return log_sum_exp(self.log_mass[sel]) if sel.any() else -np.inf


def rho_measure(snap: PopulationSnapshot, beta: float) -> RhoMeasure:
    return RhoMeasure(snap.gamma.copy(), beta * snap.centered, float(beta))


def cluster_labels(gamma, delta: float) -> np.ndarray:
    """Single-linkage labels: sorted gamma values split at gaps larger than delta."""
    if not (delta > 0):
        raise DomainError("delta must be positive")
    g = np.asarray(gamma, dtype=float)
    order = np.argsort(g, kind="stable")
    breaks = np.concatenate([[0], (np.diff(g[order]) > delta).astype(np.int64)])
    labels = np.empty(g.size, dtype=np.int64)
    labels[order] = np.cumsum(breaks)
    return labels


def cluster_decompose(snap_or_gamma, delta: float) -> list:
    """Groups of particle indices whose gamma values chain within ``delta``."""
    g = snap_or_gamma.gamma if isinstance(snap_or_gamma, PopulationSnapshot) else snap_or_gamma
    labels = cluster_labels(g, delta)
    if labels.size == 0:
        return []
    order = np.argsort(labels, kind="stable")
    cuts = np.flatnonzero(np.diff(labels[order])) + 1
    return np.split(order, cuts)


def extremal_clusters(snap: PopulationSnapshot, delta: float = DEFAULT_DELTA, window: float = DEFAULT_WINDOW):
    """Particles with centred position within ``window`` of the max and their cluster labels.

    Linkage runs over the window only, so far-below particles cannot chain
    two extremal families together. Returns ``(indices, labels)``.
    """
    x = snap.centered if snap.normalization == "standard" else -snap.centered
    top = np.flatnonzero(x >= x.max() - window)
    return top, cluster_labels(snap.gamma[top], delta)


def derivative_martingale(snap: PopulationSnapshot) -> float:
    """sum (sqrt2 t - x) exp(-sqrt2 (sqrt2 t - x)) in the standard frame."""
    if snap.normalization != "standard":
        snap = bbm_core.from_abbs_frame(snap)
    d = SQRT2 * snap.horizon - snap.position
    return float(np.sum(d * np.exp(-SQRT2 * d)))


def level_set_count(snap_or_centered, A: float) -> int:
    x = snap_or_centered.centered if isinstance(snap_or_centered, PopulationSnapshot) else snap_or_centered
    return int(np.count_nonzero(np.asarray(x) >= -A))


@dataclass
class TailReport:
    levels: np.ndarray
    probability: np.ndarray
    std_error: np.ndarray
    decay_rate: float
    decay_rate_se: float
    median: float
    n: int


def fit_log_slope(levels, values, counts=None):
    """Weighted least-squares slope of log(values) on levels.

    ``counts`` (events behind each value) give Poisson-type weights; entries
    with zero value are skipped. Returns (slope, standard error).
    """
    levels = np.asarray(levels, float)
    values = np.asarray(values, float)
    ok = values > 0
    w = np.ones(ok.sum()) if counts is None else np.asarray(counts, float)[ok]
    if ok.sum() < 2:
        return float("nan"), float("nan")
    X = np.vstack([np.ones(ok.sum()), levels[ok]]).T
    W = np.diag(w)
    cov = np.linalg.inv(X.T @ W @ X)
    beta = cov @ X.T @ W @ np.log(values[ok])
    if counts is None:
        resid = np.log(values[ok]) - X @ beta
        s2 = resid @ resid / max(ok.sum() - 2, 1)
        cov = cov * s2
    return float(beta[1]), float(np.sqrt(cov[1, 1]))


def max_statistics(max_centered, levels=None, fit_range=(2.0, 6.0)) -> TailReport:
    """Empirical P(max centred position > A) and its exponential decay rate."""
    m = np.asarray(max_centered, dtype=float)
    if levels is None:
        levels = np.arange(-4.0, 8.01, 0.5)
    levels = np.asarray(levels, float)
    k = (m[None, :] > levels[:, None]).sum(axis=1)
    p = k / m.size
    se = np.sqrt(p * (1 - p) / m.size)
    sel = (levels >= fit_range[0] - 1e-12) & (levels <= fit_range[1] + 1e-12)
    rate, rate_se = fit_log_slope(levels[sel], p[sel], k[sel])
    return TailReport(levels, p, se, rate, rate_se, float(np.median(m)), m.size)


def level_set_slope(counts_by_level, max_centered, levels):
    """Slope of log E[N^A 1{max <= A}] on A.

    ``counts_by_level[r, k]`` is the level-set count of replica ``r`` at
    ``levels[k]``. Returns (slope, standard error, means).
    """
    n = np.asarray(counts_by_level, float)
    m = np.asarray(max_centered, float)
    keep = m[:, None] <= np.asarray(levels)[None, :]
    vals = n * keep
    means = vals.mean(axis=0)
    se = vals.std(axis=0, ddof=1) / np.sqrt(n.shape[0])
    # inverse-variance weights on the log scale
    w = (means / np.maximum(se, 1e-300)) ** 2
    slope, slope_se = fit_log_slope(levels, means, w)
    return slope, slope_se, means


@dataclass
class IbpReport:
    lhs: np.ndarray
    rhs: np.ndarray
    z: np.ndarray
    n_samples: int

    @property
    def max_abs_z(self):
        return float(np.max(np.abs(self.z)))


def _check_covariance(cov):
    c = np.asarray(cov, dtype=float)
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise DomainError("covariance must be square")
    if c.shape[0] > 10:
        raise DomainError("dimension at most 10")
    if not np.allclose(c, c.T, atol=1e-12):
        raise DomainError("covariance must be symmetric")
    ev = np.linalg.eigvalsh(c)
    if ev.min() < -1e-10 * max(1.0, ev.max()):
        raise DomainError("covariance is not positive semi-definite")
    return c


def gaussian_ibp_check(covariance, test_function_id: str = "softmax", rng=None, n_samples: int = 10 ** 6,
                       beta: float = 1.0, chunk: int = 200_000) -> IbpReport:
    """Monte Carlo check of E[X_i F(X)] = sum_j C_ij E[d_j F(X)].

    ``linear``: F(x) = sum_k (k+1) x_k. ``softmax``: F(x) = s_0(beta x), the
    Gibbs weight of coordinate 0, with d_j F = beta s_0 (1{j=0} - s_j).
    Both sides are evaluated on the same draws; z-scores use the spread of
    their per-sample difference.
    """
    c = _check_covariance(covariance)
    d = c.shape[0]
    gen = as_generator(rng)
    ev, vec = np.linalg.eigh(c)
    root = vec * np.sqrt(np.clip(ev, 0, None))
    s1 = np.zeros(d); s2 = np.zeros(d); lhs = np.zeros(d); rhs = np.zeros(d)
    done = 0
    while done < n_samples:
        m = min(chunk, n_samples - done)
        x = gen.standard_normal((m, d)) @ root.T
        if test_function_id == "linear":
            coef = np.arange(1, d + 1, dtype=float)
            f = x @ coef
            grad = np.broadcast_to(coef, (m, d))
        elif test_function_id == "softmax":
            z = beta * x
            z = z - z.max(axis=1, keepdims=True)
            s = np.exp(z)
            s /= s.sum(axis=1, keepdims=True)
            f = s[:, 0]
            grad = -beta * s[:, :1] * s
            grad[:, 0] += beta * s[:, 0]
        else:
            raise DomainError(f"unknown test function {test_function_id!r}")
        a = x * f[:, None]
        b = grad @ c.T
        diff = a - b
        lhs += a.sum(axis=0); rhs += b.sum(axis=0)
        s1 += diff.sum(axis=0); s2 += (diff * diff).sum(axis=0)
        done += m
    mean = s1 / n_samples
    var = s2 / n_samples - mean ** 2
    se = np.sqrt(np.maximum(var, 0) / n_samples)
    z = np.where(se > 0, mean / np.where(se > 0, se, 1.0), 0.0)
    return IbpReport(lhs / n_samples, rhs / n_samples, z, n_samples)


def replica_row(snap: PopulationSnapshot, seed: int, stream_id: int, beta: float, beta_prime: float,
                a: float, n_pairs: int, rng) -> dict:
    """One CSV row of per-population statistics."""
    gen = as_generator(rng)
    i, j = gibbs_sample_pair(snap, beta, beta_prime, gen, size=n_pairs)
    q = bbm_core.overlap_nodes(snap.tree, snap.nodes[i], snap.nodes[j])
    return {
        "seed": seed, "stream_id": stream_id, "t": snap.horizon, "beta": beta, "beta_prime": beta_prime,
        "a": a, "q_mean": float(np.mean(q >= a)), "n_pairs": n_pairs,
        "logZ_beta": log_partition(snap, GibbsSpec(beta, centered=False)),
        "logZ_betaprime": log_partition(snap, GibbsSpec(beta_prime, centered=False)),
        "Z_derivative": derivative_martingale(snap),
        "max_centered": float(snap.centered.max()),
    }


def write_replica_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(float(v)) if isinstance(v, (float, np.floating)) else v) for k, v in r.items()})
