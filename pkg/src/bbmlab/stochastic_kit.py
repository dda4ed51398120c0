"""Random streams, log-space reductions and small probabilistic utilities.

Everything that carries a Gibbs weight works in log space; linear weights only
appear inside :func:`log_sum_exp`-style kernels.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np
from scipy import integrate, special

from .errors import DomainError

SQRT2 = np.sqrt(2.0)
BETA_C = SQRT2


@dataclass(frozen=True)
class RngStream:
    """Value-like handle on an independent random stream.

    Streams are keyed by ``(seed, stream_id)`` through :class:`numpy.random.SeedSequence`
    spawn keys, so distinct ids never share state and results do not depend on
    how replicas are scheduled across workers.
    """

    seed: int
    stream_id: int = 0
    subkey: tuple = ()

    def generator(self) -> np.random.Generator:
        seq = np.random.SeedSequence(self.seed, spawn_key=(self.stream_id,) + tuple(self.subkey))
        return np.random.Generator(np.random.PCG64(seq))

    def child(self, k: int) -> "RngStream":
        return replace(self, subkey=tuple(self.subkey) + (int(k),))

    def replica(self, k: int) -> "RngStream":
        """Stream for replica ``k`` of an experiment seeded by ``self.seed``."""
        return RngStream(self.seed, int(k))


def as_generator(rng) -> np.random.Generator:
    if isinstance(rng, RngStream):
        return rng.generator()
    if isinstance(rng, np.random.Generator):
        return rng
    if rng is None or isinstance(rng, (int, np.integer)):
        return np.random.default_rng(rng)
    raise TypeError(f"cannot build a generator from {type(rng).__name__}")


@dataclass
class WeightedAtomConfiguration:
    """Finite list of atoms ``(location, log_weight)``.

    With ``sorted_flag`` set, locations are nonincreasing.
    """

    locations: np.ndarray
    log_weights: np.ndarray = None
    sorted_flag: bool = False

    def __post_init__(self):
        self.locations = np.asarray(self.locations, dtype=float).reshape(-1)
        if self.log_weights is None:
            self.log_weights = np.zeros_like(self.locations)
        else:
            self.log_weights = np.asarray(self.log_weights, dtype=float).reshape(-1)
        if self.log_weights.shape != self.locations.shape:
            raise DomainError("locations and log_weights differ in length")
        if not np.all(np.isfinite(self.locations)):
            raise DomainError("atom locations must be finite")
        if self.sorted_flag and np.any(np.diff(self.locations) > 0):
            raise DomainError("sorted_flag set but locations are not nonincreasing")

    def __len__(self):
        return self.locations.size

    def sorted(self) -> "WeightedAtomConfiguration":
        order = np.argsort(-self.locations, kind="stable")
        return WeightedAtomConfiguration(self.locations[order], self.log_weights[order], True)

    def shifted(self, c: float) -> "WeightedAtomConfiguration":
        return WeightedAtomConfiguration(self.locations + c, self.log_weights.copy(), self.sorted_flag)


def log_sum_exp(values) -> float:
    """Stable ``log(sum(exp(values)))``."""
    v = np.asarray(values, dtype=float).reshape(-1)
    if v.size == 0:
        raise DomainError("log_sum_exp of an empty list")
    m = v.max()
    if not np.isfinite(m):
        return float(m)
    return float(m + np.log(np.sum(np.exp(v - m))))


def log_sum_exp_rows(values: np.ndarray) -> np.ndarray:
    """Row-wise log-sum-exp of a 2-D array; ``-inf`` entries are ignored."""
    v = np.asarray(values, dtype=float)
    m = np.max(v, axis=-1, keepdims=True)
    m_safe = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = m_safe[..., 0] + np.log(np.sum(np.exp(v - m_safe), axis=-1))
    return out


def ppp_mean_count(lower: float) -> float:
    """Mean number of atoms of PPP(e^{-sqrt2 x} dx) on [lower, inf)."""
    return float(np.exp(-SQRT2 * lower) / SQRT2)


def ppp_truncation_mass(lower: float, beta: float) -> float:
    """Expected Gibbs mass ``E sum_{xi < lower} e^{beta xi}`` discarded by truncation.

    Finite only for ``beta > sqrt2``; compare it with ``e^{beta * max}`` of a
    sample to pick ``lower`` for a target relative bias.
    """
    if beta <= SQRT2:
        return float("inf")
    return float(np.exp((beta - SQRT2) * lower) / (beta - SQRT2))


def sample_ppp_exponential(lower: float, rng) -> WeightedAtomConfiguration:
    """Atoms of PPP(e^{-sqrt2 x} dx) above ``lower``, sorted nonincreasing.

    Uses the arrival-time representation: if ``Gamma_k`` are the points of a
    unit-rate Poisson process then ``-log(sqrt2 Gamma_k)/sqrt2`` are the atoms in
    decreasing order.
    """
    if not np.isfinite(lower):
        raise DomainError("truncation level must be finite")
    gen = as_generator(rng)
    total = ppp_mean_count(lower)
    n = gen.poisson(total)
    # Given the count, arrival times are sorted uniforms on [0, total].
    arrivals = np.sort(gen.uniform(0.0, total, size=n))
    arrivals = np.maximum(arrivals, np.finfo(float).tiny)
    locs = -np.log(SQRT2 * arrivals) / SQRT2
    return WeightedAtomConfiguration(locs, np.zeros(n), sorted_flag=True)


def sample_ppp_exponential_batch(lower: float, n_samples: int, rng):
    """``n_samples`` independent truncated PPPs as a padded array.

    Returns ``(locations, counts)`` where row ``i`` holds ``counts[i]`` atoms in
    nonincreasing order followed by ``-inf`` padding.
    """
    gen = as_generator(rng)
    total = ppp_mean_count(lower)
    counts = gen.poisson(total, size=n_samples)
    width = max(int(counts.max(initial=0)), 1)
    u = gen.uniform(0.0, total, size=(n_samples, width))
    # pad before sorting: each row keeps exactly its own counts[i] uniforms
    u[np.arange(width)[None, :] >= counts[:, None]] = np.inf
    u = np.sort(u, axis=1)
    u = np.maximum(u, np.finfo(float).tiny)
    locs = -np.log(SQRT2 * u) / SQRT2
    return locs, counts


def ppp_band_log_sums(lower: float, upper: float, ks, rng, h: float = 0.01, n_samples: int | None = None):
    """log sum_{xi in [lower, upper)} e^{k xi} for each k over PPP(e^{-sqrt2 x} dx) samples.

    Bins of width ``h`` get Poisson counts; within a bin the positions enter
    through the exact conditional mean of e^{k xi}. Meant for deep bands that
    hold millions of atoms, where the within-bin spread is immaterial.
    Returns shape ``(len(ks),)``, or ``(n_samples, len(ks))`` when given.
    """
    gen = as_generator(rng)
    ks = np.atleast_1d(np.asarray(ks, dtype=float))
    n_bins = max(1, int(np.ceil((upper - lower) / h)))
    edges = np.linspace(lower, upper, n_bins + 1)
    lo, hi = edges[:-1], edges[1:]
    log_mu = -SQRT2 * lo + np.log(-np.expm1(-SQRT2 * (hi - lo))) - np.log(SQRT2)
    m = 1 if n_samples is None else int(n_samples)
    counts = gen.poisson(np.exp(log_mu), size=(m, n_bins))
    with np.errstate(divide="ignore"):
        lc = np.log(counts)
    out = np.empty((m, ks.size))
    for i, k in enumerate(ks):
        # E[e^{k xi} | xi in bin] = int_bin e^{(k - sqrt2) x} dx / mu
        c = k - SQRT2
        if abs(c) < 1e-12:
            log_int = np.log(hi - lo)
        else:
            log_int = c * lo + np.log(np.abs(np.expm1(c * (hi - lo))) / abs(c))
        out[:, i] = log_sum_exp_rows(lc + (log_int - log_mu)[None, :])
    return out[0] if n_samples is None else out


def sample_bessel3_path(horizon: float, step: float, rng, n_paths: int | None = None):
    """Three-dimensional Bessel process from 0 sampled on a regular grid.

    ``R_t = |B_t|`` with ``B`` a standard 3-d Brownian motion, so the grid
    marginals are exact. Returns ``(times, values)``; ``values`` has shape
    ``(n_paths, len(times))`` when ``n_paths`` is given.
    """
    if not (step > 0):
        raise DomainError("step must be positive")
    if not (horizon > 0) or step > horizon:
        raise DomainError("need 0 < step <= horizon")
    gen = as_generator(rng)
    n_steps = int(np.ceil(horizon / step - 1e-12))
    times = np.minimum(np.arange(n_steps + 1) * step, horizon)
    dt = np.diff(times)
    k = 1 if n_paths is None else int(n_paths)
    incr = gen.standard_normal((k, n_steps, 3)) * np.sqrt(dt)[None, :, None]
    b = np.concatenate([np.zeros((k, 1, 3)), np.cumsum(incr, axis=1)], axis=1)
    r = np.sqrt(np.sum(b * b, axis=2))
    return times, (r[0] if n_paths is None else r)


def bessel3_transition_cdf(r_next, r_prev, h):
    """CDF of ``R_{t+h}`` given ``R_t = r_prev`` (noncentral chi with 3 dof)."""
    from scipy import stats

    r_next = np.asarray(r_next, dtype=float)
    nc = (np.asarray(r_prev, dtype=float) ** 2) / h
    x = r_next ** 2 / h
    # scipy's ncx2 is undefined at nc=0; the central chi2 is its limit.
    return np.where(nc > 0, stats.ncx2.cdf(x, 3, np.maximum(nc, 1e-300)), stats.chi2.cdf(x, 3))


def gumbel_max_sample(log_weights, rng, size: int | None = None):
    """Index drawn with probability proportional to ``exp(log_weights)``.

    Gumbel-max: ``argmax(w_i + G_i)``; no normalisation is ever formed.
    With ``size`` the draws are independent and returned as an array.
    """
    w = np.asarray(log_weights, dtype=float).reshape(-1)
    if w.size == 0:
        raise DomainError("cannot sample from an empty weight vector")
    if not np.all(np.isfinite(w)):
        raise DomainError("log-weights must be finite")
    gen = as_generator(rng)
    if size is None:
        return int(np.argmax(w + gen.gumbel(size=w.size)))
    out = np.empty(size, dtype=np.int64)
    chunk = max(1, int(4_000_000 // w.size))
    for start in range(0, size, chunk):
        stop = min(size, start + chunk)
        g = gen.gumbel(size=(stop - start, w.size))
        out[start:stop] = np.argmax(w[None, :] + g, axis=1)
    return out


def categorical_log_sample(log_weights, size: int, rng) -> np.ndarray:
    """Bulk categorical draws from log-weights via a log-space cumulative table.

    Same law as :func:`gumbel_max_sample` but ``O(n + size log n)``; used when a
    population is large and many draws are needed from it.
    """
    w = np.asarray(log_weights, dtype=float).reshape(-1)
    if w.size == 0:
        raise DomainError("cannot sample from an empty weight vector")
    gen = as_generator(rng)
    cum = np.logaddexp.accumulate(w - w.max())
    u = np.log(gen.uniform(size=size)) + cum[-1]
    idx = np.searchsorted(cum, u, side="right")
    return np.minimum(idx, w.size - 1)


def gaussian_truncated_exp_moment(lam: float, x: float) -> float:
    """``E[e^{lam G} 1{G <= x}] = e^{lam^2/2} Phi(x - lam)`` for standard normal ``G``."""
    return float(np.exp(0.5 * lam * lam + special.log_ndtr(x - lam)))


def gaussian_moment_bound(lam: float, x: float) -> float:
    """Upper bound ``e^{lam x - x^2/2}``, valid when ``lam > x > 0``."""
    return float(np.exp(lam * x - 0.5 * x * x))


def log_laplace_poisson_functional(
    f: Callable,
    intensity: Callable,
    a_sampler: Callable | None,
    lam: float,
    grid: Sequence[float],
    n_mc: int = 2000,
    rng=None,
) -> float:
    """Log-Laplace exponent of ``sum_{t in PPP(mu)} f(t) A_t``.

    Campbell's formula gives ``phi(lam) = int E[1 - exp(-lam f(t) A_t)] mu(dt)``
    with ``mu(dt) = intensity(t) dt``; the time integral is a trapezoid on
    ``grid`` and the inner expectation a Monte Carlo average over ``n_mc``
    draws of ``a_sampler(t, n_mc, generator)`` (``None`` means ``A = 1``).
    """
    if lam < 0:
        raise DomainError("lambda must be nonnegative")
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 1 or grid.size < 2 or np.any(np.diff(grid) <= 0):
        raise DomainError("grid must be strictly increasing with at least two points")
    if lam == 0:
        return 0.0
    gen = as_generator(rng if rng is not None else 0)
    fv = np.asarray([f(t) for t in grid], dtype=float)
    mu = np.asarray([intensity(t) for t in grid], dtype=float)
    if np.any(mu < 0):
        raise DomainError("intensity must be nonnegative")
    inner = np.empty_like(grid)
    for i, t in enumerate(grid):
        if a_sampler is None:
            a = np.ones(1)
        else:
            a = np.atleast_1d(np.asarray(a_sampler(t, n_mc, gen), dtype=float))
        inner[i] = np.mean(-np.expm1(-lam * fv[i] * a))
    return float(integrate.trapezoid(inner * mu, grid))
