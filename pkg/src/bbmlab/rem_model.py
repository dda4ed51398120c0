"""Random energy model reference: Gibbs overlap on a bare PPP(e^{-sqrt2 x} dx)."""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import bbm_core
from .errors import DomainError
from .limit_process import q_from_cluster_masses, tail_masses
from .stochastic_kit import (BETA_C, SQRT2, RngStream, WeightedAtomConfiguration, log_sum_exp_rows,
                             ppp_band_log_sums, sample_ppp_exponential_batch)

DEFAULT_LOWER = -8.0 / SQRT2
CSV_COLUMNS = ["seed", "stream_id", "beta", "beta_prime", "q_rem", "n_atoms"]


@dataclass(eq=False)
class RemConfiguration:
    atoms: WeightedAtomConfiguration

    def __post_init__(self):
        if not self.atoms.sorted_flag:
            self.atoms = self.atoms.sorted()

    def __len__(self):
        return len(self.atoms)


def overlap_Q_rem_atoms(eta, beta: float, beta_prime: float, tail=None) -> float:
    """sum e^{(b+b') eta} / (sum e^{b eta} sum e^{b' eta}), evaluated in log space.

    Shares its kernel with the decorated Q so that unit cluster masses give
    bit-identical results.
    """
    eta = np.asarray(eta, float)
    z = np.zeros(eta.size)
    return q_from_cluster_masses(eta, z, z, beta, beta_prime, tail)


def overlap_Q_rem(config: RemConfiguration, beta: float, beta_prime: float) -> float:
    if len(config) == 0:
        raise DomainError("empty configuration")
    return overlap_Q_rem_atoms(config.atoms.locations, beta, beta_prime)


@dataclass
class RemMean:
    mean: float
    std_error: float
    truncation_lower: float
    doubled_mean: float | None = None
    truncation_sensitive: bool | None = None
    samples: np.ndarray | None = None


def _tail_for(lower, beta, beta_prime, tail_correction, band=None):
    """Absolute log masses added below the sampled atoms (band sample and/or expected tail)."""
    parts = []
    if band is not None:
        parts.append(band)
    if tail_correction:
        parts.append(np.array(tail_masses(lower, beta, beta_prime)))
    if not parts:
        return None
    return tuple(np.logaddexp.reduce(np.vstack(parts), axis=0))


def q_rem_batch(locs, beta, beta_prime, tail=None) -> np.ndarray:
    """Row-wise Q^REM of padded atom arrays (``-inf`` padding), ``tail`` as in Q.

    ``tail`` may hold per-row arrays of absolute log masses.
    """
    c = locs[:, :1]
    x = locs - c
    l1 = log_sum_exp_rows(beta * x)
    l2 = log_sum_exp_rows(beta_prime * x)
    l12 = log_sum_exp_rows((beta + beta_prime) * x)
    if tail is not None:
        c0 = c[:, 0]
        l1 = np.logaddexp(l1, tail[0] - beta * c0)
        l2 = np.logaddexp(l2, tail[1] - beta_prime * c0)
        l12 = np.logaddexp(l12, tail[2] - (beta + beta_prime) * c0)
    return np.minimum(1.0, np.exp(l12 - (l1 + l2)))


def mean_overlap_rem(beta: float, beta_prime: float, n_samples: int, truncation_lower: float = DEFAULT_LOWER,
                     rng=None, check_truncation: bool = True, tail_correction: bool = False,
                     chunk: int = 1000) -> RemMean:
    """Monte Carlo E[Q^REM(beta, beta')] with a truncation-sensitivity flag.

    The flag reruns every sample with the truncation level doubled: the extra
    atoms in [2 lower, lower) are added to the same sample (paired), their
    exponential sums drawn bin by bin. It is raised when the paired means
    differ by more than one standard error. ``tail_correction`` adds the
    expected mass of all atoms below the level in use. Samples without any
    atom above the level are redrawn.
    """
    if n_samples < 100:
        raise DomainError("need at least 100 samples")
    if beta <= BETA_C or beta_prime <= BETA_C:
        raise DomainError("both temperatures must exceed beta_c")
    st = rng if isinstance(rng, RngStream) else RngStream(0 if rng is None else int(rng))
    gen = st.child(0).generator()
    band_gen = st.child(1).generator()
    tail = _tail_for(truncation_lower, beta, beta_prime, tail_correction)
    q, q2 = [], []
    done = 0
    while done < n_samples:
        m = min(chunk, n_samples - done)
        locs, counts = sample_ppp_exponential_batch(truncation_lower, m, gen)
        locs = locs[counts > 0]
        if locs.shape[0] == 0:
            continue
        q.append(q_rem_batch(locs, beta, beta_prime, None if tail is None else [np.full(locs.shape[0], v) for v in tail]))
        if check_truncation:
            band = ppp_band_log_sums(2 * truncation_lower, truncation_lower, [beta, beta_prime, beta + beta_prime],
                                     band_gen, n_samples=locs.shape[0])
            if tail_correction:
                deep = np.array(tail_masses(2 * truncation_lower, beta, beta_prime))
                band = np.logaddexp(band, deep[None, :])
            q2.append(q_rem_batch(locs, beta, beta_prime, band.T))
        done += locs.shape[0]
    q = np.concatenate(q)
    se = q.std(ddof=1) / np.sqrt(q.size)
    out = RemMean(float(q.mean()), float(se), truncation_lower, samples=q)
    if check_truncation:
        out.doubled_mean = float(np.concatenate(q2).mean())
        out.truncation_sensitive = bool(abs(out.doubled_mean - out.mean) > se)
    return out


def rem_from_bbm_count(horizon: float, beta: float, beta_prime: float, rng=None, replicas: int = 200,
                       count_source: str = "geometric"):
    """Finite-t REM: |N_t| i.i.d. N(0, t) energies, exact diagonal Gibbs mass.

    For each replica the overlap expectation sum_i p_i p'_i (q = 1 iff same
    index) is computed on the sample. The population size is taken from a
    simulated tree (``count_source="tree"``) or from its exact law, Geometric
    with success probability e^{-t} (``"geometric"``).
    """
    if horizon > 12:
        raise DomainError("horizon at most 12")
    st = rng if isinstance(rng, RngStream) else RngStream(0 if rng is None else int(rng))
    vals = np.empty(replicas)
    for k in range(replicas):
        gen = st.replica(k).generator()
        if count_source == "tree":
            n = bbm_core.simulate_positions(horizon, rng=st.replica(k).child(1)).size
        else:
            n = int(gen.geometric(np.exp(-horizon)))
        x = np.sqrt(horizon) * gen.standard_normal(n)
        z = np.zeros(n)
        vals[k] = q_from_cluster_masses(x, z, z, beta, beta_prime)
    return float(vals.mean()), float(vals.std(ddof=1) / np.sqrt(replicas))


def write_rem_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(float(v)) if isinstance(v, (float, np.floating)) else v) for k, v in r.items()})
