"""Limit objects of the extremal process: backward path, decorations, Q(beta, beta').

Frames: the decoration is built in the frame with drift 2 and variance 2
(``Q``-frame, atoms >= 0) and reported in the ``C``-frame through
``x -> -x / sqrt2`` (atoms <= 0, leader at 0).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate

from . import bbm_core, fkpp_front
from .errors import DomainError, SamplerBudgetError
from .stochastic_kit import (SQRT2, RngStream, WeightedAtomConfiguration, as_generator,
                             log_sum_exp, ppp_mean_count, sample_ppp_exponential)

SIGMA = SQRT2
DEFAULT_WINDOW = 4.0
DEFAULT_MARGIN = 3.0


def _stream(rng) -> RngStream:
    """Coerce to an RngStream so that sub-streams can be keyed by index."""
    if isinstance(rng, RngStream):
        return rng
    if rng is None or isinstance(rng, (int, np.integer)):
        return RngStream(0 if rng is None else int(rng))
    return RngStream(int(as_generator(rng).integers(0, 2 ** 63 - 1)))


# backward path ---------------------------------------------------------------

def path_grid(horizon: float, step: float = 0.01, fine_until: float = 10.0, ratio: float = 1.01) -> np.ndarray:
    """Regular grid up to ``fine_until`` then geometric coarsening up to ``horizon``."""
    if not (horizon > 0 and step > 0):
        raise DomainError("horizon and step must be positive")
    fine = np.arange(0.0, min(horizon, fine_until) + 0.5 * step, step)
    fine = fine[fine <= horizon + 1e-12]
    if horizon <= fine_until:
        if fine[-1] < horizon - 1e-12:
            fine = np.append(fine, horizon)
        return fine
    n = int(np.ceil(np.log(horizon / fine[-1]) / np.log(ratio)))
    coarse = fine[-1] * ratio ** np.arange(1, n + 1)
    coarse[-1] = horizon
    return np.concatenate([fine, coarse[coarse > fine[-1]]])


@dataclass(eq=False)
class BackwardPath:
    """Y = -sigma Gamma^(b) on ``grid`` (``T_b`` is a grid node when inside)."""

    grid: np.ndarray
    values: np.ndarray
    b: float
    T_b: float
    weight_accepted: bool = True
    log_weight: float = 0.0
    acceptance_probability: float = 1.0
    tail_integrand: float = 0.0

    def __call__(self, t):
        """Linear interpolation of Y."""
        return np.interp(t, self.grid, self.values)

    @property
    def horizon(self):
        return float(self.grid[-1])


def _propose_gamma(b: float, grid: np.ndarray, gen: np.random.Generator):
    """Gamma^(b) on ``grid`` with ``T_b`` inserted: BM until it hits b, then b - BES(3).

    T_b = b^2 / G^2 exactly. Before T_b the reversed path ``b - B_{T_b - u}``
    is a three-dimensional Bessel bridge from 0 to b over [0, T_b], i.e. the
    norm of a 3-d Brownian bridge from 0 to (b, 0, 0).
    """
    g = gen.standard_normal()
    T = b * b / max(g * g, 1e-300)
    if T < grid[-1]:
        k = np.searchsorted(grid, T)
        s = np.insert(grid, k, T) if not np.isclose(grid[min(k, grid.size - 1)], T, rtol=0, atol=1e-12) else grid.copy()
    else:
        s = grid.copy()
    gam = np.empty_like(s)
    pre = s <= T
    # bridge at reversed times u = T - s (ascending), plus u = T itself
    u = (T - s[pre])[::-1]
    u_all = np.append(u, T)
    du = np.diff(np.concatenate([[0.0], u_all]))
    z = np.cumsum(gen.standard_normal((u_all.size, 3)) * np.sqrt(np.maximum(du, 0.0))[:, None], axis=0)
    frac = (u_all / T)[:, None]
    w = z - frac * z[-1]
    w[:, 0] += frac[:, 0] * b
    r = np.sqrt(np.sum(w[:-1] ** 2, axis=1))
    gam[pre] = (b - r)[::-1]
    post = ~pre
    if post.any():
        v = s[post] - T
        dv = np.diff(np.concatenate([[0.0], v]))
        bm = np.cumsum(gen.standard_normal((v.size, 3)) * np.sqrt(dv)[:, None], axis=0)
        gam[post] = b - np.sqrt(np.sum(bm ** 2, axis=1))
    gam[0] = 0.0
    return s, gam, T


def acceptance_integral(grid, y, fkpp: fkpp_front.FkppTable) -> float:
    """Trapezoid of G_v(-Y(v)) on the path grid."""
    return float(integrate.trapezoid(fkpp_front.query(fkpp, grid, -y), grid))


def sample_backward_path(gamma_horizon: float, step: float, fkpp: fkpp_front.FkppTable,
                         max_rejections: int = 10 ** 4, rng=None, proposal_rate: float = 1.0) -> BackwardPath:
    """Rejection sampler for the backward path.

    Proposes ``b ~ Exp(proposal_rate)`` and ``Gamma^(b)``, accepts with probability
    ``exp(-2 int_0^H G_v(sigma Gamma_v) dv)``. The accepted path carries
    ``log_weight = rate * b`` (the ratio of the flat b-density to the proposal,
    up to a constant), so self-normalised weights give the target law.

    Proposals whose minimum time ``T_b`` falls beyond the horizon are
    rejected. Their truncated integral omits the climb to level b, which is
    what penalises large b, so keeping them would leave the b-marginal
    improper (acceptance near H^{-1/2} for every large b).
    """
    if fkpp.t_max < gamma_horizon - 1e-9:
        raise DomainError("FKPP table does not cover the path horizon")
    gen = as_generator(rng)
    grid = path_grid(gamma_horizon, step)
    for attempt in range(1, max_rejections + 1):
        b = gen.exponential(1.0 / proposal_rate)
        s, gam, T = _propose_gamma(b, grid, gen)
        if T > grid[-1]:
            continue
        y = -SIGMA * gam
        p = np.exp(-2.0 * acceptance_integral(s, y, fkpp))
        if gen.uniform() < p:
            tail = float(fkpp_front.query(fkpp, s[-1], -y[-1]))
            return BackwardPath(s, y, b, T, True, proposal_rate * b, float(p), tail)
    raise SamplerBudgetError(f"no backward path accepted in {max_rejections} proposals",
                             attempts=max_rejections, acceptance_rate=0.0)


def sample_backward_paths(n: int, gamma_horizon: float, step: float, fkpp, rng=None,
                          max_rejections: int = 10 ** 4, proposal_rate: float = 1.0):
    gen = as_generator(rng)
    return [sample_backward_path(gamma_horizon, step, fkpp, max_rejections, gen, proposal_rate) for _ in range(n)]


def importance_weights(paths) -> np.ndarray:
    """Self-normalised weights proportional to e^b."""
    lw = np.array([p.log_weight for p in paths])
    w = np.exp(lw - lw.max())
    return w / w.sum()


def resample(items, weights, n: int, rng) -> list:
    """Sampling-importance-resampling: ``n`` draws with replacement."""
    gen = as_generator(rng)
    idx = gen.choice(len(items), size=n, replace=True, p=weights)
    return [items[i] for i in idx]


# decorations -------------------------------------------------------------------

@dataclass(eq=False)
class DecorationSample:
    atoms: WeightedAtomConfiguration
    provenance: str
    T_max: float | None = None
    window_depth: float | None = None
    seed: int | None = None
    cluster: np.ndarray | None = None      # pi-time index of each atom, -1 for the leader
    times: np.ndarray | None = None        # retained pi times
    offsets: np.ndarray | None = None      # Y at those times
    failed_times: list = field(default_factory=list)
    log_weight: float = 0.0

    @property
    def failed(self):
        return len(self.failed_times) > 0

    @property
    def locations(self):
        return self.atoms.locations

    def check(self):
        x = self.atoms.locations
        assert x.size >= 1 and x[0] == 0.0
        assert np.all(x <= 0.0)
        assert np.all(np.diff(x) <= 0)
        return True


def _finish(atoms_q, labels, provenance, **kw) -> DecorationSample:
    """Q-frame atoms (>= 0, leader excluded) -> sorted C-frame decoration with Delta_0 = 0."""
    c = np.concatenate([[0.0], -np.asarray(atoms_q, float) / SQRT2])
    lab = np.concatenate([[-1], np.asarray(labels, np.int64)])
    # non-leader atoms are strictly negative, so the leader sorts first
    order = np.argsort(-c, kind="stable")
    conf = WeightedAtomConfiguration(c[order], np.zeros(c.size), sorted_flag=True)
    return DecorationSample(conf, provenance, cluster=lab[order], **kw)


def poisson_times(path: BackwardPath, T_max: float, fkpp, rng: RngStream):
    """Points of PPP(2 (1 - G_t(-Y(t))) dt) on [0, T_max] by thinning a rate-2 process.

    Candidate k uses sub-stream ``rng.child(k)`` for its retention draw, so
    enlarging ``T_max`` only appends points.
    """
    gen = rng.child(0).generator()
    times = []
    t = 0.0
    while True:
        t += gen.exponential(0.5)
        if t > T_max:
            break
        times.append(t)
    times = np.asarray(times)
    if times.size == 0:
        return times, np.empty(0, np.int64)
    y = path(times)
    keep_p = 1.0 - fkpp_front.query(fkpp, times, -y)
    u = np.array([rng.child(k + 1).generator().uniform() for k in range(times.size)])
    sel = u < keep_p
    return times[sel], np.flatnonzero(sel)


def sample_decoration_abbs(path: BackwardPath, T_max: float, fkpp, conditioning_budget: int = 10 ** 4,
                           rng=None, window_depth: float = DEFAULT_WINDOW, margin: float = DEFAULT_MARGIN,
                           seed: int | None = None) -> DecorationSample:
    """Decoration from conditioned BBMs hanging off the backward path.

    At each retained time t a BBM in the drift-2 frame starts at Y(t), runs
    for duration t and is redrawn until its minimum at time t is positive.
    Particles above the absolute barrier ``sqrt2 max(window_depth, 4) + margin``
    are pruned (they are assumed to stay positive); atoms deeper than
    ``window_depth`` in the C-frame are not reported. The barrier does not move
    for windows up to the default, so such windows nest exactly.
    """
    if path.horizon < T_max - 1e-9:
        raise DomainError("path horizon shorter than T_max")
    st = _stream(rng)
    depth_q = SQRT2 * window_depth
    barrier = SQRT2 * max(window_depth, DEFAULT_WINDOW) + margin
    times, idx = poisson_times(path, T_max, fkpp, st)
    offsets = path(times) if times.size else np.empty(0)
    atoms, labels, failed = [], [], []
    for c, (t, k, y0) in enumerate(zip(times, idx, offsets)):
        if y0 > barrier:
            continue  # the whole cluster starts above the barrier and drifts up
        sub = st.child(k + 1)
        ok = False
        for attempt in range(conditioning_budget):
            x = bbm_core.simulate_positions(t, "abbs", rng=sub.child(attempt + 1), x0=y0, floor=-barrier)
            if x.size == 0 or x.min() > 0.0:
                ok = True
                break
        if not ok:
            failed.append(float(t))
            continue
        w = x[x <= depth_q]
        atoms.append(w)
        labels.append(np.full(w.size, c, np.int64))
    a = np.concatenate(atoms) if atoms else np.empty(0)
    lab = np.concatenate(labels) if labels else np.empty(0, np.int64)
    return _finish(a, lab, "abbs_construction", T_max=T_max, window_depth=window_depth, seed=seed,
                   times=times, offsets=offsets, failed_times=failed, log_weight=path.log_weight)


def extract_decoration_empirical(snap: bbm_core.PopulationSnapshot, window_depth: float = DEFAULT_WINDOW,
                                 delta: float = 1e-3) -> DecorationSample:
    """Atoms of the argmax's gamma-cluster within ``window_depth`` of the max.

    Clusters are formed among the particles of the window only.
    """
    from .observables import extremal_clusters

    if snap.normalization != "standard":
        snap = bbm_core.from_abbs_frame(snap)
    top, lab = extremal_clusters(snap, delta, window_depth)
    d = snap.position[top] - snap.position.max()
    lead = int(np.argmax(d))
    sel = lab == lab[lead]
    sel[lead] = False
    # back to the Q-frame convention expected by _finish
    return _finish(-SQRT2 * d[sel], np.zeros(sel.sum(), np.int64), "empirical_extraction",
                   T_max=snap.horizon, window_depth=window_depth)


def degenerate_decoration() -> DecorationSample:
    return _finish(np.empty(0), np.empty(0, np.int64), "degenerate")


def decoration_functional_R(decoration: DecorationSample, beta: float) -> float:
    """R_beta = sum_{j >= 1} e^{beta Delta_j}."""
    x = decoration.locations[1:]
    return float(np.sum(np.exp(beta * x))) if x.size else 0.0


def decoration_functional_breakdown(decoration: DecorationSample, beta: float):
    """Per pi-time contributions e^{-(beta/sqrt2) Y(t)} C_t (abbs provenance).

    Returns ``(times, contributions)``; contributions sum to R_beta.
    """
    if decoration.times is None:
        raise DomainError("breakdown needs an abbs-construction decoration")
    lab = decoration.cluster[1:]
    w = np.exp(beta * decoration.locations[1:])
    contrib = np.bincount(lab, w, minlength=decoration.times.size) if lab.size else np.zeros(decoration.times.size)
    return decoration.times, contrib


# decorated configurations and Q ---------------------------------------------------

def q_from_cluster_masses(xi, log_a, log_b, beta, beta_prime, tail=None) -> float:
    """Q from cluster locations and per-cluster log masses.

    Cluster i carries weights e^{beta xi_i} e^{log_a_i} and
    e^{beta' xi_i} e^{log_b_i}. ``tail`` optionally adds the expected masses of
    discarded clusters as absolute log values ``(log T_beta, log T_beta', log T_both)``.
    The global max location is subtracted before exponentiating.
    """
    xi = np.asarray(xi, float)
    if xi.size == 0:
        raise DomainError("empty configuration")
    c = xi.max()
    s1 = beta * (xi - c) + log_a
    s2 = beta_prime * (xi - c) + log_b
    l12, l1, l2 = log_sum_exp(s1 + s2), log_sum_exp(s1), log_sum_exp(s2)
    if tail is not None:
        t1, t2, t12 = tail
        l1 = np.logaddexp(l1, t1 - beta * c)
        l2 = np.logaddexp(l2, t2 - beta_prime * c)
        l12 = np.logaddexp(l12, t12 - (beta + beta_prime) * c)
    return float(min(1.0, np.exp(l12 - (l1 + l2))))


@dataclass(eq=False)
class DecoratedConfiguration:
    xi: np.ndarray
    decorations: list
    source: str = "limit_sampler"
    truncation_lower: float | None = None

    def __len__(self):
        return self.xi.size


def cluster_log_masses(config: DecoratedConfiguration, beta: float) -> np.ndarray:
    return np.array([log_sum_exp(beta * d.locations) for d in config.decorations])


def overlap_Q(config: DecoratedConfiguration, beta: float, beta_prime: float, tail=None) -> float:
    """Gibbs overlap of two temperatures on a decorated configuration."""
    if len(config) == 0:
        raise DomainError("empty configuration")
    return q_from_cluster_masses(config.xi, cluster_log_masses(config, beta),
                                 cluster_log_masses(config, beta_prime), beta, beta_prime, tail)


class DecorationBank:
    """A pool of decorations with importance weights, resampled i.i.d. by SIR.

    Only per-decoration log masses are kept for the temperatures in use, which
    is all that Q needs.
    """

    def __init__(self, decorations, log_weights=None):
        self.decorations = list(decorations)
        if not self.decorations:
            raise DomainError("empty decoration bank")
        lw = np.zeros(len(self.decorations)) if log_weights is None else np.asarray(log_weights, float)
        w = np.exp(lw - lw.max())
        self.weights = w / w.sum()
        self._masses = {}

    def __len__(self):
        return len(self.decorations)

    def log_masses(self, beta: float) -> np.ndarray:
        key = float(beta)
        if key not in self._masses:
            self._masses[key] = np.array([log_sum_exp(beta * d.locations) for d in self.decorations])
        return self._masses[key]

    def draw(self, n: int, rng) -> np.ndarray:
        return as_generator(rng).choice(len(self.decorations), size=n, replace=True, p=self.weights)

    def mean_mass(self, beta: float) -> float:
        return float(np.dot(self.weights, np.exp(self.log_masses(beta))))

    def mean_joint_mass(self, beta: float, beta_prime: float) -> float:
        return float(np.dot(self.weights, np.exp(self.log_masses(beta) + self.log_masses(beta_prime))))

    def effective_size(self) -> float:
        return float(1.0 / np.sum(self.weights ** 2))


def assemble_decorated_configuration(n_decorations_budget: int, truncation_lower: float, decoration_source,
                                     rng) -> DecoratedConfiguration:
    """PPP(e^{-sqrt2 x} dx) cluster locations above ``truncation_lower`` with i.i.d. decorations.

    ``decoration_source`` is a :class:`DecorationBank`, a callable
    ``(generator) -> DecorationSample``, or ``"degenerate"``. The random shift
    (1/sqrt2) log(CZ) is omitted: Q is invariant under a common shift.
    """
    gen = as_generator(rng)
    ppp = sample_ppp_exponential(truncation_lower, gen)
    n = len(ppp)
    if n > n_decorations_budget:
        raise SamplerBudgetError(f"{n} clusters exceed the decoration budget {n_decorations_budget}",
                                 attempts=n)
    if isinstance(decoration_source, DecorationBank):
        decs = [decoration_source.decorations[i] for i in decoration_source.draw(n, gen)]
    elif decoration_source == "degenerate":
        d0 = degenerate_decoration()
        decs = [d0] * n
    else:
        decs = []
        for i in range(n):
            d = decoration_source(gen)
            if d.failed:
                raise SamplerBudgetError(f"decoration for cluster {i} failed its conditioning", attempts=i)
            decs.append(d)
    return DecoratedConfiguration(ppp.locations, decs, "limit_sampler", truncation_lower)


def tail_masses(truncation_lower: float, beta: float, beta_prime: float, mean_a=1.0, mean_b=1.0, mean_ab=1.0):
    """Expected masses of clusters below the truncation level (absolute logs).

    For PPP(e^{-sqrt2 x}) and i.i.d. cluster masses, E sum_{xi < a} e^{k xi} A =
    E[A] e^{(k - sqrt2) a} / (k - sqrt2).
    """
    a = truncation_lower

    def one(k, m):
        return np.log(m) + (k - SQRT2) * a - np.log(k - SQRT2)

    return one(beta, mean_a), one(beta_prime, mean_b), one(beta + beta_prime, mean_ab)


def q_samples_from_bank(bank: DecorationBank | None, n_configs: int, truncation_lower: float, beta: float,
                        beta_prime: float, rng, tail_correction: bool = True, paired: bool = True):
    """Q on ``n_configs`` limit configurations sharing the cluster locations with REM.

    Returns ``(q_decorated, q_rem)``; with ``bank=None`` both are REM values.
    Each configuration reuses one PPP sample for both statistics, so the
    difference has small variance.
    """
    from .rem_model import overlap_Q_rem_atoms

    gen = as_generator(rng)
    la_all = bank.log_masses(beta) if bank is not None else None
    lb_all = bank.log_masses(beta_prime) if bank is not None else None
    tail_d = tail_r = None
    if tail_correction:
        tail_r = tail_masses(truncation_lower, beta, beta_prime)
        if bank is not None:
            tail_d = tail_masses(truncation_lower, beta, beta_prime, bank.mean_mass(beta),
                                 bank.mean_mass(beta_prime), bank.mean_joint_mass(beta, beta_prime))
    qd = np.empty(n_configs)
    qr = np.empty(n_configs)
    for k in range(n_configs):
        xi = sample_ppp_exponential(truncation_lower, gen).locations
        while xi.size == 0:  # Q needs at least one cluster; only likely for shallow truncations
            xi = sample_ppp_exponential(truncation_lower, gen).locations
        qr[k] = overlap_Q_rem_atoms(xi, beta, beta_prime, tail_r)
        if bank is None:
            qd[k] = qr[k]
            continue
        idx = bank.draw(xi.size, gen)
        qd[k] = q_from_cluster_masses(xi, la_all[idx], lb_all[idx], beta, beta_prime, tail_d)
    return qd, qr


# coupling diagnostic ---------------------------------------------------------------

@dataclass
class CouplingReport:
    times: np.ndarray
    offsets: np.ndarray
    D: np.ndarray
    C: np.ndarray
    differ: np.ndarray
    last_difference_time: float | None
    weighted_D: np.ndarray
    weighted_C: np.ndarray

    def tail_fraction(self, after: float) -> float:
        """Share of sum_t e^{-(beta/sqrt2) Y(t)} D_t carried by times beyond ``after``."""
        tot = self.weighted_D.sum()
        return float(self.weighted_D[self.times > after].sum() / tot) if tot > 0 else 0.0


def coupling_diagnostic(path: BackwardPath, T_max: float, fkpp, rng=None, beta: float = 2 * SQRT2,
                        cutoff: float = 6.0, conditioning_budget: int = 10 ** 4) -> CouplingReport:
    """Coupled unconditioned (D_t) and conditioned (C_t) cluster masses.

    At each retained time the BBMs are i.i.d. replicates started at 0; D_t
    uses the first, C_t the first whose minimum at time t exceeds -Y(t).
    Replicates are pruned ``cutoff`` behind their running minimum, which is
    exact for the minimum and loses at most a relative e^{-(beta/sqrt2) cutoff}
    per discarded particle in the masses.
    """
    st = _stream(rng)
    times, idx = poisson_times(path, T_max, fkpp, st)
    offsets = path(times) if times.size else np.empty(0)
    k_ = beta / SQRT2
    D = np.empty(times.size); C = np.empty(times.size); differ = np.zeros(times.size, bool)
    for c, (t, k, y0) in enumerate(zip(times, idx, offsets)):
        sub = st.child(k + 1)
        got = False
        for attempt in range(conditioning_budget):
            x = bbm_core.simulate_positions(t, "abbs", cutoff=cutoff, rng=sub.child(attempt + 1))
            mass = float(np.sum(np.exp(-k_ * x)))
            if attempt == 0:
                D[c] = mass
            if x.min() + y0 > 0:
                C[c] = mass
                differ[c] = attempt > 0
                got = True
                break
        if not got:
            raise SamplerBudgetError(f"conditioning failed at t={t:.3f}", attempts=conditioning_budget)
    f = np.exp(-k_ * offsets)
    last = float(times[differ].max()) if differ.any() else None
    return CouplingReport(times, offsets, D, C, differ, last, f * D, f * C)


# serialization ---------------------------------------------------------------------

def decoration_to_json(d: DecorationSample) -> str:
    return json.dumps({"provenance": d.provenance, "seed": d.seed, "T_max": d.T_max,
                       "atoms": [float(v) for v in d.locations]})


def decoration_from_json(line: str) -> DecorationSample:
    obj = json.loads(line)
    atoms = WeightedAtomConfiguration(np.asarray(obj["atoms"], float), None, True)
    return DecorationSample(atoms, obj["provenance"], obj.get("T_max"), seed=obj.get("seed"))


def configuration_to_json(cfg: DecoratedConfiguration, seed=None) -> str:
    return json.dumps({"source": cfg.source, "seed": seed, "truncation_lower": cfg.truncation_lower,
                       "clusters": [{"xi": float(x), "atoms": [float(v) for v in d.locations]}
                                    for x, d in zip(cfg.xi, cfg.decorations)]})


def configuration_from_json(line: str) -> DecoratedConfiguration:
    obj = json.loads(line)
    xi = np.array([c["xi"] for c in obj["clusters"]], float)
    decs = [DecorationSample(WeightedAtomConfiguration(np.asarray(c["atoms"], float), None, True), "serialized")
            for c in obj["clusters"]]
    return DecoratedConfiguration(xi, decs, obj["source"], obj.get("truncation_lower"))
