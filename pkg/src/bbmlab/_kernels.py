"""Compiled inner loops: event-driven BBM growth, MRCA lookup, FKPP stepping."""
import numpy as np
from numba import njit


STACK = 1 << 14

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_DISCARD = np.uint64(0xD1B54A32D192ED03)


@njit(inline="always")
def _mix(z):
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


@njit(inline="always")
def _uniform(key, j):
    """j-th uniform in (0, 1) of the stream owned by ``key``."""
    z = _mix(key + np.uint64(j + 1) * _GOLDEN)
    return (np.float64(z >> np.uint64(11)) + 0.5) * (1.0 / 9007199254740992.0)


@njit(inline="always")
def _normal(key, j):
    u1 = _uniform(key, 2 * j + 1)
    u2 = _uniform(key, 2 * j + 2)
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)


@njit(inline="always")
def _child_key(key, b):
    return _mix(key ^ (np.uint64(b + 1) * _M2))


@njit(inline="always")
def _yule_count(key, tag, elapsed):
    """Yule population after ``elapsed`` from one particle: Geometric(e^{-elapsed})."""
    if elapsed <= 0.0:
        return 1
    u = _uniform(_mix(key ^ _DISCARD), tag)
    lq = np.log(-np.expm1(-elapsed))
    if lq == 0.0:
        return 1
    return int(np.floor(np.log(u) / lq)) + 1


@njit(cache=True)
def grow_tree(horizon, drift, sigma, x0, orient, cutoff, floor, cap, seed, count_discarded, slab):
    """Exact event-driven binary BBM up to ``horizon``.

    Every particle owns a counter-based random stream keyed by its genealogy
    (root key from ``seed``, child keys hashed from the parent's), so a
    particle's lifetime and increments do not depend on which other particles
    exist. Pruned and unpruned runs with the same seed therefore agree exactly
    on every surviving particle.

    Lifetimes are Exp(1) drawn at birth; positions are drawn (exact Gaussian
    increments) only at branch events, slab ends and the horizon. Time is cut
    into slabs of width ``slab``; at each slab end the current extreme of the
    population is known exactly and particles whose oriented position
    ``orient * x`` is below ``extreme - cutoff`` are pruned together with
    their future subtree. A particle whose oriented position is below
    ``floor`` at a branch event or slab end is pruned as well.

    Node status: 0 alive at horizon, 1 branched, 2 pruned. Arrays hold
    ``cap`` entries; if the tree needs more the run stops with ``overflow``
    set and the caller reruns with a larger ``cap`` (draws are identical).
    """
    parent = np.empty(cap, np.int64)
    bit = np.empty(cap, np.int8)
    depth = np.empty(cap, np.int32)
    birth = np.empty(cap, np.float64)
    death = np.empty(cap, np.float64)
    pos = np.empty(cap, np.float64)
    status = np.empty(cap, np.int8)
    key = np.empty(cap, np.uint64)
    act_id = np.empty(cap, np.int64)
    act_x = np.empty(cap, np.float64)
    act_p = np.empty(cap, np.int64)
    new_id = np.empty(cap, np.int64)
    new_x = np.empty(cap, np.float64)
    new_p = np.empty(cap, np.int64)
    st_id = np.empty(STACK, np.int64)
    st_t = np.empty(STACK, np.float64)
    st_x = np.empty(STACK, np.float64)
    st_p = np.empty(STACK, np.int64)

    parent[0] = -1
    bit[0] = 0
    depth[0] = 0
    birth[0] = 0.0
    key[0] = _mix(np.uint64(seed) + _GOLDEN)
    death[0] = -np.log(_uniform(key[0], -1))
    n = 1
    act_id[0] = 0
    act_x[0] = x0
    act_p[0] = 0
    n_act = 1
    discarded = 0
    overflow = False
    t0 = 0.0
    while n_act > 0:
        t1 = min(horizon, t0 + slab)
        if horizon - t1 < 1e-12:
            t1 = horizon
        n_new = 0
        for a in range(n_act):
            st_id[0] = act_id[a]
            st_t[0] = t0
            st_x[0] = act_x[a]
            st_p[0] = act_p[a]
            sp = 1
            while sp > 0:
                sp -= 1
                i = st_id[sp]
                t = st_t[sp]
                x = st_x[sp]
                pc = st_p[sp]
                d = death[i]
                if d >= t1:
                    h = t1 - t
                    x = x + drift * h + sigma * np.sqrt(h) * _normal(key[i], pc)
                    if t1 == horizon:
                        death[i] = horizon
                        pos[i] = x
                        status[i] = 0
                    else:
                        new_id[n_new] = i
                        new_x[n_new] = x
                        new_p[n_new] = pc + 1
                        n_new += 1
                    continue
                h = d - t
                x = x + drift * h + sigma * np.sqrt(h) * _normal(key[i], pc)
                pos[i] = x
                if orient * x < floor:
                    status[i] = 2
                    if count_discarded:
                        discarded += _yule_count(key[i], 0, horizon - d) + _yule_count(key[i], 1, horizon - d)
                    continue
                status[i] = 1
                if n + 2 > cap or sp + 2 > STACK:
                    overflow = True
                    break
                for b in range(2):
                    c = n
                    n += 1
                    parent[c] = i
                    bit[c] = b
                    depth[c] = depth[i] + 1
                    birth[c] = d
                    kc = _child_key(key[i], b)
                    key[c] = kc
                    death[c] = d - np.log(_uniform(kc, -1))
                    st_id[sp] = c
                    st_t[sp] = d
                    st_x[sp] = x
                    st_p[sp] = 0
                    sp += 1
            if overflow:
                break
        if overflow or t1 == horizon:
            break
        # slab end: exact current extreme, then prune
        ext = -np.inf
        for a in range(n_new):
            ox = orient * new_x[a]
            if ox > ext:
                ext = ox
        n_act = 0
        for a in range(n_new):
            ox = orient * new_x[a]
            if ox < ext - cutoff or ox < floor:
                i = new_id[a]
                death[i] = t1
                pos[i] = new_x[a]
                status[i] = 2
                if count_discarded:
                    discarded += _yule_count(key[i], 2, horizon - t1)
            else:
                act_id[n_act] = new_id[a]
                act_x[n_act] = new_x[a]
                act_p[n_act] = new_p[a]
                n_act += 1
        t0 = t1

    return (parent[:n].copy(), bit[:n].copy(), depth[:n].copy(), birth[:n].copy(),
            death[:n].copy(), pos[:n].copy(), status[:n].copy(), discarded, overflow)


@njit(cache=True)
def grow_leaves(horizon, drift, sigma, x0, orient, cutoff, floor, cap, seed, slab):
    """Same law as :func:`grow_tree` but only returns horizon positions.

    Avoids materialising the genealogy when a statistic only needs the
    population at the horizon (maxima, level sets, partition functions).
    """
    res = grow_tree(horizon, drift, sigma, x0, orient, cutoff, floor, cap, seed, False, slab)
    pos = res[5]
    status = res[6]
    m = 0
    for k in range(status.size):
        if status[k] == 0:
            m += 1
    out = np.empty(m, np.float64)
    j = 0
    for k in range(status.size):
        if status[k] == 0:
            out[j] = pos[k]
            j += 1
    return out, res[8]


@njit(cache=True)
def mrca_times(parent, depth, death, us, vs):
    """Death (branch) time of the most recent common ancestor for each pair."""
    out = np.empty(us.size, np.float64)
    for k in range(us.size):
        u = us[k]
        v = vs[k]
        if u == v:
            out[k] = -1.0
            continue
        while depth[u] > depth[v]:
            u = parent[u]
        while depth[v] > depth[u]:
            v = parent[v]
        while u != v:
            u = parent[u]
            v = parent[v]
        out[k] = death[u]
    return out


@njit(cache=True)
def gamma_values(parent, bit, birth):
    """gamma(node) = gamma(parent) + bit * exp(-birth), in creation order."""
    n = parent.size
    g = np.zeros(n, np.float64)
    for k in range(1, n):
        g[k] = g[parent[k]] + bit[k] * np.exp(-birth[k])
    return g


@njit(cache=True)
def fkpp_march(v, n_steps, dt, dx, speed, store_every, out, left, right):
    """Explicit steps of ``v_t = v_zz/2 + speed v_z + v - v^2`` with Dirichlet ends.

    Stores a copy of ``v`` into ``out[k]`` after every ``store_every[k]``-th step
    count (cumulative step indices, increasing).
    """
    m = v.size
    w = np.empty(m)
    diff = 0.5 * dt / (dx * dx)
    adv = speed * dt / (2.0 * dx)
    k = 0
    n_store = store_every.size
    while k < n_store and store_every[k] == 0:
        out[k, :] = v
        k += 1
    for step in range(1, n_steps + 1):
        for j in range(1, m - 1):
            vj = v[j]
            w[j] = vj + diff * (v[j + 1] - 2.0 * vj + v[j - 1]) + adv * (v[j + 1] - v[j - 1]) + dt * vj * (1.0 - vj)
        w[0] = left
        w[m - 1] = right
        for j in range(m):
            v[j] = w[j]
        while k < n_store and store_every[k] == step:
            out[k, :] = v
            k += 1
    return v
