"""Binary branching Brownian motion as a flat genealogical tree.

Nodes live in parallel arrays indexed by creation order; the two children of a
node are created consecutively (bit 0 then bit 1), so addresses are never
stored and are only spelled out on request.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .errors import DomainError, MemoryBudgetError
from .stochastic_kit import SQRT2, RngStream, as_generator

DEFAULT_NODE_BUDGET = 2 ** 27
DEFAULT_SLAB = 0.5

# (drift, sigma, orientation of the extreme)
FRAMES = {
    "standard": (0.0, 1.0, 1.0),
    "abbs": (2.0, SQRT2, -1.0),
}

STATUS_ALIVE, STATUS_BRANCHED, STATUS_PRUNED = 0, 1, 2


def centering(t):
    """m_t = sqrt2 t - 3/(2 sqrt2) log t."""
    return SQRT2 * t - 3.0 / (2.0 * SQRT2) * np.log(t)


def to_abbs(x, t):
    """Standard-frame position -> frame with drift 2, variance 2 (max becomes min)."""
    return SQRT2 * (SQRT2 * t - np.asarray(x, dtype=float))


def from_abbs(y, t):
    return SQRT2 * t - np.asarray(y, dtype=float) / SQRT2


def kernel_seed(rng) -> int:
    """Root key for the compiled counter-based generator, drawn from an RngStream."""
    return int(as_generator(rng).integers(0, 2 ** 63 - 1))


@dataclass
class PruningRecord:
    cutoff: float | None = None
    discarded_count: int = 0


@dataclass(eq=False)
class ParticleTree:
    parent: np.ndarray
    bit: np.ndarray
    depth: np.ndarray
    birth: np.ndarray
    death: np.ndarray
    position: np.ndarray
    status: np.ndarray
    horizon: float
    normalization: str = "standard"
    pruning: PruningRecord = field(default_factory=PruningRecord)

    def __post_init__(self):
        self._first_child = None
        self._alive = None

    @property
    def n_nodes(self):
        return self.parent.size

    @property
    def alive(self) -> np.ndarray:
        if self._alive is None:
            self._alive = np.flatnonzero(self.status == STATUS_ALIVE)
        return self._alive

    def first_child(self) -> np.ndarray:
        if self._first_child is None:
            fc = np.full(self.n_nodes, -1, dtype=np.int64)
            kids = np.flatnonzero((self.parent >= 0) & (self.bit == 0))
            fc[self.parent[kids]] = kids
            self._first_child = fc
        return self._first_child

    def address(self, node: int) -> str:
        bits = []
        while node > 0:
            bits.append("1" if self.bit[node] else "0")
            node = self.parent[node]
        return "".join(reversed(bits))

    def node_of(self, address: str) -> int:
        fc = self.first_child()
        node = 0
        for ch in address:
            if ch not in "01":
                raise DomainError(f"bad address character {ch!r}")
            c = fc[node]
            if c < 0:
                raise DomainError(f"address {address!r} is not in the tree")
            node = c + (ch == "1")
        return int(node)

    def check(self):
        """Structural invariants; raises AssertionError on violation."""
        assert self.parent[0] == -1 and self.birth[0] == 0.0
        kids = np.arange(1, self.n_nodes)
        p = self.parent[kids]
        assert np.all(self.birth[kids] == self.death[p])
        assert np.all(self.status[p] == STATUS_BRANCHED)
        assert np.all(self.birth < self.death)
        assert np.all(self.death[self.alive] == self.horizon)
        return True


def estimated_nodes(horizon: float) -> float:
    """Expected node count of an unpruned tree: 2 e^t - 1."""
    return 2.0 * np.exp(horizon) - 1.0


def simulate(
    horizon: float,
    normalization: str = "standard",
    pruning: dict | float | None = None,
    rng=None,
    *,
    x0: float = 0.0,
    floor: float | None = None,
    node_budget: int = DEFAULT_NODE_BUDGET,
    slab: float | None = None,
    count_discarded: bool = True,
) -> ParticleTree:
    """Exact event-driven simulation up to ``horizon``.

    ``pruning`` is ``None``, a cutoff, or ``{"cutoff_below_running_max": c}``:
    at every multiple of ``slab`` particles lying more than ``c`` behind the
    current extreme are dropped with their future subtree (the extreme is the
    max in the standard frame and the min in the abbs frame). ``floor`` drops
    particles whose oriented position falls below a fixed level.

    Draws are keyed by genealogy and by the slab lattice, so two runs with the
    same ``rng`` and the same ``slab`` share every surviving particle exactly.
    ``slab`` defaults to the horizon when there is no cutoff.
    """
    if not (horizon > 0):
        raise DomainError("horizon must be positive")
    if normalization not in FRAMES:
        raise DomainError(f"unknown normalization {normalization!r}")
    if isinstance(pruning, dict):
        pruning = pruning.get("cutoff_below_running_max")
    cutoff = np.inf if pruning is None else float(pruning)
    if not (cutoff > 0):
        raise DomainError("cutoff must be positive")
    drift, sigma, orient = FRAMES[normalization]
    fl = -np.inf if floor is None else float(floor)
    need = estimated_nodes(horizon)
    if np.isinf(cutoff) and floor is None and need > node_budget:
        raise MemoryBudgetError(
            f"expected {need:.3g} nodes at horizon {horizon} exceeds budget {node_budget}",
            required_nodes=need, budget=node_budget)
    if slab is None:
        # without relative pruning one slab avoids the bookkeeping
        slab = horizon if np.isinf(cutoff) else DEFAULT_SLAB
    seed = kernel_seed(rng if rng is not None else RngStream(0))
    cap = int(min(node_budget, max(1024, 1.5 * need if np.isinf(cutoff) else 2 ** 16)))
    while True:
        res = _kernels.grow_tree(float(horizon), drift, sigma, float(x0), orient, cutoff, fl,
                                 cap, seed, count_discarded, float(slab))
        if not res[8]:
            break
        if cap >= node_budget:
            raise MemoryBudgetError(f"tree exceeded the node budget {node_budget}",
                                    required_nodes=None, budget=node_budget)
        cap = min(node_budget, 2 * cap)
    parent, bit, depth, birth, death, pos, status, discarded, _ = res
    return ParticleTree(parent, bit, depth, birth, death, pos, status, float(horizon), normalization,
                        PruningRecord(None if np.isinf(cutoff) else cutoff, int(discarded)))


def simulate_positions(horizon, normalization="standard", cutoff=None, rng=None, *,
                       x0=0.0, floor=None, node_budget=DEFAULT_NODE_BUDGET, slab=None):
    """Horizon positions only (same law and same draws as :func:`simulate`)."""
    drift, sigma, orient = FRAMES[normalization]
    c = np.inf if cutoff is None else float(cutoff)
    fl = -np.inf if floor is None else float(floor)
    if np.isinf(c) and floor is None and estimated_nodes(horizon) > node_budget:
        raise MemoryBudgetError("population would exceed the node budget",
                                required_nodes=estimated_nodes(horizon), budget=node_budget)
    if slab is None:
        slab = horizon if np.isinf(c) else DEFAULT_SLAB
    seed = kernel_seed(rng if rng is not None else RngStream(0))
    cap = int(min(node_budget, max(1024, 1.5 * estimated_nodes(horizon) if np.isinf(c) else 2 ** 16)))
    while True:
        out, overflow = _kernels.grow_leaves(float(horizon), drift, sigma, float(x0), orient, c, fl,
                                            cap, seed, float(slab))
        if not overflow:
            return out
        if cap >= node_budget:
            raise MemoryBudgetError("tree exceeded the node budget", budget=node_budget)
        cap = min(node_budget, 2 * cap)


@dataclass(eq=False)
class PopulationSnapshot:
    """Particles alive at the horizon.

    ``centered`` is ``x - m_t`` in the standard frame; in the abbs frame it is
    ``X - (3/2) log t``, the image of the same recentring.
    """

    horizon: float
    nodes: np.ndarray
    position: np.ndarray
    centered: np.ndarray
    gamma: np.ndarray
    normalization: str = "standard"
    pruning: PruningRecord = field(default_factory=PruningRecord)
    tree: ParticleTree | None = None
    _addresses: list | None = None

    def __len__(self):
        return self.position.size

    @property
    def addresses(self) -> list:
        if self._addresses is None:
            self._addresses = [self.tree.address(int(n)) for n in self.nodes]
        return self._addresses

    @property
    def population_size(self):
        return len(self) + self.pruning.discarded_count


def snapshot(tree: ParticleTree) -> PopulationSnapshot:
    alive = tree.alive
    g = _kernels.gamma_values(tree.parent, tree.bit.astype(np.float64), tree.birth)
    x = tree.position[alive]
    t = tree.horizon
    if tree.normalization == "standard":
        cen = x - centering(t)
    else:
        cen = x - 1.5 * np.log(t)
    return PopulationSnapshot(t, alive, x, cen, g[alive], tree.normalization, tree.pruning, tree)


def _resolve(tree: ParticleTree, u) -> int:
    node = tree.node_of(u) if isinstance(u, str) else int(u)
    if not (0 <= node < tree.n_nodes) or tree.status[node] != STATUS_ALIVE:
        raise DomainError(f"particle {u!r} is not alive at the horizon")
    return node


def overlap(tree: ParticleTree, u, v) -> float:
    """Branch time of the most recent common ancestor over the horizon.

    ``u`` and ``v`` are address strings or node indices of living particles.
    """
    a, b = _resolve(tree, u), _resolve(tree, v)
    if a == b:
        return 1.0
    d = _kernels.mrca_times(tree.parent, tree.depth, tree.death,
                            np.array([a], np.int64), np.array([b], np.int64))
    return float(d[0] / tree.horizon)


def overlap_nodes(tree: ParticleTree, us, vs) -> np.ndarray:
    """Vectorised :func:`overlap` on node indices (no liveness check)."""
    us = np.ascontiguousarray(us, dtype=np.int64)
    vs = np.ascontiguousarray(vs, dtype=np.int64)
    d = _kernels.mrca_times(tree.parent, tree.depth, tree.death, us, vs)
    return np.where(us == vs, 1.0, d / tree.horizon)


def _with_positions(snap: PopulationSnapshot, pos, cen, frame) -> PopulationSnapshot:
    return PopulationSnapshot(snap.horizon, snap.nodes, pos, cen, snap.gamma, frame,
                              snap.pruning, snap.tree, snap._addresses)


def to_abbs_frame(snap: PopulationSnapshot) -> PopulationSnapshot:
    if snap.normalization != "standard":
        raise DomainError("snapshot is not in the standard frame")
    t = snap.horizon
    y = to_abbs(snap.position, t)
    return _with_positions(snap, y, y - 1.5 * np.log(t), "abbs")


def from_abbs_frame(snap: PopulationSnapshot) -> PopulationSnapshot:
    if snap.normalization != "abbs":
        raise DomainError("snapshot is not in the abbs frame")
    t = snap.horizon
    x = from_abbs(snap.position, t)
    return _with_positions(snap, x, x - centering(t), "standard")


# Binary dump: header <4s I d Q>, then per particle <H> length, packed address
# bits (MSB first, ceil(len/8) bytes), <d> position, <d> gamma.
_MAGIC = b"BBMS"
_VERSION = 1


def dump_snapshot(snap: PopulationSnapshot, path) -> None:
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sIdQ", _MAGIC, _VERSION, float(snap.horizon), len(snap)))
        for addr, x, g in zip(snap.addresses, snap.position, snap.gamma):
            n = len(addr)
            if n > 0xFFFF:
                raise DomainError("address too long for the dump format")
            bits = np.frombuffer(addr.encode(), dtype=np.uint8) - ord("0")
            fh.write(struct.pack("<H", n))
            fh.write(np.packbits(bits).tobytes())
            fh.write(struct.pack("<dd", float(x), float(g)))


def load_snapshot(path):
    """Returns ``(t, addresses, positions, gammas)`` from a binary dump."""
    with open(path, "rb") as fh:
        data = fh.read()
    magic, version, t, count = struct.unpack_from("<4sIdQ", data, 0)
    if magic != _MAGIC:
        raise DomainError("not a BBMS file")
    if version != _VERSION:
        raise DomainError(f"unsupported BBMS version {version}")
    off = struct.calcsize("<4sIdQ")
    addrs, xs, gs = [], np.empty(count), np.empty(count)
    for k in range(count):
        (n,) = struct.unpack_from("<H", data, off)
        off += 2
        nb = (n + 7) // 8
        bits = np.unpackbits(np.frombuffer(data, np.uint8, nb, off))[:n]
        off += nb
        addrs.append("".join("1" if b else "0" for b in bits))
        xs[k], gs[k] = struct.unpack_from("<dd", data, off)
        off += 16
    return t, addrs, xs, gs
