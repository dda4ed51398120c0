"""FKPP solver for the law of the extreme of BBM.

``v(t, x) = P(max_u x_u(t) > x)`` solves ``v_t = v_xx / 2 + v - v^2`` with
``v(0, .) = 1{x < 0}``. The tabulated object is the distribution function of
the minimum in the frame with drift 2 and variance 2,

    G_t(y) = P(min_u X_u(t) <= y) = v(t, sqrt2 t - y / sqrt2).

The comoving frame ``z = x - sqrt2 t`` keeps the front on a fixed grid and maps
to a fixed y-grid through ``y = -sqrt2 z``.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels
from .bbm_core import centering
from .errors import DomainError
from .stochastic_kit import SQRT2

TAIL = 1e-6
_MAGIC = b"FKPP"
_VERSION = 1
_FRAME_CODES = {"abbs": 1}


def default_store_times(t_max: float) -> np.ndarray:
    """Slices every 0.01 up to 10, every 0.1 up to 100, every 1 beyond."""
    parts = [np.arange(0, min(t_max, 10.0) + 1e-9, 0.01)]
    if t_max > 10:
        parts.append(np.arange(10.1, min(t_max, 100.0) + 1e-9, 0.1))
    if t_max > 100:
        parts.append(np.arange(101.0, t_max + 1e-9, 1.0))
    t = np.concatenate(parts)
    if t[-1] < t_max - 1e-9:
        t = np.append(t, t_max)
    return t


@dataclass(eq=False)
class FkppTable:
    """G[i, j] = G_{t_i}(y_j) on a regular increasing ``y_grid``."""

    t_grid: np.ndarray
    y_grid: np.ndarray
    values: np.ndarray
    frame: str = "abbs"
    params: dict = field(default_factory=dict)

    @property
    def t_max(self):
        return float(self.t_grid[-1])

    def __call__(self, t, y):
        return query(self, t, y)


def _stability_bound(dx):
    # explicit centred scheme for v_t = v_xx/2 ...: dt <= dx^2 / (2 * 1/2)
    return dx * dx


def solve(t_max: float, dt: float | None = None, x_range=None, dx: float = 0.05,
          frame: str = "comoving", store_times=None) -> FkppTable:
    """Integrate the FKPP equation and tabulate ``G_t`` in the abbs frame.

    ``frame="fixed"`` solves on ``x_range`` (default ``[-30, sqrt2 t_max + 30]``);
    ``frame="comoving"`` solves in ``z = x - sqrt2 t`` on ``x_range`` read as a
    z-range (default ``[-40, 30]``). ``dt`` defaults to ``dx^2 / 4``.
    """
    if not (t_max > 0) or not (dx > 0):
        raise DomainError("t_max and dx must be positive")
    if dt is None:
        dt = dx * dx / 4.0
    bound = _stability_bound(dx)
    if not (0 < dt <= bound):
        raise DomainError(f"unstable time step {dt:g}: the explicit scheme needs dt <= dx^2 = {bound:g}")
    if frame == "comoving":
        lo, hi = x_range if x_range is not None else (-40.0, 30.0)
        speed = SQRT2
    elif frame == "fixed":
        lo, hi = x_range if x_range is not None else (-30.0, SQRT2 * t_max + 30.0)
        speed = 0.0
    else:
        raise DomainError(f"unknown frame {frame!r}")
    if speed * dx > 1.0:
        raise DomainError("grid too coarse for the advection term (need sqrt2 dx <= 1)")
    nx = int(round((hi - lo) / dx)) + 1
    grid = lo + dx * np.arange(nx)
    v = np.where(grid < 0, 1.0, 0.0)
    v[np.abs(grid) < 0.5 * dx] = 0.5
    ts = default_store_times(t_max) if store_times is None else np.asarray(store_times, float)
    steps = np.rint(ts / dt).astype(np.int64)
    n_steps = int(np.ceil(t_max / dt - 1e-9))
    steps = np.minimum(steps, n_steps)
    out = np.empty((steps.size, nx))
    _kernels.fkpp_march(v, n_steps, dt, dx, speed, steps, out, 1.0, 0.0)
    t_grid = steps * dt
    t_grid[-1] = min(t_grid[-1], t_max) if steps[-1] == n_steps else t_grid[-1]

    # common abbs y-grid with the solver's spacing in y
    dy = SQRT2 * dx
    if frame == "comoving":
        y_grid = (-SQRT2 * grid)[::-1]
        vals = out[:, ::-1]
    else:
        y_lo, y_hi = -SQRT2 * 30.0, SQRT2 * 40.0
        y_grid = np.arange(y_lo, y_hi + 0.5 * dy, dy)
        vals = np.empty((t_grid.size, y_grid.size))
        for i, t in enumerate(t_grid):
            x = SQRT2 * t - y_grid / SQRT2
            # np.interp wants increasing abscissae; x decreases along y
            vals[i] = np.interp(x[::-1], grid, out[i], left=1.0, right=0.0)[::-1]
    vals = np.clip(vals, 0.0, 1.0)
    vals[vals < TAIL] = 0.0
    vals[vals > 1.0 - TAIL] = 1.0
    params = {"t_max": float(t_max), "dt": float(dt), "dx": float(dx), "x_range": [float(lo), float(hi)],
              "frame": frame, "scheme": "explicit-centred", "tail": TAIL,
              "small_t": "bilinear between stored slices; t=0 slice is the exact step"}
    return FkppTable(t_grid, y_grid, vals, "abbs", params)


def query(table: FkppTable, t, y):
    """Bilinear interpolation of ``G_t(y)``; 0 below and 1 above the y-grid.

    ``t`` below the first slice uses that slice; ``t`` beyond ``t_max`` is an error.
    """
    t = np.asarray(t, dtype=float)
    y = np.asarray(y, dtype=float)
    if np.any(t > table.t_max + 1e-9):
        raise DomainError(f"t beyond tabulated range {table.t_max}")
    tg, yg, G = table.t_grid, table.y_grid, table.values
    tc = np.clip(t, tg[0], tg[-1])
    i = np.clip(np.searchsorted(tg, tc, side="right") - 1, 0, tg.size - 2)
    wt = (tc - tg[i]) / (tg[i + 1] - tg[i])
    dy = yg[1] - yg[0]
    s = (y - yg[0]) / dy
    j = np.clip(np.floor(s).astype(np.int64), 0, yg.size - 2)
    wy = np.clip(s - j, 0.0, 1.0)
    g0 = G[i, j] * (1 - wy) + G[i, j + 1] * wy
    g1 = G[i + 1, j] * (1 - wy) + G[i + 1, j + 1] * wy
    g = g0 * (1 - wt) + g1 * wt
    g = np.where(y < yg[0], 0.0, np.where(y > yg[-1], 1.0, g))
    return g if g.ndim else float(g)


def front_positions(table: FkppTable, level: float = 0.5):
    """Standard-frame front ``x(t)`` with ``v(t, x) = level`` for every slice.

    Returns ``(t, x_front, x_front - m_t)``; the last entry is ``nan`` at t = 0.
    """
    y_half = np.empty(table.t_grid.size)
    for k, row in enumerate(table.values):
        # G nondecreasing in y: first crossing of ``level``
        j = np.searchsorted(row, level)
        j = int(np.clip(j, 1, row.size - 1))
        g0, g1 = row[j - 1], row[j]
        w = 0.0 if g1 == g0 else (level - g0) / (g1 - g0)
        y_half[k] = table.y_grid[j - 1] + w * (table.y_grid[j] - table.y_grid[j - 1])
    t = table.t_grid
    x_front = SQRT2 * t - y_half / SQRT2
    with np.errstate(divide="ignore", invalid="ignore"):
        rel = np.where(t > 0, x_front - centering(np.where(t > 0, t, 1.0)), np.nan)
    return t, x_front, rel


def cache_key(t_max, dt, dx, x_range, frame) -> str:
    blob = json.dumps({"t_max": float(t_max), "dt": None if dt is None else float(dt), "dx": float(dx),
                       "x_range": None if x_range is None else [float(v) for v in x_range],
                       "frame": frame, "version": _VERSION}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def default_cache_dir() -> Path:
    return Path(os.environ.get("BBMLAB_CACHE", Path.home() / ".cache" / "bbmlab"))


def cached_solve(t_max, dt=None, x_range=None, dx=0.05, frame="comoving", cache_dir=None) -> FkppTable:
    """:func:`solve` with an on-disk cache keyed by the solver parameters."""
    d = Path(cache_dir) if cache_dir is not None else default_cache_dir()
    path = d / f"fkpp_{cache_key(t_max, dt, dx, x_range, frame)}.bin"
    if path.exists():
        return load_table(path)
    table = solve(t_max, dt, x_range, dx, frame)
    d.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".part")
    save_table(table, tmp)
    os.replace(sidecar(tmp), sidecar(path))
    os.replace(tmp, path)
    return table


def save_table(table: FkppTable, path) -> None:
    """Binary table (header, grids, row-major values) plus a JSON sidecar."""
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sIIQQ", _MAGIC, _VERSION, _FRAME_CODES[table.frame],
                             table.t_grid.size, table.y_grid.size))
        fh.write(np.ascontiguousarray(table.t_grid, "<f8").tobytes())
        fh.write(np.ascontiguousarray(table.y_grid, "<f8").tobytes())
        fh.write(np.ascontiguousarray(table.values, "<f8").tobytes())
    sidecar(path).write_text(json.dumps(table.params, indent=1, sort_keys=True))


def sidecar(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def load_table(path) -> FkppTable:
    path = Path(path)
    data = path.read_bytes()
    magic, version, frame, nt, ny = struct.unpack_from("<4sIIQQ", data, 0)
    if magic != _MAGIC or version != _VERSION:
        raise DomainError(f"{path} is not a version-{_VERSION} FKPP table")
    off = struct.calcsize("<4sIIQQ")
    t_grid = np.frombuffer(data, "<f8", nt, off).copy()
    off += 8 * nt
    y_grid = np.frombuffer(data, "<f8", ny, off).copy()
    off += 8 * ny
    values = np.frombuffer(data, "<f8", nt * ny, off).reshape(nt, ny).copy()
    side = sidecar(path)
    params = json.loads(side.read_text()) if side.exists() else {}
    frame_name = {v: k for k, v in _FRAME_CODES.items()}[frame]
    return FkppTable(t_grid, y_grid, values, frame_name, params)
