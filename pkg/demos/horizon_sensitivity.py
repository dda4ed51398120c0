"""Sensitivity of backward-path weights and decoration statistics to the path horizon.

    python3 demos/horizon_sensitivity.py [paths] [horizon ...]
"""
import sys

import numpy as np

from bbmlab import fkpp_front as ff, limit_process as lp
from bbmlab.stochastic_kit import BETA_C, RngStream

n = int(sys.argv[1]) if len(sys.argv) > 1 else 2000
horizons = [float(h) for h in sys.argv[2:]] or [100.0, 200.0, 400.0, 800.0]


def weighted_mean_se(v, w):
    m = np.dot(w, v)
    # delta-method standard error of a self-normalised estimate
    return m, np.sqrt(np.sum(w ** 2 * (v - m) ** 2))


print(f"{'horizon':>8} {'ESS':>7} {'E b':>15} {'E R(2bc)':>17} {'P(R < 0.05)':>12}")
for h in horizons:
    table = ff.cached_solve(max(h, 100.0))
    gen = np.random.default_rng(5)
    paths = [lp.sample_backward_path(h, 0.01, table, rng=gen) for _ in range(n)]
    w = lp.importance_weights(paths)
    r = np.array([lp.decoration_functional_R(lp.sample_decoration_abbs(p, 20.0, table, rng=RngStream(5, k)),
                                             2 * BETA_C) for k, p in enumerate(paths)])
    b = np.array([p.b for p in paths])
    mb, sb = weighted_mean_se(b, w)
    mr, sr = weighted_mean_se(r, w)
    print(f"{h:8.0f} {1 / np.sum(w ** 2):7.1f} {mb:7.3f} +- {sb:5.3f} {mr:8.4f} +- {sr:6.4f} {np.dot(w, r < 0.05):12.4f}")
