import os

import pytest

# Lines registered by the acceptance suite, echoed in the terminal summary.
CRITERIA = []


def record(number, name, passed, measured, target):
    line = f"criterion {number:>3} {'PASS' if passed else 'FAIL'}  {name}: measured {measured}; target {target}"
    CRITERIA.append(line)
    print(line)
    return passed


@pytest.fixture(scope="session", autouse=True)
def _fkpp_cache(tmp_path_factory):
    # keep solver tables out of the user's home cache during tests
    if "BBMLAB_CACHE" not in os.environ:
        os.environ["BBMLAB_CACHE"] = str(tmp_path_factory.mktemp("fkpp_cache"))
    yield


@pytest.fixture(scope="session")
def fkpp100():
    from bbmlab import fkpp_front
    return fkpp_front.cached_solve(100.0)


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in CRITERIA:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def fkpp400():
    from bbmlab import fkpp_front
    return fkpp_front.cached_solve(400.0)


@pytest.fixture(scope="session")
def decoration_bank(fkpp400):
    """10^4 weighted backward paths with their decorations (T_max 20, path horizon 400)."""
    import numpy as np
    from bbmlab import limit_process as lp
    from bbmlab.stochastic_kit import RngStream

    gen = np.random.default_rng(2024)
    paths, decs = [], []
    for k in range(10000):
        p = lp.sample_backward_path(400.0, 0.01, fkpp400, rng=gen)
        paths.append(p)
        decs.append(lp.sample_decoration_abbs(p, 20.0, fkpp400, rng=RngStream(2024, k)))
    return paths, decs, lp.DecorationBank(decs, [p.log_weight for p in paths])
