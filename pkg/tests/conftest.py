import numpy as np
import pytest

from trustfg.scenario import reference_scenario, run


def finite_difference(fn, x, h=1e-6):
    """Central differences of a vector function; columns index ``x``."""
    x = np.asarray(x, dtype=float)
    cols = []
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        cols.append((np.atleast_1d(fn(x + e)) - np.atleast_1d(fn(x - e))) / (2 * h))
    return np.stack(cols, axis=-1)


def assert_jacobian_close(analytic, numeric, rel=1e-5, abs_tol=1e-8):
    analytic = np.asarray(analytic, dtype=float)
    numeric = np.asarray(numeric, dtype=float)
    err = np.abs(analytic - numeric)
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    ok = (err <= abs_tol) | (err <= rel * scale)
    assert ok.all(), f"max error {err.max():.3g}\nanalytic\n{analytic}\nnumeric\n{numeric}"


@pytest.fixture(scope="session")
def reference_cfg():
    return reference_scenario()


@pytest.fixture(scope="session")
def joint_run(reference_cfg):
    return run(reference_cfg)


@pytest.fixture(scope="session")
def trust_off_run(reference_cfg):
    return run(reference_cfg.with_disabled("proximity", "consistency", "transparency"))


@pytest.fixture(scope="session")
def decentralized_run(reference_cfg):
    from dataclasses import replace

    return run(replace(reference_cfg, mode="decentralized"))
