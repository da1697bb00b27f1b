import math

import numpy as np
import pytest

from fluorsim.config import load_preset
from fluorsim.experiments import ExperimentConfig
from fluorsim.physics import EnsembleConfig, ResonatorParams, hz

KAPPA = hz(0.68e6)


@pytest.fixture(scope="session")
def res():
    return ResonatorParams(hz(6.946e9), KAPPA * 3.5 / 4.5, KAPPA / 4.5)


@pytest.fixture(scope="session")
def fig2():
    return load_preset("paper_fig2")


@pytest.fixture(scope="session")
def small_cfg(res):
    """Coarse coupling grid and a short record: fast protocol-level checks."""
    ens = EnsembleConfig(rho_spin=13.3e-3, g0_mean=hz(290.0), g0_sigma=hz(25.0), n_g_bins=3,
                         T1_nonradiative=4.3, T2=2.7e-3)
    return ExperimentConfig(res, ens, repetitions=50, seed=3)


def rel(a, b):
    return abs(a - b) / abs(b)


def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL line per acceptance criterion."""
    import sys

    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(results):
        terminalreporter.write_line(results[k])
