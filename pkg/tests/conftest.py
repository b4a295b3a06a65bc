import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

import synth
from stsad.selection import select_model
from stsad.structural import StructuralSpec

settings.register_profile(
    "default", deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")

SMALL_SUITE = [StructuralSpec.parse(s) for s in (
    "local_level:none:gaussian",
    "local_level:daily:gaussian",
    "local_linear:none:ar1",
)]


@pytest.fixture(scope="session")
def hourly_fit():
    """A model fitted on a seasonal hourly series, plus its continuation."""
    series = synth.daily_sinusoid(11, n=500, amplitude=3.0, noise=0.5, level=20.0)
    train = series.slice(0, 400)
    fitted, report = select_model(train, None, suite=SMALL_SUITE)
    return fitted, report, series.slice(400)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
