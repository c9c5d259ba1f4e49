import numpy as np
import pytest

from tcec.denoiser import DenoiserSpec
from tcec.schedule import make_linear_beta, make_step_plan


@pytest.fixture(scope="session")
def sched():
    return make_linear_beta(1000, 1e-4, 0.02)


@pytest.fixture(scope="session")
def plan(sched):
    return make_step_plan(sched, 50)


@pytest.fixture(scope="session")
def spec():
    return DenoiserSpec()


@pytest.fixture(scope="session")
def mlp():
    return DenoiserSpec(kind="seeded_mlp", shape=(2, 4, 4))


def x_start(spec, seed):
    return np.random.default_rng([seed, 0]).standard_normal(spec.shape)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
