import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from dso2d.nn import LoraAdapter, MlpModel

settings.register_profile("default", deadline=None, max_examples=50,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def small_model():
    return MlpModel.init(latent_dim=4, cond_dim=3, hidden=(8, 6), time_dim=4, seed=3)


@pytest.fixture
def small_adapter(small_model):
    ad = LoraAdapter.init(small_model, rank=2, alpha=4.0, seed=5)
    rng = np.random.default_rng(0)
    for b in ad.B:  # non-zero so the adapter path is exercised
        b.data[...] = rng.normal(size=b.shape) * 0.3
    return ad


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def acceptance_log():
    return ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
