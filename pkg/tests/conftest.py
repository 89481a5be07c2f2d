import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from cider.data import generate_ba2motif
from cider.gnn import TrainConfig, train_task_model

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def small_ds():
    """40 BA-2motif graphs with an 80/10/10 split."""
    return generate_ba2motif(40, np.random.default_rng(3))


@pytest.fixture(scope="session")
def small_task(small_ds):
    """A briefly trained (not necessarily accurate) frozen task model."""
    return train_task_model(small_ds, TrainConfig(epochs=3, widths=(8, 8), seed=1)).model


def pytest_terminal_summary(terminalreporter):
    from _fixtures import ACCEPTANCE_LINES

    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
