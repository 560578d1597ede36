import numpy as np
import pytest

from taskmerge.model import ModelSpec, init_params

# criterion lines collected by test_acceptance and printed after the run
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_model():
    spec = ModelSpec(input_dim=5, hidden_dims=(7, 6), num_classes=4)
    return spec, init_params(spec, np.random.default_rng(0))


@pytest.fixture(scope="session")
def desk():
    """Seed-0 synthetic suite with a pretrained base model (the acceptance setup)."""
    from taskmerge.data import DatasetSpec, gen_synthetic_tasks
    from taskmerge.trainer import TrainConfig, pretrain

    suite = gen_synthetic_tasks(DatasetSpec(seed=0))
    spec = ModelSpec(input_dim=16, hidden_dims=(32, 32), num_classes=suite.num_classes, frozen_head=True)
    theta_pre = pretrain(spec, suite.pretrain_x, suite.pretrain_targets,
                         TrainConfig(learning_rate=3e-3, steps=1000, seed=0))
    specs = [spec.restricted(t.class_window) for t in suite.tasks]
    return {"suite": suite, "spec": spec, "specs": specs, "theta_pre": theta_pre}
