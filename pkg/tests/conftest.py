import numpy as np
import pytest

from wireless_fm.core_series import TaskTag, TimeSeriesWindow
from wireless_fm.model import ModelConfig, init_params


@pytest.fixture
def tiny_cfg():
    return ModelConfig(patch_len=2, d_model=8, num_layers=2, num_heads=2, horizon=3, max_patches=4)


@pytest.fixture
def tiny_params(tiny_cfg):
    params = init_params(tiny_cfg, np.random.default_rng(7), dtype=np.float64)
    # Non-trivial biases, gains and granularity rows so every path carries signal.
    rng = np.random.default_rng(8)
    for k, v in params.items():
        if k.endswith(("bias", "b1", "b2", "gain")) or k == "granularity.table":
            params[k] = v + 0.3 * rng.standard_normal(v.shape)
    return params


def random_window(rng, m=2, length=8, horizon=3, dt=0.05, tag=TaskTag.CUSTOM):
    values = rng.standard_normal((m, length)).cumsum(axis=1)
    future = rng.standard_normal((m, horizon))
    return TimeSeriesWindow(values, future, dt, tag)


# One line per acceptance criterion, echoed at the end of the run.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
