"""Shared fixtures and the acceptance summary printer."""

import dataclasses

import numpy as np
import pytest

from auvnode.config import ExcitationConfig, default_config
from auvnode.excitation import build_dataset

# (criterion number, passed, one-line detail), filled by test_acceptance.
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for num, ok, detail in sorted(ACCEPTANCE_LINES):
        status = "PASS" if ok else "FAIL"
        terminalreporter.write_line(f"criterion {num}: {status} - {detail}")


@pytest.fixture(scope="session")
def app_config():
    return default_config()


@pytest.fixture(scope="session")
def truth(app_config):
    return app_config.truth


@pytest.fixture(scope="session")
def tiny_exc():
    # 5 segments so 50-step trajectories stay legal and cheap
    return ExcitationConfig(n_segments=5)


@pytest.fixture(scope="session")
def tiny_dataset(truth, tiny_exc):
    """Two-batch curriculum, 50 and 100 steps at 10 ms."""
    return build_dataset((50, 100), 0.01, truth, 1234, tiny_exc)


@pytest.fixture
def rng():
    return np.random.default_rng(20260817)


def make_train_settings(**overrides):
    """Small, fast training settings for unit tests."""
    cfg = default_config()
    base = dataclasses.replace(cfg.train, epochs=5, patience=5, seeds=2)
    return dataclasses.replace(base, **overrides)
