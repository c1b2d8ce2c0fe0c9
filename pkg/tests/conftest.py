"""Shared, session-scoped artifacts.

The full-size datasets and trained models take minutes to build, so each is
built once per session and reused by the unit and acceptance tests.
"""

import time

import numpy as np
import pytest

from kinoforge.controller import TrainConfig, train
from kinoforge.dataset import DataGenConfig, generate_ctrl_data
from kinoforge.dynamics import SystemSpec

FO = SystemSpec.first_order()
SO = SystemSpec.second_order()

# enough held-out keys for the 500-query closed-loop audit
FO_VAL_SPLIT = 0.2


class Timed:
    def __init__(self, value, seconds):
        self.value = value
        self.seconds = seconds


def _timed(fn, *a, **kw):
    t = time.perf_counter()
    out = fn(*a, **kw)
    return Timed(out, time.perf_counter() - t)


@pytest.fixture(scope="session")
def fo_data_timed():
    return _timed(generate_ctrl_data, FO, FO.default_epsilons(), DataGenConfig(seed=0))


@pytest.fixture(scope="session")
def fo_data(fo_data_timed):
    return fo_data_timed.value


@pytest.fixture(scope="session")
def so_data_timed():
    return _timed(generate_ctrl_data, SO, SO.default_epsilons(), DataGenConfig(seed=0))


@pytest.fixture(scope="session")
def so_data(so_data_timed):
    return so_data_timed.value


@pytest.fixture(scope="session")
def fo_train(fo_data):
    return _timed(train, fo_data, "fo", TrainConfig.for_spec(FO, val_split=FO_VAL_SPLIT, seed=0))


@pytest.fixture(scope="session")
def so_train(so_data):
    return _timed(train, so_data, "so", TrainConfig.for_spec(SO, seed=0))


@pytest.fixture(scope="session")
def fo_model(fo_train):
    return fo_train.value.model


@pytest.fixture(scope="session")
def so_model(so_train):
    return so_train.value.model


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one PASS/FAIL line per acceptance criterion, shown at the end of the run
ACCEPTANCE: dict = {}


def record_criterion(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE[n] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])


HEAVY = {"fo_data", "so_data", "fo_train", "so_train", "fo_model", "so_model", "fo_data_timed", "so_data_timed"}


def pytest_collection_modifyitems(items):
    # anything touching the full-size artifacts is slow, whatever file it lives in
    for item in items:
        if HEAVY & set(getattr(item, "fixturenames", ())):
            item.add_marker(pytest.mark.slow)
