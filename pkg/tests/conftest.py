import logging
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from mgaa.harness import ToyModelConfig, collect_calibration, init_toy_model  # noqa: E402

logging.getLogger("mgaa").setLevel(logging.ERROR)

SMALL = ToyModelConfig(vocab=40, hidden=16, heads=2, ffn=40, layers=2, seed=3)


def make_calib(vocab, count, length, seed):
    rng = np.random.default_rng(seed)
    return [rng.integers(0, vocab, size=length) for _ in range(count)]


@pytest.fixture(scope="session")
def small_model():
    return init_toy_model(SMALL)


@pytest.fixture(scope="session")
def small_calib():
    return make_calib(SMALL.vocab, 4, 24, 11)


@pytest.fixture(scope="session")
def small_stats(small_model, small_calib):
    return collect_calibration(small_model, small_calib)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
