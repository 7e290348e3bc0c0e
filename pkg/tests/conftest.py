import os
import sys

import numpy as np
import pytest
import torch

sys.path.insert(0, os.path.dirname(__file__))

from pwsynth import data_io  # noqa: E402
from pwsynth.uvgeom import IUVMap, build_synthetic_atlas  # noqa: E402

torch.set_num_threads(1)


def random_iuv(rng, shape, part_count, fg=0.7):
    part = np.where(rng.random(shape) < fg, rng.integers(1, part_count + 1, size=shape), 0)
    return IUVMap(part, rng.random(shape), rng.random(shape))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_atlas():
    # four 8x8 charts in a 2x2 grid
    return build_synthetic_atlas(4, (16, 16))


@pytest.fixture(scope="session")
def fixture_atlas():
    return data_io.fixture_atlas()


@pytest.fixture(scope="session")
def fixture_pair():
    return data_io.make_fixture(0, 0.5)


# one line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, title, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  criterion {n:2d}  {title}: {detail}")
