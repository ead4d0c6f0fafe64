import numpy as np
import pytest
import torch

from skelik.bodymodel import build_toy_model, identity_layout, planted_regressor
from skelik.training import compute_mean_pose, generate_synthetic_dataset

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def model():
    return build_toy_model(0)


@pytest.fixture(scope="session")
def layout(model):
    return identity_layout(model.skeleton)


@pytest.fixture(scope="session")
def regressor(model, layout):
    return planted_regressor(model, layout)


@pytest.fixture(scope="session")
def small_ds(model, regressor):
    return generate_synthetic_dataset(model, regressor, 1000, 0)


@pytest.fixture(scope="session")
def mean_pose(model, small_ds):
    return compute_mean_pose(model.skeleton, small_ds.rotations[small_ds.indices("train")])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance verdicts, printed once at the end of the run
_VERDICTS = {}


@pytest.fixture
def record():
    def rec(n, ok, detail):
        _VERDICTS[n] = (ok, detail)
    return rec


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_VERDICTS):
        ok, detail = _VERDICTS[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
