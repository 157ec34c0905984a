from __future__ import annotations

import numpy as np
import pytest

from tinydrive.nncore import TrainConfig, model_spec, train
from tinydrive.quant import quantize_model
from tinydrive.simenv import sample_test_comb, standard_dsets


@pytest.fixture(scope="session")
def small_dsets():
    """Dset-2.0/1.5/1.0 at 40 train / 20 test per class."""
    return standard_dsets(40, 20, seed=3)


@pytest.fixture(scope="session")
def small_comb(small_dsets):
    return sample_test_comb([small_dsets[a][1] for a in (2.0, 1.5, 1.0)], 210, 84, seed=3)


@pytest.fixture(scope="session")
def vnn2_small(small_dsets):
    """A briefly trained VNN2 and its quantized twin."""
    model, _ = train(model_spec("vnn2"), small_dsets[2.0][0], None, TrainConfig(epochs=15, seed=1))
    return model, quantize_model(model, small_dsets[2.0][0])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_configure(config):
    config._tinydrive_acceptance = []


@pytest.fixture
def acceptance(request):
    """Record one PASS/FAIL line per criterion; the lines are repeated in the terminal summary."""
    def record(n: int, ok: bool, detail: str) -> bool:
        line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        request.config._tinydrive_acceptance.append(line)
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_tinydrive_acceptance", [])
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(lines, key=lambda l: int(l.split(":")[0].split()[1])):
            terminalreporter.write_line(line)
