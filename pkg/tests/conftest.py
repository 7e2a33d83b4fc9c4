import numpy as np
import pytest

from bnnx import tensors


@pytest.fixture(params=sorted(tensors.available_backends()))
def backend(request, monkeypatch):
    """Run a test once per importable kernel backend."""
    monkeypatch.setattr(tensors, "_kernels", tensors.available_backends()[request.param])
    return request.param


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pm1(rng, shape):
    return rng.choice([-1.0, 1.0], size=shape)


def pytest_terminal_summary(terminalreporter):
    from . import test_acceptance

    if test_acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(test_acceptance.RESULTS):
            terminalreporter.write_line(test_acceptance.RESULTS[n])
