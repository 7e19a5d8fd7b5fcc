import pytest
import torch

from unlearnable.data import make_synthetic

torch.set_num_threads(1)


@pytest.fixture
def tiny():
    return make_synthetic(2, 10, (3, 8, 8), seed=0)


@pytest.fixture
def small():
    return make_synthetic(2, 40, (3, 16, 16), seed=0)


def pytest_terminal_summary(terminalreporter):
    import test_acceptance

    if test_acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(test_acceptance.RESULTS):
            terminalreporter.write_line(test_acceptance.RESULTS[n])
