import pytest

from caddiff import synthetic
from caddiff.config import ScheduleConfig
from caddiff.kernels import EmpiricalPrior, make_schedule


@pytest.fixture(scope="session")
def toy_prior():
    return EmpiricalPrior((0, 1), (0.7, 0.3))


@pytest.fixture(scope="session")
def small_schedule(toy_prior):
    """T=8 schedule over a 4-value space: cheap, exhaustive-test friendly."""
    return make_schedule(
        ScheduleConfig(steps=8), prior=toy_prior, n_value_states=4, n_command_states=3
    )


@pytest.fixture(scope="session")
def full_schedule():
    """Production-size schedule: T=100 over 256 values + absorbing."""
    prior = EmpiricalPrior((0, 1, 2), (0.5, 0.3, 0.2))
    return make_schedule(ScheduleConfig(steps=100), prior=prior)


@pytest.fixture(scope="session")
def toy_corpus():
    return synthetic.random_corpus(seed=7, n=16, min_commands=4, max_commands=8)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
