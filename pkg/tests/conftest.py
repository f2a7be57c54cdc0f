import numpy as np
import pytest

from vinevi.numerics import make_rng, sample_wishart


@pytest.fixture
def rng():
    return make_rng(20240611)


def random_spd(rng, d, df_extra=3):
    return sample_wishart(d + df_extra, np.eye(d), rng)


def random_correlation(rng, d):
    s = random_spd(rng, d)
    sd = np.sqrt(np.diag(s))
    return s / np.outer(sd, sd)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
