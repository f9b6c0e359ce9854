import numpy as np
import pytest

from scanreid.attention import ProjectedClip


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_clip(rng, T=4, D=3):
    return ProjectedClip(*(rng.standard_normal((T, D)) for _ in range(3)))


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import VERDICTS
    except ImportError:
        return
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(VERDICTS):
            terminalreporter.write_line(VERDICTS[n])
