from __future__ import annotations

import numpy as np
import pytest

from branchcva.diffusion import ItoProcessSpec


@pytest.fixture
def gbm():
    return ItoProcessSpec.gbm(0.2)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    from tests import acceptance_log

    if acceptance_log.LINES:
        terminalreporter.section("acceptance criteria")
        for line in acceptance_log.LINES:
            terminalreporter.write_line(line)
