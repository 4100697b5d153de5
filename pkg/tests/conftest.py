import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    'default', deadline=None, max_examples=50,
    suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get('HYPOTHESIS_PROFILE', 'default'))

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def record_acceptance():
    def record(number: int, passed: bool, detail: str) -> None:
        status = 'PASS' if passed else 'FAIL'
        ACCEPTANCE_LINES.append(f'criterion {number}: {status}  {detail}')
        print(ACCEPTANCE_LINES[-1])
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section('acceptance criteria')
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
