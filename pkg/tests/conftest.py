import numpy as np
import pytest

from grain_ad import data


@pytest.fixture(scope="session")
def tiny_corpus():
    """Small synthetic corpus at reduced resolution for fast end-to-end checks."""
    params = data.CorpusParams(n_train=8, n_test_normal=4, n_test_anomalous=4, size=64)
    return data.generate_synthetic_corpus(params, seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: list[str] = []


def record_acceptance(number: int, passed: bool, detail: str) -> None:
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'} | {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
