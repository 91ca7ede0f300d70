import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from shapeicp.asm import build_asm
from shapeicp.app.synth import synthetic_corpus

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def corpus():
    return synthetic_corpus(12, seed=0)


@pytest.fixture(scope="session")
def full_asm(corpus):
    return build_asm(corpus, len(corpus) - 1, "synthetic")


@pytest.fixture(scope="session")
def asm5(full_asm):
    return full_asm.truncate(5)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_ACCEPTANCE = []


@pytest.fixture(scope="session")
def acceptance_report():
    """``report(criterion, passed, detail)`` collects one line per acceptance criterion."""

    def report(criterion, passed, detail=""):
        line = f"criterion {criterion}: {'PASS' if passed else 'FAIL'}  {detail}"
        _ACCEPTANCE.append(line)
        print(line)

    return report


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)
