import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def fashion_dir():
    from asofed.data import find_fashion_mnist
    if find_fashion_mnist() is None:
        pytest.skip("Fashion-MNIST IDX files not found (set ASOFED_DATA_DIR)")
    return os.environ["ASOFED_DATA_DIR"]


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES = []


@pytest.fixture
def acceptance(capsys):
    def report(tag, passed, detail, info=False):
        status = "INFO" if info else ("PASS" if passed else "FAIL")
        line = f"{tag} {status}: {detail}"
        ACCEPTANCE_LINES.append(line)
        with capsys.disabled():
            print("\n" + line, flush=True)
        return passed
    return report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
