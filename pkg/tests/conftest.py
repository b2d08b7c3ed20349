import numpy as np
import pytest

from deqlab import gmm


@pytest.fixture(scope="session")
def small_gmm():
    """n = 8 draw from the two-class spiked mixture at p = 1000."""
    model = gmm.default_model(1000, 2, n=8)
    smp = gmm.sample_gmm(model, 0)
    return model, smp, gmm.compute_stats(model, smp)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# criterion number -> (passed, detail); filled by test_acceptance, printed at the end
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
