import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "repo", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("repo")

# filled by tests/test_acceptance.py, reported at the end of the session
ACCEPTANCE: dict = {}


@pytest.fixture
def rng(request):
    # a fixed stream per test so failures reproduce
    seed = sum(map(ord, request.node.name)) % 2**31
    return np.random.default_rng(seed)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: (int(k.rstrip("ab")), k)):
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"criterion {key:>3}: {'PASS' if ok else 'FAIL'}  {detail}")
