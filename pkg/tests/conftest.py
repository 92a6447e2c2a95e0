import pytest

from kpplab.wave_profile import solve_wave

# acceptance results, printed in the terminal summary
ACCEPTANCE: dict = {}


@pytest.fixture(scope="session")
def profile():
    return solve_wave(half_width=25.0, n=2000, tol=1e-8)


@pytest.fixture(scope="session")
def unit_profile():
    return solve_wave(half_width=25.0, n=2000, tol=1e-8, normalization="unit")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
