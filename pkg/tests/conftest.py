import pytest

from ckdynamics.core import GaussianSpec

# lines recorded by test_acceptance, echoed at the end of the run
ACCEPTANCE = {}


@pytest.fixture
def packet():
    """Moving packet used for the free and linear scenarios."""
    return GaussianSpec(sigma0=1.0, x0=-10.0, p0=5.0)


@pytest.fixture
def packet_at_rest():
    """Packet released at rest for the oscillator scenarios."""
    return GaussianSpec(sigma0=1.0, x0=1.0, p0=0.0)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: int(k.split("-")[1])):
        terminalreporter.write_line(ACCEPTANCE[key])
