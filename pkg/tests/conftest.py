import numpy as np
import pytest

from hesplit import ckks

SMALL = ckks.HEParams(4096, (40, 20, 20), 21)


@pytest.fixture(scope="session")
def small_keys():
    """Keys for the fast 4096 set with the rotations a 256-wide row needs."""
    return ckks.keygen(SMALL, rotations=ckks.required_rotations(SMALL, 256), rng=np.random.default_rng(0))


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE

    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
