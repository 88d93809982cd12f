import random

import pytest

from trajpsi import paillier
from trajpsi.paillier import _keypair_from_primes


class FixedRng:
    """Entropy stub that always returns the same draw (clamped into range)."""

    def __init__(self, value):
        self.value = value

    def randrange(self, start, stop):
        assert start <= self.value < stop
        return self.value


@pytest.fixture(scope="session")
def keys256():
    return paillier.keygen(256, random.Random(256))


@pytest.fixture(scope="session")
def keys512():
    return paillier.keygen(512, random.Random(512))


@pytest.fixture(scope="session")
def toy_keys():
    return _keypair_from_primes(5, 7)


@pytest.fixture
def rng():
    return random.Random(1234)


# one line per acceptance criterion, repeated in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
