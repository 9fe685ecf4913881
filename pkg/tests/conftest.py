import numpy as np
import pytest

import mfishcode as m


@pytest.fixture(scope="session")
def mhd4():
    return m.generate_mhd4()


@pytest.fixture(scope="session")
def full_assignment(mhd4):
    """Identity assignment of all 140 codes, ids in canonical word order."""
    return m.AssignmentMap(mhd4, np.arange(mhd4.size, dtype=np.int32))


@pytest.fixture(scope="session")
def paper_bac():
    """Constant per-round crossover rates at the measured real-data means."""
    return m.BacParams(p01=np.full(16, 0.046), p10=np.full(16, 0.102))


@pytest.fixture(scope="session")
def varied_bac():
    """Round-to-round variation around the measured means."""
    rng = np.random.default_rng(7)
    return m.BacParams(
        p01=rng.uniform(0.03, 0.06, size=16),
        p10=rng.uniform(0.08, 0.13, size=16),
    )


@pytest.fixture(scope="session")
def mhd4_table(mhd4, paper_bac):
    return m.likelihood_table(mhd4, paper_bac)


@pytest.fixture(scope="session")
def toy3():
    """L=3 two-code setup small enough for by-hand enumeration."""
    book = m.Codebook(length=3, words=np.array([0b000, 0b111], dtype=np.uint32), min_distance=3)
    assignment = m.AssignmentMap(book, np.array([0, 1], dtype=np.int32))
    bac = m.BacParams(p01=np.full(3, 0.1), p10=np.full(3, 0.1))
    return book, assignment, bac
