import numpy as np
from hypothesis import given, settings, strategies as st

from clusterwalk import rng


@given(st.integers(0, 2 ** 64 - 1), st.integers(0, 200), st.integers(1, 50))
@settings(max_examples=60, deadline=None)
def test_words_do_not_depend_on_chunking(seed, offset, count):
    full = rng.raw_words(seed, rng.BONDS, offset + count)
    assert np.array_equal(rng.raw_words(seed, rng.BONDS, count, offset), full[offset:])


def test_purposes_give_distinct_streams():
    a = rng.raw_words(5, rng.BONDS, 16)
    b = rng.raw_words(5, rng.WALK, 16)
    assert not np.array_equal(a, b)


def test_unit_ranges():
    w = np.array([0, 2 ** 64 - 1, 2 ** 63], dtype=np.uint64)
    u = rng.to_unit(w)
    assert u[0] == 0.0 and u[1] < 1.0 and u[2] == 0.5
    v = rng.to_open_unit(w)
    assert np.all((v > 0) & (v < 1))


def test_uniformity_smoke():
    u = rng.to_unit(rng.raw_words(1, rng.BONDS, 100_000))
    counts = np.histogram(u, bins=10, range=(0, 1))[0]
    # chi-square with 9 dof; 0.1% critical value is 27.9
    chi2 = np.sum((counts - 10_000) ** 2 / 10_000)
    assert chi2 < 27.9
