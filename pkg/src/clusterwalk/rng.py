"""Counter-based random streams.

Every random decision in the package is a pure function of ``(seed, purpose,
index)``.  The streams come from numpy's Philox generator keyed by
``(seed, purpose)``; the n-th raw 64-bit word of a stream never depends on how
many words are requested or in which chunks they are drawn.
"""
from __future__ import annotations

import numpy as np

# stream purposes, used as the second key word
BONDS = 0x42
WALK = 0x57
START = 0x53
JITTER = 0x4A
BOOTSTRAP = 0x42_53
TESTFN = 0x54

_MASK64 = (1 << 64) - 1
_TWO_M53 = 2.0 ** -53
_TWO_M52 = 2.0 ** -52


def _generator(seed: int, purpose: int) -> np.random.Philox:
    key = np.array([seed & _MASK64, purpose], dtype=np.uint64)
    return np.random.Philox(key=key)


def raw_words(seed: int, purpose: int, count: int, offset: int = 0) -> np.ndarray:
    """Return words ``offset .. offset+count-1`` of the stream as uint64."""
    bg = _generator(seed, purpose)
    if offset:
        # Philox emits 4 words per counter increment
        block, rem = divmod(offset, 4)
        bg.advance(block)
        return bg.random_raw(count + rem)[rem:]
    return bg.random_raw(count)


def to_unit(words: np.ndarray) -> np.ndarray:
    """Map uint64 words to doubles in [0, 1) using the top 53 bits."""
    return (words >> np.uint64(11)).astype(np.float64) * _TWO_M53


def to_open_unit(words: np.ndarray) -> np.ndarray:
    """Map uint64 words to doubles strictly inside (0, 1).

    Uses the top 52 bits so that the largest value, ``1 - 2**-53``, is exact.
    """
    return ((words >> np.uint64(12)).astype(np.float64) + 0.5) * _TWO_M52


def generator(seed: int, purpose: int) -> np.random.Generator:
    """A ``numpy.random.Generator`` on the keyed stream, for bulk draws."""
    return np.random.Generator(_generator(seed, purpose))
