"""Bit-packing helpers shared across the package.

A codeword is a packed unsigned integer; bit ``l - 1`` (counting from the
least significant bit) holds the binary symbol read out in imaging round
``l``. Text forms put round 1 leftmost, so the string ``"0110..."`` maps to
an integer whose lowest bit is the first character.
"""

from __future__ import annotations

import numpy as np

MAX_LENGTH = 32

# 16-bit popcount lookup, combined pairwise for wider words.
_POPCOUNT16 = np.array([bin(i).count("1") for i in range(1 << 16)], dtype=np.uint8)


def popcount(words) -> np.ndarray:
    """Elementwise popcount of an unsigned integer array (up to 32 bits)."""
    w = np.asarray(words, dtype=np.uint32)
    lo = _POPCOUNT16[w & np.uint32(0xFFFF)]
    hi = _POPCOUNT16[w >> np.uint32(16)]
    return (lo.astype(np.int64) + hi)


def word_to_string(word: int, length: int) -> str:
    """Render a packed codeword with round 1 leftmost."""
    return "".join("1" if (int(word) >> l) & 1 else "0" for l in range(length))


def string_to_word(text: str) -> int:
    """Parse a 0/1 string (round 1 leftmost) into a packed codeword."""
    word = 0
    for l, ch in enumerate(text):
        if ch == "1":
            word |= 1 << l
        elif ch != "0":
            raise ValueError(f"invalid code character {ch!r} in {text!r}")
    return word


def words_to_bits(words, length: int) -> np.ndarray:
    """Unpack packed words into an (n, length) uint8 bit matrix, round 1 first."""
    w = np.asarray(words, dtype=np.uint32)
    shifts = np.arange(length, dtype=np.uint32)
    return ((w[..., None] >> shifts) & np.uint32(1)).astype(np.uint8)


def bits_to_words(bits) -> np.ndarray:
    """Pack an (..., length) bit matrix into unsigned integer words."""
    b = np.asarray(bits, dtype=np.uint64)
    length = b.shape[-1]
    if length > MAX_LENGTH:
        raise ValueError(f"cannot pack {length} bits into a 32-bit word")
    weights = np.uint64(1) << np.arange(length, dtype=np.uint64)
    return (b * weights).sum(axis=-1).astype(np.uint32)


def all_sequences(length: int) -> np.ndarray:
    """Every binary sequence of the given length, ascending as integers."""
    if not 1 <= length <= 24:
        raise ValueError(f"sequence space 2^{length} cannot be enumerated")
    return np.arange(1 << length, dtype=np.uint32)
