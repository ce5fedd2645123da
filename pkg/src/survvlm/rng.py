"""Counter-based random streams.

Every random draw in the package comes from ``stream(seed, name)``: a Philox
generator keyed by the 64-bit seed and a hash of the stream name.  Philox is
counter-based, so a stream is a pure function of ``(seed, name)`` and
independent of how many other streams were consumed before it.
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def stream_key(seed: int, name: str) -> int:
    """128-bit Philox key: seed in the low word, name digest in the high word."""
    digest = hashlib.blake2b(name.encode("utf-8"), digest_size=8).digest()
    return (int(seed) & _MASK64) | (int.from_bytes(digest, "little") << 64)


def stream(seed: int, name: str, index: int = 0) -> np.random.Generator:
    """Generator for stream ``name``, positioned at block ``index``.

    Two calls with the same arguments return generators producing identical
    sequences.  ``index`` lets callers address independent sub-streams
    (one per epoch, one per patient, ...) without any shared state.
    """
    bitgen = np.random.Philox(key=stream_key(seed, name))
    if index:
        # each advance step skips one 4x64-bit block; 2**40 blocks per index
        bitgen = bitgen.advance(int(index) << 40)
    return np.random.Generator(bitgen)


def uniform_at(seed: int, name: str, index: int) -> float:
    """Pure ``generator(seed, stream, index) -> [0, 1)`` draw."""
    return float(stream(seed, name, index).random())
