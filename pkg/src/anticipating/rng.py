"""Counter-based random streams.

Every Monte-Carlo draw in the package goes through :func:`normals`. Sample
``i`` of a stream is a pure function of ``(seed, stream, i, dim)``: samples
are grouped in fixed blocks and each block owns an independent Philox key, so
requesting any sub-range (or splitting the work across processes) reproduces
the same numbers bit for bit.
"""

from __future__ import annotations

import numpy as np

BLOCK = 4096

# stream identifiers, kept distinct so unrelated draws never share numbers
STREAM_NOISE = 0
STREAM_CHAOS = 1
STREAM_CONDITIONAL = 2
STREAM_AUX = 3
STREAM_ORACLE = 4


def _block_generator(seed: int, stream: int, block: int) -> np.random.Generator:
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, int(stream), int(block)])
    return np.random.Generator(np.random.Philox(ss))


def normals(seed: int, count: int, dim: int, start: int = 0, stream: int = STREAM_NOISE) -> np.ndarray:
    """Standard normal draws for samples ``start .. start+count-1``.

    Returns an array of shape ``(count, dim)``.
    """
    if count < 0 or start < 0:
        raise ValueError("count and start must be non-negative")
    out = np.empty((count, dim))
    if count == 0:
        return out
    first, last = start // BLOCK, (start + count - 1) // BLOCK
    pos = 0
    for b in range(first, last + 1):
        block = _block_generator(seed, stream, b).standard_normal((BLOCK, dim))
        lo = max(start, b * BLOCK) - b * BLOCK
        hi = min(start + count, (b + 1) * BLOCK) - b * BLOCK
        out[pos:pos + hi - lo] = block[lo:hi]
        pos += hi - lo
    return out


def generator(seed: int, stream: int = STREAM_AUX) -> np.random.Generator:
    """A plain generator for auxiliary draws (random test matrices etc.)."""
    return _block_generator(seed, stream, 0)
