"""Seeded random number streams.

All stochastic behaviour in this package (phantom synthesis, parameter
initialization, mask sampling) is driven by the counter-based Philox4x64
generator so that a run is fully determined by ``(seed, stream indices)``.
Substreams are opened by loading the stream indices into the Philox counter
instead of re-seeding, which keeps independent streams cheap and collision
free.
"""

from __future__ import annotations

import numpy as np

__all__ = ["stream", "shuffled"]


def stream(seed: int, *indices: int) -> np.random.Generator:
    """Return the Philox substream for ``(seed, *indices)``.

    ``indices`` (up to three) are placed in the 4x64-bit Philox counter;
    the key is the seed itself. Identical arguments always reproduce the
    identical sequence.
    """
    if len(indices) > 3:
        raise ValueError("at most 3 stream indices are supported")
    counter = [0, 0, 0, 0]
    for slot, idx in enumerate(indices):
        counter[slot] = int(idx) & 0xFFFFFFFFFFFFFFFF
    bits = np.random.Philox(key=int(seed) & 0xFFFFFFFFFFFFFFFF, counter=counter)
    return np.random.Generator(bits)


def shuffled(n: int, rng: np.random.Generator) -> np.ndarray:
    """Fisher-Yates shuffle of ``range(n)``.

    Spelled out rather than delegated to ``Generator.permutation`` so the
    exact draw sequence is pinned down: for i = n-1 .. 1 draw one uint64 u
    from ``rng`` and swap positions i and u % (i+1).
    """
    order = np.arange(n, dtype=np.int64)
    for i in range(n - 1, 0, -1):
        u = int(rng.integers(0, 2**64, dtype=np.uint64))
        j = u % (i + 1)
        order[i], order[j] = order[j], order[i]
    return order
