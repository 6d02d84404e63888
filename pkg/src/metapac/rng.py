"""Counter-based random streams.

Every stream is keyed by a global seed plus a tuple of integer keys (stream
id, epoch, chunk index, ...). Two streams with different keys are independent
and the draws of one never depend on how many draws another made, so trial
loops can be reordered or split without changing results.
"""

from __future__ import annotations

import numpy as np


def rng_stream(seed: int, *keys: int) -> np.random.Generator:
    """Return a Philox generator for ``(seed, *keys)``."""
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF, *(int(k) & 0xFFFFFFFFFFFFFFFF for k in keys)]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))
