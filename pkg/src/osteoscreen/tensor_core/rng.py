"""Seeded random streams.

All randomness goes through :func:`make_rng`, which builds a numpy
``Generator`` over the Philox-4x64 counter-based bit generator keyed by a
``SeedSequence``. Child streams are derived by appending integers to the
key, so ``make_rng(seed, fold, epoch)`` is independent of ``make_rng(seed, fold)``
and reproducible regardless of the order streams are created in.
"""

from __future__ import annotations

import numpy as np


def make_rng(*key: int) -> np.random.Generator:
    if not key:
        raise ValueError("make_rng needs at least one integer key")
    entropy = [int(k) & 0xFFFFFFFFFFFFFFFF for k in key]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))
