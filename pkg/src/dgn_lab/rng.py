"""Seeded random streams for reproducible experiments.

Every stochastic operation draws from ``numpy.random.Generator`` (PCG64) built
from a ``SeedSequence`` whose entropy is ``[seed, *keys]``. A stream is fully
determined by the experiment seed plus the integer keys that name it (stream
tag, sample index, trial index), so parallel evaluation reproduces serial
results and another implementation of PCG64/SeedSequence can regenerate the
same noise masks.
"""
from __future__ import annotations

import numpy as np

# Stream tags keep unrelated consumers of the same seed independent.
STREAM_INIT = 0
STREAM_SHUFFLE = 1
STREAM_NOISE = 2
STREAM_ATTACK = 3
STREAM_SDE = 4
STREAM_SYNTH = 5


def derive_rng(seed: int, *keys: int) -> np.random.Generator:
    """Return the generator for ``(seed, *keys)``."""
    if seed < 0:
        raise ValueError("seed must be zero or greater")
    entropy = [int(seed)] + [int(key) for key in keys]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))
