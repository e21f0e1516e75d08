"""Deterministic seed derivation shared by every randomized component.

Each unit of work draws from a generator keyed by (master seed, index path),
so parallel and serial execution over samples produce identical bytes.
"""

from __future__ import annotations

import numpy as np


def derive_rng(seed: int, *path: int) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(p) for p in path))
    return np.random.Generator(np.random.PCG64(ss))
