"""Splittable random streams.

Every stochastic routine in the package draws from a generator obtained via
``stream(seed, *path)``.  The path components (e.g. policy index, replication
id, cell index) key independent child streams, so results are bit-reproducible
no matter how replications are scheduled across workers.
"""

from __future__ import annotations

import numpy as np

SeedLike = "int | tuple | np.random.SeedSequence | np.random.Generator"


def stream(seed, *path: int) -> np.random.Generator:
    """Return a generator for the child stream keyed by (seed, *path)."""
    if isinstance(seed, np.random.Generator):
        if path:
            raise ValueError("cannot extend the path of an existing Generator")
        return seed
    if isinstance(seed, np.random.SeedSequence):
        ss = seed.spawn_key + tuple(int(p) for p in path)
        seq = np.random.SeedSequence(entropy=seed.entropy, spawn_key=ss)
    else:
        if isinstance(seed, tuple):
            entropy, prefix = seed[0], tuple(seed[1:])
        else:
            entropy, prefix = int(seed), ()
        seq = np.random.SeedSequence(
            entropy=entropy, spawn_key=prefix + tuple(int(p) for p in path)
        )
    return np.random.default_rng(seq)


def child_sequence(seed, *path: int) -> np.random.SeedSequence:
    """SeedSequence for (seed, *path); cheap to pickle across worker pools."""
    if isinstance(seed, np.random.SeedSequence):
        return np.random.SeedSequence(
            entropy=seed.entropy,
            spawn_key=seed.spawn_key + tuple(int(p) for p in path),
        )
    return np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(p) for p in path))
