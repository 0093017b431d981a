"""Seeded random streams.

Every stochastic routine in the package takes an explicit integer seed and
derives its generator here. Streams are Philox (counter-based) generators
keyed by ``(seed, *stream_ids)`` so that independent sub-streams, e.g. one per
Monte Carlo chunk or per network layer, never overlap and can be produced in
any order.
"""

from __future__ import annotations

import numpy as np


def stream(seed: int, *stream_ids: int) -> np.random.Generator:
    """Return the generator for ``seed`` and an optional sub-stream path."""
    if seed < 0 or any(s < 0 for s in stream_ids):
        raise ValueError("seeds and stream ids must be non-negative")
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(s) for s in stream_ids))
    return np.random.Generator(np.random.Philox(ss))


def rademacher(rng: np.random.Generator, shape) -> np.ndarray:
    """Uniform {-1, +1} float64 entries."""
    return rng.integers(0, 2, size=shape, dtype=np.int8).astype(np.float64) * 2.0 - 1.0


def unit_sphere(rng: np.random.Generator, shape) -> np.ndarray:
    """Uniform draws on the unit sphere along the last axis.

    Normalizes Gaussian vectors; an all-zero draw is resampled.
    """
    shape = tuple(np.atleast_1d(shape))
    g = rng.standard_normal(shape)
    norms = np.linalg.norm(g, axis=-1, keepdims=True)
    while np.any(norms == 0.0):  # probability zero, but keep the contract
        bad = norms[..., 0] == 0.0
        g[bad] = rng.standard_normal((int(bad.sum()), shape[-1]))
        norms = np.linalg.norm(g, axis=-1, keepdims=True)
    return g / norms


def derive_seed(seed: int, *stream_ids: int) -> int:
    """A 63-bit integer seed for sub-task ``stream_ids`` of ``seed``.

    Lets routines that only accept an integer seed run as independent cells
    of a larger sweep.
    """
    if seed < 0 or any(s < 0 for s in stream_ids):
        raise ValueError("seeds and stream ids must be non-negative")
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(s) for s in stream_ids))
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))
