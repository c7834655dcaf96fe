"""
Random stream module for the Slow SDE Laboratory.
Addresses counter-based Philox generators by (seed, family, tag, address...)
so that every draw is reproducible regardless of execution order.
"""

import numpy as np

from config import Config

# Stream tags
TAGS = {
    "sgd": 0,
    "sde": 1,
    "epoch": 2,
    "init": 3,
    "data": 4,
    "bootstrap": 5,
    "with": 6,
}


class NoiseStreams:
    """Family of independent generators derived from one 64-bit master seed."""

    def __init__(self, seed, family=0):
        """Initialize the stream family with a master seed and a family index."""
        self.seed = int(seed) % 2**64
        self.family = int(family)

    def generator(self, tag, *address):
        """Return the generator of the stream at (tag, *address)."""
        key = (self.family, TAGS[tag]) + tuple(int(a) for a in address)
        sequence = np.random.SeedSequence(entropy=self.seed, spawn_key=key)
        return np.random.Generator(np.random.Philox(sequence))

    def derive(self, family):
        """Return an independent family sharing the master seed."""
        return NoiseStreams(self.seed, family=family)

    def __repr__(self):
        return f"NoiseStreams(seed={self.seed}, family={self.family})"


def bounded_normal(rng, size, bound=None):
    """Standard normal draws clipped at ±bound per coordinate."""
    bound = Config.NOISE_TRUNCATION if bound is None else bound
    return np.clip(rng.standard_normal(size), -bound, bound)
