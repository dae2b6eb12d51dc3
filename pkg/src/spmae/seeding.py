"""Seed derivation shared by every random component.

Streams are numpy ``Generator(Philox(key))``: a counter-based generator keyed
by a 64-bit integer. Child keys are derived by hashing the parent key and an
index with :class:`numpy.random.SeedSequence`, so item ``i`` of a dataset can
be produced without touching items ``0..i-1``.
"""
import numpy as np

MASK64 = (1 << 64) - 1


def derive_seed(seed, index):
    """64-bit child key = first word of SeedSequence([seed, index])."""
    ss = np.random.SeedSequence([int(seed) & MASK64, int(index) & MASK64])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def make_rng(seed):
    return np.random.Generator(np.random.Philox(key=int(seed) & MASK64))
