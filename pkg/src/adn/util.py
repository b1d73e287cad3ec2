"""Seeding helpers.

Every stochastic component draws from an explicitly named stream so that runs
are reproducible and independent choices (shuffling, dropout, masking
experiments, ...) do not perturb each other's sequences.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _tag_entropy(tag) -> int:
    digest = hashlib.sha256(repr(tag).encode()).digest()
    return int.from_bytes(digest[:8], "little")


def seeded_rng(seed: int, *tags) -> np.random.Generator:
    """A generator for the stream named by ``tags``, derived from ``seed``.

    Streams with different tags are statistically independent; the same
    (seed, tags) pair always yields the same sequence.
    """
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [_tag_entropy(t) for t in tags]
    return np.random.default_rng(np.random.SeedSequence(entropy))


def derive_seed(seed: int, *tags) -> int:
    """A deterministic per-point seed, e.g. for one knob value of a sweep."""
    h = hashlib.sha256(repr((int(seed),) + tags).encode()).digest()
    return int.from_bytes(h[:8], "little") >> 1
