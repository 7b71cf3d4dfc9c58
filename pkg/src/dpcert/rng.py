"""Seed derivation.

Every random stream in the package comes from one integer seed plus a
tuple of labels. Labels are hashed (SHA-256, first 4 bytes, big endian)
into the ``spawn_key`` of a :class:`numpy.random.SeedSequence`, and the
resulting sequence drives a counter-based Philox generator. The same
``(seed, labels)`` pair therefore always yields the same stream, and
different labels give statistically independent streams.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _label_word(label) -> int:
    digest = hashlib.sha256(str(label).encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "big")


def seed_sequence(seed: int, *labels) -> np.random.SeedSequence:
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    return np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(_label_word(x) for x in labels))


def generator(seed: int, *labels) -> np.random.Generator:
    """Philox generator for the labelled substream of ``seed``."""
    return np.random.Generator(np.random.Philox(seed_sequence(seed, *labels)))


def derive_seed(seed: int, *labels) -> int:
    """A 63-bit integer seed for the labelled substream (for reports and nested calls)."""
    hi, lo = seed_sequence(seed, *labels).generate_state(2, dtype=np.uint32)
    return ((int(hi) << 32) | int(lo)) & ((1 << 63) - 1)
