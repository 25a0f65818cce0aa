"""
Labeled seed derivation.

All randomness flows from one root seed. A stream is identified by the root
seed plus a tuple of labels (strings or integers); the same labels always give
the same stream, independent of call order or thread scheduling.
"""
import zlib
from typing import Union

import numpy as np

Label = Union[str, int]


def _label_key(label: Label) -> int:
    if isinstance(label, (int, np.integer)):
        if label < 0:
            raise ValueError("integer seed labels must be non-negative")
        return int(label)
    return zlib.crc32(str(label).encode("utf-8"))


def seed_sequence(root: int, *labels: Label) -> np.random.SeedSequence:
    """Seed sequence for the stream named by ``labels`` under ``root``."""
    return np.random.SeedSequence(entropy=int(root), spawn_key=tuple(_label_key(label) for label in labels))


def derive_seed(root: int, *labels: Label) -> int:
    """Derive a child integer seed (63 bits) for a labeled sub-task."""
    state = seed_sequence(root, *labels).generate_state(2, dtype=np.uint32)
    return (int(state[0]) << 31) ^ int(state[1])


def make_rng(root: int, *labels: Label) -> np.random.Generator:
    """Explicitly seeded generator for the labeled stream."""
    return np.random.Generator(np.random.PCG64(seed_sequence(root, *labels)))
