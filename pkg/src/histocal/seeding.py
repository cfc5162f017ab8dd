"""Deterministic RNG streams derived from one root seed.

Every random draw in the package flows from a root seed through
``substream(root, *tags)``.  The tags name the consumer (e.g. ``"init"``,
``("batch", epoch, slide_id)``) and are hashed with crc32, so adding a new
stream never perturbs existing ones and runs are bit-reproducible.
"""

from __future__ import annotations

import zlib

import numpy as np


def stream_key(root_seed: int, *tags) -> list[int]:
    """Entropy list for ``np.random.SeedSequence``: root seed plus hashed tags."""
    entropy = [int(root_seed) & 0xFFFFFFFFFFFFFFFF]
    for tag in tags:
        entropy.append(zlib.crc32(str(tag).encode("utf-8")))
    return entropy


def substream(root_seed: int, *tags) -> np.random.Generator:
    """Child generator uniquely keyed by (root_seed, tags)."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(stream_key(root_seed, *tags))))
