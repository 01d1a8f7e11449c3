"""Named, seedable, counter-based random streams.

Every stochastic consumer in the workbench (data generation, weight init,
samplers, renoising) draws from its own named stream so that adding or
reordering draws in one place never perturbs another. Streams are backed by
numpy's Philox counter-based generator; the 128-bit key is derived from
(seed, name, *indices), which makes streams splittable: appending an index
yields an independent sub-stream.

Identical (seed, name, indices) => identical draws, on any platform.
"""

from __future__ import annotations

import hashlib

import numpy as np

__all__ = ["stream", "stream_key"]


def stream_key(seed: int, name: str, *indices: int) -> int:
    """128-bit Philox key derived from a seed, a stream name and split indices."""
    tag = f"{int(seed)}/{name}/" + "/".join(str(int(i)) for i in indices)
    digest = hashlib.blake2b(tag.encode("utf-8"), digest_size=16).digest()
    return int.from_bytes(digest, "little")


def stream(seed: int, name: str, *indices: int) -> np.random.Generator:
    """Independent generator for the given (seed, name, indices) triple."""
    return np.random.Generator(np.random.Philox(key=stream_key(seed, name, *indices)))
