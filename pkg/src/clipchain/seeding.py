"""Deterministic named random streams.

Every stochastic component draws from its own generator, derived from the
run seed plus a tuple of tags (a purpose label and optional indices, e.g.
``("pns", clip_index)``).  Streams are independent of each other and of the
order in which they are created, which is what makes worker-parallel
generation reproducible: each unit of work owns a stream addressed by its
index, not by scheduling order.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _tag_words(tag: str | int) -> list[int]:
    if isinstance(tag, bool) or not isinstance(tag, (str, int)):
        raise TypeError(f"stream tags must be str or int, got {type(tag).__name__}")
    if isinstance(tag, int):
        if tag < 0:
            raise ValueError(f"integer stream tags must be non-negative, got {tag}")
        return [tag]
    digest = hashlib.sha256(tag.encode("utf-8")).digest()
    return [int.from_bytes(digest[i : i + 4], "big") for i in range(0, 16, 4)]


def stream(seed: int, *tags: str | int) -> np.random.Generator:
    """Return the PCG64 generator addressed by ``(seed, *tags)``."""
    entropy: list[int] = [int(seed)]
    for tag in tags:
        entropy.extend(_tag_words(tag))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))
