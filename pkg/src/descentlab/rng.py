"""Deterministic, named random sub-streams.

Every random quantity in the lab (latents, projections, noise, masks,
initial weights, batch order) comes from its own stream derived from
``(seed, stream name, *extra keys)``. Streams never share state, so a
result is a pure function of its seed regardless of call order or of how
many workers run in parallel.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _stream_key(name: str) -> int:
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def substream(seed: int, name: str, *keys: int) -> np.random.Generator:
    """Return a fresh counter-based generator for ``(seed, name, *keys)``.

    Two calls with identical arguments replay the same draws; any change in
    the name or keys yields an independent stream.
    """
    if not name:
        raise ValueError("stream name must be non-empty")
    spawn_key = (_stream_key(name),) + tuple(int(k) & 0xFFFFFFFFFFFFFFFF for k in keys)
    ss = np.random.SeedSequence(entropy=int(seed) & 0xFFFFFFFFFFFFFFFF, spawn_key=spawn_key)
    return np.random.Generator(np.random.Philox(ss))
