"""Counter-keyed deterministic random streams.

Every random decision in the repo draws from a Philox generator keyed by a
hashed path of integers/strings (e.g. ``("mask", seed, epoch, scene)``), so
the stream for one decision never depends on how many draws any other
decision made. Shuffling the dataset or resuming from a checkpoint therefore
cannot change any scene's mask or any scene's synthetic content.
"""

from __future__ import annotations

import hashlib

import numpy as np


def stream(*path: int | str) -> np.random.Generator:
    """Return a fresh generator keyed only by ``path``."""
    tag = "/".join(str(p) for p in path)
    digest = hashlib.sha256(tag.encode("utf-8")).digest()
    key = np.frombuffer(digest[:16], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))
