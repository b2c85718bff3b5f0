"""Deterministic, splittable random streams.

Every stochastic component draws from its own named stream derived from
(master seed, path of labels/counters) via a Philox counter-based generator.
Streams are pure functions of their path: recreating a stream at the same
path yields bit-identical draws, which is what makes training resumable and
the whole pipeline reproducible without serializing generator internals.
"""

import hashlib

import numpy as np


def _component(part) -> int:
    """Map one path component (int or str) to a stable 32-bit value."""
    if isinstance(part, (int, np.integer)):
        if part < 0:
            raise ValueError(f"stream path integers must be >= 0, got {part}")
        return int(part)
    digest = hashlib.blake2s(str(part).encode("utf-8"), digest_size=4).digest()
    return int.from_bytes(digest, "little")


def stream(seed: int, *path) -> np.random.Generator:
    """Return the generator for the stream named by `path` under `seed`.

    Path components may be strings (component names) or non-negative ints
    (counters such as epoch/step indices).
    """
    key = tuple(_component(p) for p in path)
    seq = np.random.SeedSequence(entropy=int(seed), spawn_key=key)
    return np.random.Generator(np.random.Philox(seq))
