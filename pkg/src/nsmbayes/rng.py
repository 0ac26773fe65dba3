"""Deterministic counter-based random streams.

Every piece of randomness in the package derives from a master seed plus a
tuple of string/int tags naming the consumer, e.g. ``substream(seed,
"simulate", task_index)``. Streams are independent Philox generators, so
parallel tasks can draw without coordination and reruns are bit-identical.
"""

import hashlib

import numpy as np


def _key_from_tags(master_seed, tags):
    payload = repr((int(master_seed),) + tuple(tags)).encode("utf-8")
    digest = hashlib.sha256(payload).digest()
    # Philox uses a 128-bit key: take the first 16 bytes of the hash.
    return int.from_bytes(digest[:16], "little")


def substream(master_seed, *tags):
    """Return a numpy Generator keyed by (master_seed, *tags).

    Tags may be ints or strings; the same tuple always yields the same
    stream and distinct tuples yield independent streams.
    """
    key = _key_from_tags(master_seed, tags)
    return np.random.Generator(np.random.Philox(key=key))
