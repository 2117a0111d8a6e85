"""Splittable random streams keyed by structured names.

A stream is identified by a tuple like ``(seed, "augment", epoch, "view1",
sample)``.  The tuple is hashed into a Philox key, so any stream can be
reconstructed from its name alone: resuming a run only needs the loop
counters, never saved generator state.  Child streams never collide with
the parent because the hash covers the whole key path.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _digest_key(parts):
    h = hashlib.blake2b(digest_size=16)
    for part in parts:
        if isinstance(part, (bool, np.bool_)):
            raise TypeError("bool is not a valid stream key part")
        if isinstance(part, (int, np.integer)):
            h.update(b"i")
            h.update(int(part).to_bytes(16, "little", signed=True))
        elif isinstance(part, str):
            raw = part.encode("utf-8")
            h.update(b"s")
            h.update(len(raw).to_bytes(4, "little"))
            h.update(raw)
        else:
            raise TypeError(f"stream key parts must be int or str, got {type(part).__name__}")
    d = h.digest()
    return int.from_bytes(d, "little")


class RngStream:
    """A named, reproducible source of random numbers.

    Same key tuple -> same sequence of draws, on every platform.  Use
    :meth:`child` to derive independent substreams instead of sharing one
    generator across loops.
    """

    __slots__ = ("key", "_gen")

    def __init__(self, *key):
        if not key:
            raise ValueError("RngStream needs at least one key part")
        self.key = tuple(key)
        self._gen = np.random.Generator(np.random.Philox(key=_digest_key(self.key)))

    def child(self, *parts):
        """Derive a substream named by appending ``parts`` to this key."""
        if not parts:
            raise ValueError("child() needs at least one key part")
        return RngStream(*self.key, *parts)

    # delegate the draw methods actually used by the package
    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self._gen.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n):
        return self._gen.permutation(n)

    def random(self, size=None):
        return self._gen.random(size)

    def __repr__(self):
        return f"RngStream{self.key!r}"
