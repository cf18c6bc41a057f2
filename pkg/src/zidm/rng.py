"""Reproducible random-number streams.

One ``RngStream`` per logical consumer (a chain, a replicate, a generator).
Streams are backed by counter-based Philox bit generators keyed through
``numpy.random.SeedSequence``, so distinct (seed, stream_id) pairs give
statistically independent sequences and identical pairs replay bit-exactly.
Substreams are derived by extending the spawn key, which cannot collide
with sibling streams.
"""

from __future__ import annotations

import numpy as np

from .errors import ParameterError


class RngStream:
    """A seeded, single-consumer random stream.

    Parameters
    ----------
    seed : int
        Base seed shared by every stream of one run.
    stream_id : int
        Identifies the logical consumer (chain index, replicate index, ...).
    _spawn_key : tuple, internal
        Full spawn key; used when deriving substreams.
    """

    __slots__ = ("seed", "stream_id", "spawn_key", "generator")

    def __init__(self, seed: int, stream_id: int = 0, _spawn_key: tuple[int, ...] | None = None):
        if seed < 0 or stream_id < 0:
            raise ParameterError("seed and stream_id must be nonnegative")
        self.seed = int(seed)
        self.stream_id = int(stream_id)
        self.spawn_key = _spawn_key if _spawn_key is not None else (self.stream_id,)
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=self.spawn_key)
        self.generator = np.random.Generator(np.random.Philox(ss))

    @classmethod
    def from_key(cls, seed: int, key: tuple[int, ...]) -> "RngStream":
        """Build a stream from an explicit spawn-key tuple."""
        head = key[0] if key else 0
        return cls(seed, head, _spawn_key=tuple(int(k) for k in key))

    def substream(self, index: int) -> "RngStream":
        """Derive an independent child stream, deterministic in (self, index)."""
        return RngStream(self.seed, self.stream_id, _spawn_key=self.spawn_key + (int(index),))

    def __repr__(self) -> str:  # pragma: no cover
        return f"RngStream(seed={self.seed}, spawn_key={self.spawn_key})"
