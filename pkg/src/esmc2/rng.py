"""Counter-based random streams.

Every random draw in the package comes from a :class:`RngStream` keyed by a
root seed plus a path of integer keys (stage, time index, move, ...).  Streams
are Philox generators built from ``SeedSequence(seed, spawn_key=path)``, so a
stream's output depends only on its key, never on how many draws were taken
elsewhere or on thread scheduling.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import Union

import numpy as np

Key = Union[int, str]


def _as_key(k: Key) -> int:
    if isinstance(k, str):
        return zlib.crc32(k.encode("utf-8"))
    k = int(k)
    if k < 0:
        raise ValueError(f"stream keys must be non-negative, got {k}")
    return k


@dataclass(frozen=True)
class RngStream:
    """Named random stream.

    Parameters
    ----------
    seed : int
        Root seed (64-bit).
    stream_id : tuple of int
        Key path identifying this stream below the root seed.
    """

    seed: int
    stream_id: tuple = ()

    def child(self, *keys: Key) -> "RngStream":
        """Return the sub-stream ``stream_id + keys``; strings are hashed."""
        return RngStream(self.seed, self.stream_id + tuple(_as_key(k) for k in keys))

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(self.seed, spawn_key=self.stream_id)
        return np.random.Generator(np.random.Philox(ss))


RngLike = Union[RngStream, np.random.Generator, int, None]


def as_generator(rng: RngLike) -> np.random.Generator:
    """Coerce a stream, a seed or a ready generator into a ``Generator``."""
    if isinstance(rng, np.random.Generator):
        return rng
    if isinstance(rng, RngStream):
        return rng.generator()
    if rng is None:
        return np.random.default_rng()
    return RngStream(int(rng)).generator()


def as_stream(rng: RngLike) -> RngStream:
    """Coerce to an :class:`RngStream`.

    A bare ``Generator`` is turned into a stream by drawing a fresh root seed
    from it, which keeps call sites that only hold a generator usable.
    """
    if isinstance(rng, RngStream):
        return rng
    if isinstance(rng, np.random.Generator):
        return RngStream(int(rng.integers(0, 2**63 - 1)))
    if rng is None:
        return RngStream(int(np.random.SeedSequence().entropy % (2**63)))
    return RngStream(int(rng))
