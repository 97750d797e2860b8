"""Deterministic counter-based random streams.

Every random draw in a run comes from a Philox generator keyed by the run
seed plus a tuple of domain tags (entity, round, purpose).  Identical
(seed, tags) pairs always yield identical draws; distinct tags yield
independent streams.  This is what makes runs byte-reproducible and lets
the round engine hand the adversary, the servers, and the clients their
own randomness without any shared mutable generator state.
"""

from __future__ import annotations

import hashlib

import numpy as np

_SEP = b"\x1f"


def _encode_tags(seed: int, tags: tuple) -> bytes:
    parts = [str(int(seed)).encode("ascii")]
    for t in tags:
        if isinstance(t, bytes):
            parts.append(t)
        else:
            parts.append(str(t).encode("utf-8"))
    return _SEP.join(parts)


def philox_key(seed: int, *tags) -> int:
    """128-bit Philox key derived by hashing (seed, *tags)."""
    digest = hashlib.sha256(_encode_tags(seed, tags)).digest()
    return int.from_bytes(digest[:16], "little")


def stream(seed: int, *tags) -> np.random.Generator:
    """Fresh generator for the given (seed, tags) coordinate.

    Calling this twice with equal arguments returns generators that
    produce identical sequences.
    """
    return np.random.Generator(np.random.Philox(key=philox_key(seed, *tags)))


class StreamFactory:
    """Convenience wrapper binding a run seed.

    The factory itself is stateless apart from the seed, so it can be
    shared freely; every stream() call returns an independent generator.
    """

    __slots__ = ("seed",)

    def __init__(self, seed: int):
        self.seed = int(seed)

    def stream(self, *tags) -> np.random.Generator:
        return stream(self.seed, *tags)

    def round_stream(self, round_no: int, purpose: str) -> np.random.Generator:
        return stream(self.seed, "round", round_no, purpose)

    def server_stream(self, server_id: int, round_no: int, purpose: str) -> np.random.Generator:
        return stream(self.seed, "server", server_id, round_no, purpose)

    def adversary_stream(self, round_no: int) -> np.random.Generator:
        return stream(self.seed, "adversary", round_no)

    def client_stream(self, client_id: str, round_no: int) -> np.random.Generator:
        return stream(self.seed, "client", client_id, round_no)
