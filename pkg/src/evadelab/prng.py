"""Keyed counter-mode randomness.

Block ``j`` of stream ``s`` is ``Philox4x64-10(key, counter=(j + 1, 0, 0, s))``
(numpy's Philox increments the counter before each block), so any
(key, stream) pair can be regenerated independently of evaluation order.
Streams are 64-bit integers; composite identities such as
``(cell, repetition, sample)`` are folded into one with :func:`stream_id`.
"""

import hashlib
import secrets
import struct

import numpy as np

KEY_BYTES = 32
_MASK64 = (1 << 64) - 1


def new_key():
    """Fresh 256-bit key from the OS entropy pool."""
    return secrets.token_bytes(KEY_BYTES)


def key_from_seed(seed):
    """Deterministic 256-bit key derived from an integer or string seed."""
    return hashlib.blake2b(repr(seed).encode(), digest_size=KEY_BYTES, person=b"evadelab-key").digest()


def stream_id(*parts):
    """Fold integers (or strings) into one 64-bit stream index."""
    h = hashlib.blake2b(digest_size=8, person=b"evadelab-strm")
    for p in parts:
        if isinstance(p, str):
            h.update(b"s" + p.encode() + b"\0")
        else:
            h.update(b"i" + struct.pack("<q", int(p) if int(p) < (1 << 63) else int(p) - (1 << 64)))
    return int.from_bytes(h.digest(), "little")


def _counter(stream):
    # an explicit uint64 array: a plain list with values >= 2**63 would round-trip through float64
    return np.array([0, 0, 0, int(stream) & _MASK64], dtype=np.uint64)


class KeyedStream:
    """Pseudo-random generator ``G(k_s, nonce)`` over 64-bit words."""

    def __init__(self, key):
        if isinstance(key, int):
            key = key_from_seed(key)
        key = bytes(key)
        if len(key) != KEY_BYTES:
            raise ValueError(f"key must be {KEY_BYTES} bytes, got {len(key)}")
        self.key = key
        digest = hashlib.blake2b(key, digest_size=16, person=b"evadelab-philox").digest()
        self._philox_key = int.from_bytes(digest, "little")

    def words(self, stream, n):
        """First ``n`` 64-bit words of ``stream``; word ``i`` is the nonce-``i`` draw."""
        gen = np.random.Philox(key=self._philox_key, counter=_counter(stream))
        return gen.random_raw(int(n))

    def uniform(self, stream, shape):
        """Uniform draws in [0, 1) at 53-bit resolution, shaped ``shape``."""
        n = int(np.prod(shape))
        w = self.words(stream, n)
        return ((w >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)).reshape(shape)

    def symmetric(self, stream, shape, delta):
        """Uniform draws in [-delta, +delta)."""
        return self.uniform(stream, shape) * (2.0 * delta) - delta

    def integers(self, stream, n, high):
        """``n`` integers on ``[0, high)`` via floor(u * high)."""
        return np.floor(self.uniform(stream, (n,)) * high).astype(np.int64)

    def generator(self, stream):
        """A numpy Generator positioned at the start of ``stream``."""
        return np.random.Generator(np.random.Philox(key=self._philox_key, counter=_counter(stream)))
