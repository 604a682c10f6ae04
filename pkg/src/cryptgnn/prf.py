"""Deterministic seeded randomness with domain separation.

Every stream is identified by a 32-byte seed plus a label tuple of ints,
strings, or bytes. The label is hashed with keyed BLAKE2b into a Philox
key, and the counter-based Philox generator expands it. Identical
(seed, labels, shape) requests give byte-identical output on every
platform; distinct labels give independent streams.

Field elements are drawn by masking raw 64-bit words to 61 bits and
rejecting the single out-of-range value, so the distribution over
[0, q) is exactly uniform.
"""

import hashlib

import numpy as np

from .field import MODULUS

SEED_BYTES = 32

_MASK61 = np.uint64((1 << 61) - 1)
_Q = np.uint64(MODULUS)


def _encode_labels(labels) -> bytes:
    parts = []
    for label in labels:
        if isinstance(label, bool):
            raise TypeError("bool labels are ambiguous")
        if isinstance(label, int):
            parts.append(b"i" + label.to_bytes(8, "little", signed=True))
        elif isinstance(label, str):
            raw = label.encode("utf-8")
            parts.append(b"s" + len(raw).to_bytes(2, "little") + raw)
        elif isinstance(label, (bytes, bytearray)):
            parts.append(b"b" + len(label).to_bytes(2, "little") + bytes(label))
        else:
            raise TypeError(f"unsupported label type {type(label)!r}")
    return b"".join(parts)


def random_seed() -> bytes:
    """Fresh non-deterministic master seed."""
    import secrets

    return secrets.token_bytes(SEED_BYTES)


class SeededPrf:
    """Keyed pseudo-random function producing arrays and derived seeds."""

    def __init__(self, seed: bytes, domain: tuple = ()):
        if len(seed) != SEED_BYTES:
            raise ValueError(f"seed must be {SEED_BYTES} bytes")
        self.seed = bytes(seed)
        self.domain = tuple(domain)

    def child(self, *labels) -> "SeededPrf":
        return SeededPrf(self.seed, self.domain + labels)

    def derive_seed(self, *labels) -> bytes:
        data = _encode_labels(self.domain + labels)
        return hashlib.blake2b(data, key=self.seed, digest_size=SEED_BYTES).digest()

    def _generator(self, labels) -> np.random.Generator:
        data = _encode_labels(self.domain + labels)
        key = hashlib.blake2b(data, key=self.seed, digest_size=16).digest()
        return np.random.Generator(np.random.Philox(key=int.from_bytes(key, "little")))

    def raw_words(self, n: int, *labels) -> np.ndarray:
        gen = self._generator(labels)
        return gen.integers(0, 1 << 64, size=n, dtype=np.uint64, endpoint=False)

    def field_matrix(self, shape, *labels) -> np.ndarray:
        """Uniform field elements of the given shape."""
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        gen = self._generator(labels)
        out = gen.integers(0, 1 << 64, size=n, dtype=np.uint64) & _MASK61
        bad = out == _Q
        while np.any(bad):  # P(hit) = 2^-61 per word; loop is deterministic
            refill = gen.integers(0, 1 << 64, size=int(bad.sum()), dtype=np.uint64) & _MASK61
            out[bad] = refill
            bad = out == _Q
        return out.reshape(shape)

    def nonzero_field_matrix(self, shape, *labels) -> np.ndarray:
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        gen = self._generator(labels)
        out = gen.integers(0, 1 << 64, size=n, dtype=np.uint64) & _MASK61
        bad = (out == _Q) | (out == 0)
        while np.any(bad):
            refill = gen.integers(0, 1 << 64, size=int(bad.sum()), dtype=np.uint64) & _MASK61
            out[bad] = refill
            bad = (out == _Q) | (out == 0)
        return out.reshape(shape)

    def integers(self, n: int, bound: int, *labels) -> np.ndarray:
        """n uniform values in [0, bound), bias removed by rejection."""
        if bound <= 0:
            raise ValueError("bound must be positive")
        gen = self._generator(labels)
        limit = (1 << 64) - ((1 << 64) % bound)
        out = gen.integers(0, 1 << 64, size=n, dtype=np.uint64)
        if limit < (1 << 64):  # otherwise bound divides 2^64: no rejection region
            limit64 = np.uint64(limit)
            bad = out >= limit64
            while np.any(bad):
                out[bad] = gen.integers(0, 1 << 64, size=int(bad.sum()), dtype=np.uint64)
                bad = out >= limit64
        return out % np.uint64(bound)
