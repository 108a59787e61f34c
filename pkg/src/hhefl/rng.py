"""Deterministic randomness built on SHAKE-256.

Every random draw in the package flows through a `Drbg` so that an
experiment seed fully determines keys, masks, nonces, cohort selection and
training shuffles, across processes and platforms. Streams are derived
hierarchically with string labels; two children with different labels are
independent streams.
"""

from __future__ import annotations

import hashlib

import numpy as np

_BLOCK_BYTES = 1 << 14


class Drbg:
    """Counter-mode SHAKE-256 stream with hierarchical derivation."""

    def __init__(self, key: bytes):
        if len(key) != 32:
            raise ValueError("Drbg key must be 32 bytes")
        self._key = bytes(key)
        self._counter = 0
        self._buf = b""

    @classmethod
    def from_seed(cls, seed: int | bytes, label: str = "root") -> "Drbg":
        if isinstance(seed, int):
            if seed < 0:
                raise ValueError("seed must be non-negative")
            seed = seed.to_bytes(32, "little") if seed < (1 << 256) else str(seed).encode()
        key = hashlib.shake_256(b"hhefl|" + label.encode() + b"|" + bytes(seed)).digest(32)
        return cls(key)

    def child(self, label: str) -> "Drbg":
        key = hashlib.shake_256(self._key + b"/" + label.encode()).digest(32)
        return Drbg(key)

    def take(self, n: int) -> bytes:
        while len(self._buf) < n:
            block = hashlib.shake_256(
                self._key + b"#" + self._counter.to_bytes(8, "little")
            ).digest(_BLOCK_BYTES)
            self._counter += 1
            self._buf += block
        out, self._buf = self._buf[:n], self._buf[n:]
        return out

    def _uint64(self, n: int) -> np.ndarray:
        return np.frombuffer(self.take(8 * n), dtype="<u8")

    def uniform(self, bound: int, size: int) -> np.ndarray:
        """`size` independent uniform draws from [0, bound), as int64."""
        if not 0 < bound <= (1 << 62):
            raise ValueError("bound out of range")
        limit = ((1 << 64) // bound) * bound
        out = np.empty(size, dtype=np.int64)
        filled = 0
        while filled < size:
            draws = self._uint64(size - filled + 16)
            good = draws[draws < limit]
            take = min(len(good), size - filled)
            out[filled : filled + take] = (good[:take] % bound).astype(np.int64)
            filled += take
        return out

    def ternary(self, size: int) -> np.ndarray:
        return self.uniform(3, size) - 1

    def cbd(self, size: int, k: int = 20) -> np.ndarray:
        """Centered binomial: sum of k coin flips minus sum of k more."""
        if k > 32:
            raise ValueError("cbd width limited to 32")
        bits = np.unpackbits(
            np.frombuffer(self.take(8 * size), dtype=np.uint8)
        ).reshape(size, 64)
        a = bits[:, :k].sum(axis=1).astype(np.int64)
        b = bits[:, k : 2 * k].sum(axis=1).astype(np.int64)
        return a - b

    def permutation(self, n: int) -> np.ndarray:
        # argsort of 64-bit draws; collision probability is negligible
        return np.argsort(self._uint64(n), kind="stable")

    def sample(self, n: int, k: int) -> np.ndarray:
        """k indices sampled without replacement from range(n)."""
        if k > n:
            raise ValueError("cannot sample more than population")
        return np.sort(self.permutation(n)[:k])

    def normal(self, size: int) -> np.ndarray:
        """Standard normal draws via Box-Muller."""
        m = (size + 1) // 2
        u1 = (self._uint64(m).astype(np.float64) + 1.0) / (2.0**64 + 2.0)
        u2 = self._uint64(m).astype(np.float64) / 2.0**64
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([r * np.cos(2 * np.pi * u2), r * np.sin(2 * np.pi * u2)])
        return z[:size]
