"""Counter-based random streams.

Every number drawn here is a pure function of ``(seed, path, counter)``: a
stream is identified by a 64-bit key hashed from the seed and a path of
integers or strings, and individual values are hashes of that key with a
counter. Results therefore never depend on how many other draws happened
first, which is what makes chain-level reproducibility and bit-exact resume
cheap: the only "position" a trainer has to remember is its step counter.

The hash is the SplitMix64 finalizer. Bulk scalar draws that are not
per-chain (bank indices, Bernoulli rejuvenation, data batches) go through
numpy's Philox generator keyed by the stream key.
"""
from __future__ import annotations

import zlib
from typing import Iterable

import numpy as np
from scipy.special import ndtri

_MASK = (1 << 64) - 1
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_S30, _S27, _S31, _S11 = np.uint64(30), np.uint64(27), np.uint64(31), np.uint64(11)


def mix64(z: np.ndarray) -> np.ndarray:
    """SplitMix64 finalizer on a uint64 array (wrapping arithmetic)."""
    z = np.asarray(z, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = (z ^ (z >> _S30)) * _M1
        z = (z ^ (z >> _S27)) * _M2
    return z ^ (z >> _S31)


def _token(item) -> int:
    if isinstance(item, str):
        return zlib.crc32(item.encode()) | (1 << 40)
    return int(item) & _MASK


def hash_path(seed: int, path: Iterable) -> int:
    h = np.uint64(int(seed) & _MASK)
    with np.errstate(over="ignore"):
        h = mix64(h + _GOLDEN)
        for item in path:
            h = mix64(h ^ mix64(np.uint64(_token(item)) + _GOLDEN))
    return int(h)


class Stream:
    """A named, hashable source of randomness."""

    __slots__ = ("key",)

    def __init__(self, seed: int = 0, *path):
        self.key = hash_path(seed, path)

    @classmethod
    def from_key(cls, key: int) -> "Stream":
        s = cls.__new__(cls)
        s.key = int(key) & _MASK
        return s

    def child(self, *path) -> "Stream":
        return Stream.from_key(hash_path(self.key, path))

    def generator(self) -> np.random.Generator:
        return np.random.Generator(np.random.Philox(key=np.array([self.key, 0x5EED], dtype=np.uint64)))

    def chain_keys(self, chain_ids) -> np.ndarray:
        ids = np.asarray(chain_ids, dtype=np.int64).astype(np.uint64)
        with np.errstate(over="ignore"):
            return mix64(mix64(ids * _GOLDEN + _GOLDEN) ^ np.uint64(self.key))

    def uniforms(self, chain_keys: np.ndarray, start: int, count: int, dim: int) -> np.ndarray:
        """Uniforms in (0, 1), shape ``(count, len(chain_keys), dim)``.

        Entry ``[k, b, j]`` depends only on the chain key, the absolute
        counter ``start + k`` and the coordinate ``j``.
        """
        ctr = (np.arange(start, start + count, dtype=np.uint64)[:, None] * np.uint64(dim)
               + np.arange(dim, dtype=np.uint64)[None, :])
        with np.errstate(over="ignore"):
            cm = mix64(ctr * _GOLDEN + np.uint64(0x632BE59BD9B4E019))
        bits = mix64(cm[:, None, :] ^ np.asarray(chain_keys, dtype=np.uint64)[None, :, None])
        return ((bits >> _S11).astype(np.float64) + 0.5) * (2.0 ** -53)

    def normals(self, chain_keys: np.ndarray, start: int, count: int, dim: int) -> np.ndarray:
        """Standard normals, shape ``(count, len(chain_keys), dim)``."""
        return ndtri(self.uniforms(chain_keys, start, count, dim))

    def __repr__(self):
        return f"Stream(key={self.key:#018x})"

    def __eq__(self, other):
        return isinstance(other, Stream) and other.key == self.key

    def __hash__(self):
        return hash(self.key)


def as_generator(rng) -> np.random.Generator:
    """Accept a Stream, a numpy Generator, or an integer seed."""
    if isinstance(rng, np.random.Generator):
        return rng
    if isinstance(rng, Stream):
        return rng.generator()
    return Stream(int(rng)).generator()
