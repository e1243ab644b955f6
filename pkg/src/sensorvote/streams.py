"""Deterministic RNG stream derivation.

Every random draw in the simulator comes from a stream keyed by a
(master seed, *path) tuple, so results are independent of evaluation order,
worker count, and scheduling. Keys are derived by a SplitMix64 chain over the
path and feed the counter-based Philox engine; string path components hash
through sha256 (cached).
"""

from __future__ import annotations

import hashlib
from functools import lru_cache
from typing import Union

import numpy as np

PathPart = Union[int, str]

_MASK = 0xFFFFFFFFFFFFFFFF
_GOLDEN = 0x9E3779B97F4A7C15
_KEY2 = 0xD6E8FEB86659FD93


@lru_cache(maxsize=4096)
def _hash_str(part: str) -> int:
    digest = hashlib.sha256(part.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def _coerce(part: PathPart) -> int:
    if isinstance(part, bool):
        raise TypeError("bool is ambiguous as a stream path component")
    if isinstance(part, (int, np.integer)):
        return int(part) & _MASK
    if isinstance(part, str):
        return _hash_str(part)
    raise TypeError(f"stream path components must be int or str, got {type(part).__name__}")


def _mix_scalar(x: int) -> int:
    x = (x + _GOLDEN) & _MASK
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK
    return x ^ (x >> 31)


def derive_key(master_seed: int, *path: PathPart) -> tuple[int, int]:
    k = _mix_scalar(int(master_seed) & _MASK)
    for part in path:
        k = _mix_scalar(k ^ _coerce(part))
    return k, _mix_scalar(k ^ _KEY2)


def stream(master_seed: int, *path: PathPart) -> np.random.Generator:
    """Generator for one labelled stream, e.g. stream(seed, "capture", scene_id, rank)."""
    k0, k1 = derive_key(master_seed, *path)
    return np.random.Generator(np.random.Philox(key=np.array([k0, k1], dtype=np.uint64)))


def stable_id(value: Union[int, str]) -> int:
    """64-bit identifier for an opaque scene id (ints pass through, strings hash)."""
    return _coerce(value)


def mix64(x: np.ndarray) -> np.ndarray:
    """SplitMix64 finalizer, vectorized over uint64. Used to turn content
    fingerprints into decorrelated noise words without per-view Generator
    construction."""
    x = x.astype(np.uint64, copy=True)
    with np.errstate(over="ignore"):
        x += np.uint64(_GOLDEN)
        z = x
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        z = z ^ (z >> np.uint64(31))
    return z


@lru_cache(maxsize=256)
def _mixed_counters(n: int, tag: int) -> np.ndarray:
    counters = (np.uint64(tag) << np.uint64(32)) + np.arange(n, dtype=np.uint64)
    out = mix64(counters)
    out.setflags(write=False)
    return out


def hash_uniforms(keys: np.ndarray, n: int, tag: int) -> np.ndarray:
    """Deterministic uniforms in (0, 1): shape (len(keys), n).

    Each value depends only on its key, the tag, and its column, never on
    batch order.
    """
    keys = np.asarray(keys, dtype=np.uint64)
    with np.errstate(over="ignore"):
        words = mix64(keys[:, None] ^ _mixed_counters(n, tag)[None, :])
    return ((words >> np.uint64(11)).astype(np.float64) + 0.5) * (1.0 / (1 << 53))


def hash_normals(keys: np.ndarray, n: int, tag: int) -> np.ndarray:
    """Deterministic standard normals via the inverse CDF on hashed uniforms."""
    from scipy.special import ndtri

    return ndtri(hash_uniforms(keys, n, tag))
