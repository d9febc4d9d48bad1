"""Small shared helpers: stable hashing, seeding, parallel map, file digests."""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from typing import Any, Callable, Iterable, Sequence

import numpy as np

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_U64 = 0xFFFFFFFFFFFFFFFF


def fnv1a64(data: bytes | str) -> int:
    """FNV-1a 64-bit hash; platform-independent, used wherever a stable
    string-to-integer map is needed (tokenizer, per-record seeds)."""
    if isinstance(data, str):
        data = data.encode("utf-8")
    h = _FNV_OFFSET
    for byte in data:
        h = ((h ^ byte) * _FNV_PRIME) & _U64
    return h


def seeded_rng(*keys: int | str) -> np.random.Generator:
    """Deterministic generator derived from a tuple of integer/string keys."""
    entropy = [fnv1a64(k) if isinstance(k, str) else int(k) & _U64 for k in keys]
    return np.random.default_rng(np.random.SeedSequence(entropy))


def parallel_map(fn: Callable, items: Sequence, threads: int = 1) -> list:
    """Apply fn to each item, optionally on a thread pool.

    Results are always returned in input order, so downstream reductions
    are bitwise independent of the thread count.
    """
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def json_dumps(obj: Any) -> str:
    """Canonical JSON: sorted keys, compact separators. Byte-stable for
    identical inputs, which the determinism contract relies on."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def chunked(seq: Sequence, size: int) -> Iterable[Sequence]:
    for i in range(0, len(seq), size):
        yield seq[i : i + size]
