"""Exact cosine retrieval over an immutable embedding index.

Rows are stored float32 (unit-norm); all scoring accumulates in float64
to bound rounding drift. Ranking is by descending score with ties broken
by ascending insertion position, which makes every result deterministic.

Index file: magic "PCRX", u32 version, u32 d, u64 n, little-endian f32
row-major matrix, then length-prefixed UTF-8 ids (u32 length each).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch, DuplicateId, PcrError

MAGIC = b"PCRX"
VERSION = 1


@dataclass
class EmbeddingIndex:
    dim: int
    ids: list[str]
    matrix: np.ndarray  # (n, dim) float32, unit rows
    _matrix64: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.matrix = np.ascontiguousarray(self.matrix, dtype=np.float32)
        if self.matrix.ndim != 2 or self.matrix.shape[1] != self.dim:
            raise DimensionMismatch(f"matrix shape {self.matrix.shape} vs dim {self.dim}")
        if len(self.ids) != self.matrix.shape[0]:
            raise DimensionMismatch("id count does not match row count")
        self._matrix64 = self.matrix.astype(np.float64)

    @property
    def count(self) -> int:
        return self.matrix.shape[0]


def build_index(embs: list[np.ndarray], ids: list[str]) -> EmbeddingIndex:
    """Normalize and pack embeddings; ids must be unique and aligned."""
    if len(embs) != len(ids):
        raise DimensionMismatch(f"{len(embs)} embeddings vs {len(ids)} ids")
    if len(embs) == 0:
        raise PcrError("cannot build an empty index")
    seen = set()
    for i in ids:
        if i in seen:
            raise DuplicateId(f"duplicate candidate id {i!r}")
        seen.add(i)
    mat = np.asarray(embs, dtype=np.float64)
    if mat.ndim != 2:
        raise DimensionMismatch("embeddings must share one dimension")
    norms = np.linalg.norm(mat, axis=1, keepdims=True)
    if np.any(norms < 1e-12):
        raise PcrError("zero-norm embedding cannot be indexed")
    return EmbeddingIndex(dim=mat.shape[1], ids=list(ids), matrix=(mat / norms).astype(np.float32))


def topk(index: EmbeddingIndex, query: np.ndarray, k: int) -> list[tuple[str, float]]:
    """Top-k (id, score) by cosine, deterministic under ties."""
    if k < 1:
        raise ValueError("k must be >= 1")
    q = np.asarray(query, dtype=np.float64)
    if q.shape != (index.dim,):
        raise DimensionMismatch(f"query shape {q.shape} vs index dim {index.dim}")
    scores = index._matrix64 @ q
    order = np.argsort(-scores, kind="stable")[: min(k, index.count)]
    return [(index.ids[i], float(scores[i])) for i in order]


def batch_score(index: EmbeddingIndex, queries: np.ndarray) -> np.ndarray:
    """(m, n) matrix of dot products; row i equals topk's scores for query i."""
    q = np.asarray(queries, dtype=np.float64)
    if q.ndim != 2 or q.shape[1] != index.dim:
        raise DimensionMismatch(f"queries shape {q.shape} vs index dim {index.dim}")
    return q @ index._matrix64.T


def save_index(index: EmbeddingIndex, path) -> None:
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<I", index.dim))
        f.write(struct.pack("<Q", index.count))
        f.write(np.ascontiguousarray(index.matrix, dtype="<f4").tobytes())
        for cid in index.ids:
            raw = cid.encode("utf-8")
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)


def load_index(path) -> EmbeddingIndex:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != MAGIC:
            raise PcrError(f"not an index file (magic {magic!r})")
        (version,) = struct.unpack("<I", f.read(4))
        if version != VERSION:
            raise PcrError(f"unsupported index version {version}")
        (dim,) = struct.unpack("<I", f.read(4))
        (count,) = struct.unpack("<Q", f.read(8))
        mat = np.frombuffer(f.read(4 * dim * count), dtype="<f4").reshape(count, dim)
        ids = []
        for _ in range(count):
            (ln,) = struct.unpack("<I", f.read(4))
            ids.append(f.read(ln).decode("utf-8"))
    return EmbeddingIndex(dim=dim, ids=ids, matrix=mat.copy())


# raw embedding blobs (the `embed` command output, input to `index`)
EMB_MAGIC = b"PCRE"


def save_embeddings(path, ids: list[str], matrix: np.ndarray, f64: bool = False) -> None:
    dtype = "<f8" if f64 else "<f4"
    mat = np.ascontiguousarray(matrix, dtype=dtype)
    with open(path, "wb") as f:
        f.write(EMB_MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<B", 8 if f64 else 4))
        f.write(struct.pack("<I", mat.shape[1]))
        f.write(struct.pack("<Q", mat.shape[0]))
        f.write(mat.tobytes())
        for cid in ids:
            raw = cid.encode("utf-8")
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)


def load_embeddings(path) -> tuple[list[str], np.ndarray]:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != EMB_MAGIC:
            raise PcrError(f"not an embeddings file (magic {magic!r})")
        (version,) = struct.unpack("<I", f.read(4))
        if version != VERSION:
            raise PcrError(f"unsupported embeddings version {version}")
        (itemsize,) = struct.unpack("<B", f.read(1))
        (dim,) = struct.unpack("<I", f.read(4))
        (count,) = struct.unpack("<Q", f.read(8))
        dtype = "<f8" if itemsize == 8 else "<f4"
        mat = np.frombuffer(f.read(itemsize * dim * count), dtype=dtype).reshape(count, dim)
        ids = []
        for _ in range(count):
            (ln,) = struct.unpack("<I", f.read(4))
            ids.append(f.read(ln).decode("utf-8"))
    return ids, mat.astype(np.float64)
