"""Shared domain types, vector primitives, and record validation.

An embedding is a plain 1-D numpy array with unit L2 norm; `normalize`
is the only constructor. Dataset files are JSON-Lines with one record
per line; absent optional fields are omitted, never null.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
from PIL import Image

from .errors import DimensionMismatch, EmptyImage, EmptyVideo, ZeroVector

# Unit-norm 1-D float vector; alias documents intent at call sites.
Embedding = np.ndarray

RECORD_FIELDS = (
    "id",
    "image_path",
    "text",
    "video_dir",
    "group_id",
    "class_label",
    "relation_text",
    "target_image_path",
    "split",
)

TASK_KINDS = (
    "multi_image_to_text",
    "image_text_to_image",
    "image_text_to_text",
    "video_to_text",
    "image_to_text",
    "text_to_image",
    "tile_classification",
)


def normalize(v: np.ndarray) -> Embedding:
    """Return v / ||v||2 as float64. Raises ZeroVector below 1e-12."""
    v = np.asarray(v, dtype=np.float64)
    n = float(np.linalg.norm(v))
    if n < 1e-12:
        raise ZeroVector(f"cannot normalize vector with norm {n:.3e}")
    return v / n


def cosine(a: Embedding, b: Embedding) -> float:
    """Dot product of two unit-norm embeddings."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionMismatch(f"embedding dims differ: {a.shape} vs {b.shape}")
    return float(a @ b)


@dataclass(frozen=True)
class ModalityItem:
    """One element of a composed query: an image, a text, or a video."""

    kind: str  # image | text | video
    payload: object  # HxWx3 uint8 array | str | list of HxWx3 uint8 arrays

    def __post_init__(self):
        if self.kind == "image":
            arr = np.asarray(self.payload)
            if arr.ndim != 3 or arr.shape[2] != 3 or arr.shape[0] < 1 or arr.shape[1] < 1:
                raise EmptyImage(f"image payload must be HxWx3 with H,W >= 1, got {arr.shape}")
        elif self.kind == "text":
            if not isinstance(self.payload, str):
                raise ValueError("text payload must be a string")
        elif self.kind == "video":
            frames = list(self.payload)
            if len(frames) < 1:
                raise EmptyVideo("video must have at least one frame")
        else:
            raise ValueError(f"unknown modality kind {self.kind!r}")

    @staticmethod
    def image(arr: np.ndarray) -> "ModalityItem":
        return ModalityItem("image", np.asarray(arr, dtype=np.uint8))

    @staticmethod
    def text(s: str) -> "ModalityItem":
        return ModalityItem("text", s)

    @staticmethod
    def video(frames) -> "ModalityItem":
        return ModalityItem("video", [np.asarray(f, dtype=np.uint8) for f in frames])


@dataclass(frozen=True)
class ComposedQuery:
    """Ordered, order-significant sequence of modality items."""

    items: tuple

    def __init__(self, items: Iterable[ModalityItem]):
        items = tuple(items)
        if len(items) < 1:
            raise ValueError("composed query needs at least one item")
        object.__setattr__(self, "items", items)

    def __len__(self) -> int:
        return len(self.items)


@dataclass
class DatasetRecord:
    """One multimodal sample; at least one of image/text/video present."""

    id: str
    image_path: Optional[str] = None
    text: Optional[str] = None
    video_dir: Optional[str] = None
    group_id: Optional[str] = None
    class_label: Optional[str] = None
    relation_text: Optional[str] = None
    target_image_path: Optional[str] = None
    split: str = "train"

    def to_dict(self) -> dict:
        out = {}
        for name in RECORD_FIELDS:
            value = getattr(self, name)
            if value is not None:
                out[name] = value
        return out

    @staticmethod
    def from_dict(d: dict) -> "DatasetRecord":
        known = {k: v for k, v in d.items() if k in RECORD_FIELDS}
        return DatasetRecord(**known)


def validate_record(r: DatasetRecord, deep: bool = False, base_dir=None) -> list[str]:
    """Return a list of invariant violations (empty list means valid).

    deep mode additionally checks that referenced files exist relative
    to base_dir.
    """
    violations = []
    if not r.id:
        violations.append("missing id")
    if r.image_path is None and r.text is None and r.video_dir is None:
        violations.append("no modality present")
    if r.split not in ("train", "test"):
        violations.append(f"invalid split {r.split!r}")
    if deep:
        base = Path(base_dir) if base_dir is not None else Path(".")
        for attr in ("image_path", "target_image_path"):
            p = getattr(r, attr)
            if p is not None and not (base / p).is_file():
                violations.append(f"{attr} not found: {p}")
        if r.video_dir is not None:
            vd = base / r.video_dir
            if not vd.is_dir() or not list_video_frames(vd):
                violations.append(f"video_dir missing or empty: {r.video_dir}")
    return violations


def validate_records(records: list[DatasetRecord], deep: bool = False, base_dir=None) -> list[str]:
    """Per-record violations plus cross-record duplicate-id checks."""
    violations = []
    seen = set()
    for r in records:
        for v in validate_record(r, deep=deep, base_dir=base_dir):
            violations.append(f"{r.id}: {v}")
        if r.id in seen:
            violations.append(f"{r.id}: duplicate id")
        seen.add(r.id)
    return violations


@dataclass
class BenchmarkTask:
    """Queries, a candidate pool, and ground truth for one task shape."""

    task_kind: str
    queries: list[ComposedQuery]
    candidates: list[ModalityItem]
    truth: dict[int, set[int]]
    query_ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.task_kind not in TASK_KINDS:
            raise ValueError(f"unknown task kind {self.task_kind!r}")
        n = len(self.candidates)
        for qi, tset in self.truth.items():
            if not tset:
                raise ValueError(f"query {qi}: empty truth set")
            if qi < 0 or qi >= len(self.queries):
                raise ValueError(f"truth query index {qi} out of range")
            for ci in tset:
                if ci < 0 or ci >= n:
                    raise ValueError(f"query {qi}: truth index {ci} out of range (n={n})")


def read_records(path) -> list[DatasetRecord]:
    records = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                records.append(DatasetRecord.from_dict(json.loads(line)))
    return records


def write_records(records: Iterable[DatasetRecord], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for r in records:
            f.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")


def load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def save_image(arr: np.ndarray, path) -> None:
    Image.fromarray(np.asarray(arr, dtype=np.uint8), mode="RGB").save(path, format="PNG")


def list_video_frames(video_dir) -> list[str]:
    """Frame files of a video directory in lexicographic order."""
    vd = Path(video_dir)
    return sorted(str(vd / name) for name in os.listdir(vd) if name.lower().endswith(".png"))


def load_video(video_dir) -> list[np.ndarray]:
    frames = [load_image(p) for p in list_video_frames(video_dir)]
    if not frames:
        raise EmptyVideo(f"no frames in {video_dir}")
    return frames
