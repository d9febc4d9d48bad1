"""Benchmark construction and every evaluation metric.

Tasks are built per kind from dataset records; candidate pools contain
the distinct truths of that kind plus same-kind distractors (for the
relational task that means the query's own source image, the documented
hard case). Identical candidate texts deduplicate to the first
occurrence so recall is not inflated by duplicate positives.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import encoder as enc
from .data import BenchmarkTask, ComposedQuery, DatasetRecord, ModalityItem, load_image, load_video
from .errors import (
    DegenerateData,
    EmptyClassSet,
    EmptySet,
    EmptyTruth,
    InsufficientRecords,
    LengthMismatch,
)
from .retrieval import build_index, topk
from .util import parallel_map

DEFAULT_KS = (1, 5, 10)
DEFAULT_PROMPT_TEMPLATE = "an H&E image of {class}."
COMPOSED_KINDS = ("multi_image_to_text", "image_text_to_image", "image_text_to_text", "video_to_text")


@dataclass
class MetricReport:
    task_kind: str
    k_values: list[int]
    recall_at: dict[int, float]
    n_queries: int
    n_candidates: int
    config_digest: str = ""

    def to_dict(self) -> dict:
        return {
            "task_kind": self.task_kind,
            "k_values": list(self.k_values),
            "recall_at": {str(k): v for k, v in self.recall_at.items()},
            "n_queries": self.n_queries,
            "n_candidates": self.n_candidates,
            "config_digest": self.config_digest,
        }


@dataclass
class GapReport:
    gap: float
    n_image: int
    n_text: int
    projection_file: str = ""

    def to_dict(self) -> dict:
        return {
            "gap": self.gap,
            "n_image": self.n_image,
            "n_text": self.n_text,
            "projection_file": self.projection_file,
        }


# ---------------------------------------------------------------------------
# task construction


def _is_plain(r: DatasetRecord) -> bool:
    return (
        r.image_path is not None
        and r.text is not None
        and r.group_id is None
        and r.relation_text is None
        and r.target_image_path is None
        and r.video_dir is None
    )


def _dedup_texts(texts: list[str]) -> tuple[list[str], dict[str, int]]:
    pool: list[str] = []
    where: dict[str, int] = {}
    for t in texts:
        if t not in where:
            where[t] = len(pool)
            pool.append(t)
    return pool, where


def build_tasks(records: list[DatasetRecord], kind: str, base_dir=None,
                include_source: bool = True,
                prompt_template: str = DEFAULT_PROMPT_TEMPLATE) -> BenchmarkTask:
    """Build one BenchmarkTask of the given kind from records.

    include_source only affects image_text_to_image: the default keeps
    each query's own source image in the candidate pool.
    """
    base = Path(base_dir) if base_dir is not None else Path(".")

    def img(path):
        return ModalityItem.image(load_image(base / path))

    if kind == "image_to_text":
        usable = [r for r in records if _is_plain(r)]
        if not usable:
            raise InsufficientRecords(kind, 0)
        pool, where = _dedup_texts([r.text for r in usable])
        queries = [ComposedQuery([img(r.image_path)]) for r in usable]
        truth = {i: {where[r.text]} for i, r in enumerate(usable)}
        return BenchmarkTask(kind, queries, [ModalityItem.text(t) for t in pool], truth,
                             [r.id for r in usable])

    if kind == "text_to_image":
        usable = [r for r in records if _is_plain(r)]
        if not usable:
            raise InsufficientRecords(kind, 0)
        pool, where = _dedup_texts([r.text for r in usable])
        candidates = [img(r.image_path) for r in usable]
        truth: dict[int, set[int]] = {qi: set() for qi in range(len(pool))}
        for ci, r in enumerate(usable):
            truth[where[r.text]].add(ci)
        queries = [ComposedQuery([ModalityItem.text(t)]) for t in pool]
        return BenchmarkTask(kind, queries, candidates, truth, [f"t{qi}" for qi in range(len(pool))])

    if kind == "multi_image_to_text":
        groups: dict[str, list[DatasetRecord]] = {}
        for r in records:
            if r.group_id is not None and r.image_path is not None and r.text is not None:
                groups.setdefault(r.group_id, []).append(r)
        usable = {g: sorted(rs, key=lambda r: r.id) for g, rs in groups.items() if len(rs) >= 2}
        if not usable:
            raise InsufficientRecords(kind, 0)
        gids = sorted(usable)
        pool, where = _dedup_texts([usable[g][0].text for g in gids])
        queries = [ComposedQuery([img(r.image_path) for r in usable[g]]) for g in gids]
        truth = {i: {where[usable[g][0].text]} for i, g in enumerate(gids)}
        return BenchmarkTask(kind, queries, [ModalityItem.text(t) for t in pool], truth, gids)

    if kind == "image_text_to_image":
        usable = [
            r for r in records
            if r.image_path and r.relation_text and r.target_image_path
        ]
        if not usable:
            raise InsufficientRecords(kind, 0)
        paths = [r.target_image_path for r in usable]
        if include_source:
            paths += [r.image_path for r in usable]
        pool_paths: list[str] = []
        where_p: dict[str, int] = {}
        for p in paths:
            if p not in where_p:
                where_p[p] = len(pool_paths)
                pool_paths.append(p)
        queries = [
            ComposedQuery([img(r.image_path), ModalityItem.text(r.relation_text)]) for r in usable
        ]
        truth = {i: {where_p[r.target_image_path]} for i, r in enumerate(usable)}
        return BenchmarkTask(kind, queries, [img(p) for p in pool_paths], truth,
                             [r.id for r in usable])

    if kind == "image_text_to_text":
        usable = [
            r for r in records
            if r.image_path and r.relation_text and r.text and r.target_image_path is None
        ]
        if not usable:
            raise InsufficientRecords(kind, 0)
        pool, where = _dedup_texts([r.text for r in usable])
        queries = [
            ComposedQuery([img(r.image_path), ModalityItem.text(r.relation_text)]) for r in usable
        ]
        truth = {i: {where[r.text]} for i, r in enumerate(usable)}
        return BenchmarkTask(kind, queries, [ModalityItem.text(t) for t in pool], truth,
                             [r.id for r in usable])

    if kind == "video_to_text":
        usable = [r for r in records if r.video_dir and r.text]
        if not usable:
            raise InsufficientRecords(kind, 0)
        pool, where = _dedup_texts([r.text for r in usable])
        queries = [ComposedQuery([ModalityItem.video(load_video(base / r.video_dir))]) for r in usable]
        truth = {i: {where[r.text]} for i, r in enumerate(usable)}
        return BenchmarkTask(kind, queries, [ModalityItem.text(t) for t in pool], truth,
                             [r.id for r in usable])

    if kind == "tile_classification":
        usable = [r for r in records if r.image_path and r.class_label]
        if not usable:
            raise InsufficientRecords(kind, 0)
        classes = sorted({r.class_label for r in usable})
        prompts = [prompt_template.format_map({"class": c}) for c in classes]
        queries = [ComposedQuery([img(r.image_path)]) for r in usable]
        cidx = {c: i for i, c in enumerate(classes)}
        truth = {i: {cidx[r.class_label]} for i, r in enumerate(usable)}
        return BenchmarkTask(kind, queries, [ModalityItem.text(p) for p in prompts], truth,
                             [r.id for r in usable])

    raise ValueError(f"unknown task kind {kind!r}")


# ---------------------------------------------------------------------------
# metrics


def recall_at_k(rankings: list, truth: list, k: int) -> float:
    """Fraction of queries with at least one truth id among the top k."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(rankings) != len(truth):
        raise LengthMismatch(f"{len(rankings)} rankings vs {len(truth)} truth sets")
    hits = 0
    for ranked, ts in zip(rankings, truth):
        if not ts:
            raise EmptyTruth("query with empty truth set")
        if any(r in ts for r in ranked[:k]):
            hits += 1
    return hits / len(rankings)


def _encode_candidates(params, cfg, candidates, threads=1):
    return parallel_map(
        lambda it: enc.encode(params, cfg, ComposedQuery([it])), candidates, threads=threads
    )


def task_rankings(params, cfg, task: BenchmarkTask, threads: int = 1,
                  fusion: str = "prompt_guide") -> list[list[int]]:
    """Ranked candidate indices per query under the chosen fusion.

    prompt_guide encodes each composed query as one interleaved sequence;
    simple_add encodes each item separately and normalizes the sum.
    """
    cand_embs = _encode_candidates(params, cfg, task.candidates, threads=threads)
    index = build_index(cand_embs, [str(i) for i in range(len(cand_embs))])

    def embed_query(q: ComposedQuery):
        if fusion == "prompt_guide":
            return enc.encode(params, cfg, q)
        if fusion == "simple_add":
            return enc.fuse_simple_add(
                [enc.encode(params, cfg, ComposedQuery([it])) for it in q.items]
            )
        raise ValueError(f"unknown fusion {fusion!r}")

    q_embs = parallel_map(embed_query, task.queries, threads=threads)
    return [[int(cid) for cid, _ in topk(index, e, index.count)] for e in q_embs]


def evaluate_task(params, cfg, task: BenchmarkTask, ks=DEFAULT_KS, threads: int = 1,
                  fusion: str = "prompt_guide", config_digest: str = "") -> MetricReport:
    rankings = task_rankings(params, cfg, task, threads=threads, fusion=fusion)
    truths = [task.truth[i] for i in range(len(task.queries))]
    recall = {int(k): recall_at_k(rankings, truths, int(k)) for k in ks}
    return MetricReport(
        task_kind=task.task_kind,
        k_values=[int(k) for k in ks],
        recall_at=recall,
        n_queries=len(task.queries),
        n_candidates=len(task.candidates),
        config_digest=config_digest,
    )


def run_fusion_ablation(params, cfg, task: BenchmarkTask, ks=DEFAULT_KS, threads: int = 1,
                        config_digest: str = "") -> dict[str, MetricReport]:
    """Evaluate identical queries under prompt-guided and simple-add fusion."""
    if task.task_kind not in COMPOSED_KINDS:
        raise ValueError(f"fusion ablation needs a composed task, got {task.task_kind}")
    return {
        "prompt_guide": evaluate_task(params, cfg, task, ks, threads, "prompt_guide", config_digest),
        "simple_add": evaluate_task(params, cfg, task, ks, threads, "simple_add", config_digest),
    }


def oracle_rankings(task: BenchmarkTask) -> list[list[int]]:
    """Perfect ranking: each query's truth indices first, rest after."""
    n = len(task.candidates)
    out = []
    for qi in range(len(task.queries)):
        ts = sorted(task.truth[qi])
        out.append(ts + [ci for ci in range(n) if ci not in task.truth[qi]])
    return out


def chance_level(task: BenchmarkTask) -> float:
    """Expected R@1 of a uniformly random ranking: mean(|truth| / n)."""
    n = len(task.candidates)
    return float(np.mean([len(task.truth[qi]) / n for qi in range(len(task.queries))]))


def zero_shot_classify(params, cfg, images: list[np.ndarray], class_names: list[str],
                       prompt_template: str = DEFAULT_PROMPT_TEMPLATE,
                       threads: int = 1) -> list[int]:
    """Nearest class-prompt embedding per image; ties break to the lowest
    class index."""
    if len(class_names) < 1:
        raise EmptyClassSet("need at least one class")
    class_embs = np.stack(
        parallel_map(
            lambda c: enc.encode(params, cfg,
                                 ComposedQuery([ModalityItem.text(prompt_template.format_map({"class": c}))])),
            class_names, threads=threads,
        )
    )
    img_embs = np.stack(
        parallel_map(
            lambda im: enc.encode(params, cfg, ComposedQuery([ModalityItem.image(im)])),
            images, threads=threads,
        )
    )
    return [int(i) for i in np.argmax(img_embs @ class_embs.T, axis=1)]


def weighted_accuracy(preds: list[int], labels: list[int], balanced: bool = False) -> float:
    """Support-weighted per-class accuracy (equals overall accuracy).

    balanced=True returns the unweighted mean of per-class accuracies
    instead.
    """
    if len(preds) != len(labels):
        raise LengthMismatch(f"{len(preds)} preds vs {len(labels)} labels")
    if len(preds) == 0:
        raise LengthMismatch("need at least one prediction")
    preds_a = np.asarray(preds)
    labels_a = np.asarray(labels)
    if not balanced:
        return float(np.mean(preds_a == labels_a))
    accs = []
    for c in np.unique(labels_a):
        mask = labels_a == c
        accs.append(float(np.mean(preds_a[mask] == c)))
    return float(np.mean(accs))


def modality_gap(image_embs, text_embs, projection_file: str = "") -> GapReport:
    """Euclidean distance between the two modality centroids."""
    x = np.asarray(image_embs, dtype=np.float64)
    y = np.asarray(text_embs, dtype=np.float64)
    if x.size == 0 or y.size == 0:
        raise EmptySet("both embedding sets must be non-empty")
    gap = float(np.linalg.norm(x.mean(axis=0) - y.mean(axis=0)))
    return GapReport(gap=gap, n_image=x.shape[0], n_text=y.shape[0],
                     projection_file=projection_file)


def pca_project(embs, out_dim: int = 2) -> np.ndarray:
    """Center and project onto the top principal directions.

    Sign convention: the first nonzero loading of each component is
    positive, so the projection is unique.
    """
    x = np.asarray(embs, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise DegenerateData("need at least two points to project")
    xc = x - x.mean(axis=0)
    if np.max(np.abs(xc)) < 1e-12:
        raise DegenerateData("all points identical")
    cov = xc.T @ xc / x.shape[0]
    eigvals, eigvecs = np.linalg.eigh(cov)
    comps = eigvecs[:, ::-1][:, :out_dim]
    for j in range(comps.shape[1]):
        col = comps[:, j]
        nz = np.nonzero(np.abs(col) > 1e-12)[0]
        if nz.size and col[nz[0]] < 0:
            comps[:, j] = -col
    return xc @ comps
