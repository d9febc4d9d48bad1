"""Two-stage training loop with curriculum scheduling.

Stage 1 adapts the trunk for retrieval on text-to-text pairs with the
patch projection frozen; stage 2 unfreezes everything and runs the
phase curriculum on image-to-text pairs, optionally with per-sample
stain augmentation. Batching, pairing, and augmentation are all seeded,
so a run is a pure function of (initial params, config, data, seed).
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import encoder as enc
from .data import ComposedQuery, DatasetRecord, ModalityItem, load_image
from .errors import (
    BatchTooLarge,
    EmptyCurriculum,
    ModalityMismatch,
    NonFiniteLoss,
    ShapeMismatch,
)
from .objective import ContrastiveBatch, info_nce, info_nce_grad
from .stainlab import StainDistribution, fit_stain_distribution, randstain_augment
from .util import fnv1a64, parallel_map, seeded_rng

# Reference hyperparameters at full model scale; the desk-scale defaults
# below are what this artifact actually runs.
FULL_SCALE_REFERENCE = {
    "stage1": {"batch_size": 576, "learning_rate": 4e-5, "epochs": 2},
    "stage2": {"batch_size": 384, "learning_rate": 1e-4, "epochs": 2},
}

STAGE_DEFAULT_FREEZE = {1: frozenset({"patch_proj"}), 2: frozenset()}


@dataclass
class PhaseSpec:
    name: str
    dataset: str = ""
    epochs: int = 1
    stain_augment: bool = False

    @staticmethod
    def from_dict(d: dict) -> "PhaseSpec":
        return PhaseSpec(
            name=d["name"],
            dataset=d.get("dataset", ""),
            epochs=int(d.get("epochs", 1)),
            stain_augment=bool(d.get("stain_augment", False)),
        )


@dataclass
class TrainConfig:
    stage: int = 1
    batch_size: int = 32
    learning_rate: float = 1e-3
    epochs: int = 1
    seed: int = 0
    freeze_mask: Optional[frozenset] = None  # None -> stage default
    tau: float = 0.07
    curriculum: list[PhaseSpec] = field(default_factory=list)
    curriculum_mode: str = "progressive"

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ValueError(f"stage must be 1 or 2, got {self.stage}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.curriculum_mode not in ("progressive", "mixed"):
            raise ValueError(f"unknown curriculum_mode {self.curriculum_mode!r}")

    @property
    def frozen_groups(self) -> frozenset:
        if self.freeze_mask is not None:
            return frozenset(self.freeze_mask)
        return STAGE_DEFAULT_FREEZE[self.stage]

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        phases = [PhaseSpec.from_dict(p) for p in d.get("curriculum", [])]
        freeze = d.get("freeze_mask")
        return TrainConfig(
            stage=int(d.get("stage", 1)),
            batch_size=int(d.get("batch_size", 32)),
            learning_rate=float(d.get("learning_rate", 1e-3)),
            epochs=int(d.get("epochs", 1)),
            seed=int(d.get("seed", 0)),
            freeze_mask=frozenset(freeze) if freeze is not None else None,
            tau=float(d.get("tau", 0.07)),
            curriculum=phases,
            curriculum_mode=d.get("curriculum_mode", "progressive"),
        )


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @staticmethod
    def init(params: dict[str, np.ndarray]) -> "OptimizerState":
        return OptimizerState(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
        )


@dataclass
class TrainLog:
    steps: list[dict] = field(default_factory=list)
    epoch_means: list[dict] = field(default_factory=list)

    def write_jsonl(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for s in self.steps:
                f.write(json.dumps(s, sort_keys=True) + "\n")


@dataclass
class PlanEntry:
    """One schedulable unit: records, their stain flags, and a step budget."""

    name: str
    records: list[DatasetRecord]
    stain_flags: list[bool]
    epochs: float
    step_budget: int


def build_batches(records: list, batch_size: int, seed: int, epoch: int) -> list[list[int]]:
    """Seeded shuffle keyed by (seed, epoch); drops the final partial batch."""
    n = len(records)
    if batch_size > n:
        raise BatchTooLarge(f"batch_size {batch_size} exceeds {n} records")
    perm = seeded_rng(seed, epoch, "batch-shuffle").permutation(n)
    nb = n // batch_size
    return [perm[i * batch_size : (i + 1) * batch_size].tolist() for i in range(nb)]


def curriculum_plan(cfg: TrainConfig, records_by_phase: dict[str, list[DatasetRecord]]) -> list[PlanEntry]:
    """Resolve the curriculum into executable plan entries.

    Progressive mode keeps phases in declared order. Mixed mode merges
    everything into one seeded-shuffled union whose step budget equals
    the progressive total exactly, so both modes take identical numbers
    of optimizer steps on the same data.
    """
    if not cfg.curriculum:
        raise EmptyCurriculum("curriculum has no phases")
    entries = []
    for phase in cfg.curriculum:
        recs = records_by_phase[phase.name]
        budget = phase.epochs * (len(recs) // cfg.batch_size)
        entries.append(
            PlanEntry(
                name=phase.name,
                records=list(recs),
                stain_flags=[phase.stain_augment] * len(recs),
                epochs=float(phase.epochs),
                step_budget=budget,
            )
        )
    if cfg.curriculum_mode == "progressive" or len(entries) == 1:
        return entries
    union_records = [r for e in entries for r in e.records]
    union_flags = [f for e in entries for f in e.stain_flags]
    order = seeded_rng(cfg.seed, "mixed-union").permutation(len(union_records))
    total_budget = sum(e.step_budget for e in entries)
    per_epoch = len(union_records) // cfg.batch_size
    return [
        PlanEntry(
            name="mixed",
            records=[union_records[i] for i in order],
            stain_flags=[union_flags[i] for i in order],
            epochs=total_budget / per_epoch if per_epoch else 0.0,
            step_budget=total_budget,
        )
    ]


def adam_step(params: dict, grads: dict, state: OptimizerState, lr: float,
              frozen: frozenset = frozenset()):
    """Bias-corrected adaptive-moment update; frozen groups pass through
    untouched (same arrays, same moments)."""
    t = state.step + 1
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeMismatch(f"{name}: grad shape {g.shape} vs param {p.shape}")
        if enc.param_group(name) in frozen:
            new_params[name] = p
            new_m[name] = state.m[name]
            new_v[name] = state.v[name]
            continue
        m = state.beta1 * state.m[name] + (1 - state.beta1) * g
        v = state.beta2 * state.v[name] + (1 - state.beta2) * g * g
        mhat = m / (1 - state.beta1**t)
        vhat = v / (1 - state.beta2**t)
        new_params[name] = p - lr * mhat / (np.sqrt(vhat) + state.eps)
        new_m[name] = m
        new_v[name] = v
    return new_params, OptimizerState(
        m=new_m, v=new_v, step=t, beta1=state.beta1, beta2=state.beta2, eps=state.eps
    )


# ---------------------------------------------------------------------------
# pair construction


@dataclass
class _Pair:
    record_id: str
    positive_text: str
    query_text: Optional[str] = None
    query_image: Optional[np.ndarray] = None
    stain: bool = False


def _stage1_pairs(records: list[DatasetRecord], seed: int) -> list[_Pair]:
    """Text pairs: each record's text paired with a seeded same-class
    partner's text (its own text when the class is a singleton)."""
    usable = [r for r in records if r.text]
    if not usable:
        raise ModalityMismatch("stage 1 needs records with text")
    by_class: dict[Optional[str], list[int]] = {}
    for i, r in enumerate(usable):
        by_class.setdefault(r.class_label, []).append(i)
    partner = list(range(len(usable)))
    rng = seeded_rng(seed, "stage1-pairs")
    for cls, idxs in by_class.items():
        if cls is None or len(idxs) < 2:
            continue
        perm = rng.permutation(len(idxs))
        for j in range(len(idxs)):
            partner[idxs[perm[j]]] = idxs[perm[(j + 1) % len(idxs)]]
    return [
        _Pair(record_id=r.id, query_text=r.text, positive_text=usable[partner[i]].text)
        for i, r in enumerate(usable)
    ]


def _stage2_pairs(records: list[DatasetRecord], stain_flags: list[bool], base_dir) -> list[_Pair]:
    """Image->text pairs; relational records also contribute their
    (target image, relation text) pair."""
    base = Path(base_dir) if base_dir is not None else Path(".")
    cache: dict[str, np.ndarray] = {}

    def img(path):
        if path not in cache:
            cache[path] = load_image(base / path)
        return cache[path]

    pairs = []
    for r, flag in zip(records, stain_flags):
        if r.image_path and r.text:
            pairs.append(_Pair(r.id, r.text, query_image=img(r.image_path), stain=flag))
        if r.target_image_path and r.relation_text:
            pairs.append(
                _Pair(r.id + "#target", r.relation_text,
                      query_image=img(r.target_image_path), stain=flag)
            )
    if not pairs:
        raise ModalityMismatch("stage 2 needs records with both image and text")
    return pairs


def _pair_query(pair: _Pair, dist: Optional[StainDistribution], seed: int, epoch: int) -> ComposedQuery:
    if pair.query_text is not None:
        return ComposedQuery([ModalityItem.text(pair.query_text)])
    image = pair.query_image
    if pair.stain and dist is not None:
        image = randstain_augment(image, dist, fnv1a64(f"{seed}:{epoch}:{pair.record_id}"))
    return ComposedQuery([ModalityItem.image(image)])


# ---------------------------------------------------------------------------
# training


def _batch_loss_and_grads(params, enc_cfg, queries, positives, tau, threads=1):
    fwd = parallel_map(lambda q: enc.encode_with_cache(params, enc_cfg, q),
                       list(queries) + list(positives), threads=threads)
    b = len(queries)
    q_mat = np.stack([fwd[i][0] for i in range(b)])
    c_mat = np.stack([fwd[b + i][0] for i in range(b)])
    batch = ContrastiveBatch(q_mat, c_mat, tau)
    loss = info_nce(batch)
    gq, gc = info_nce_grad(batch)
    grads = enc.zero_grads(params)
    # fixed accumulation order (queries then positives, by batch index)
    for i in range(b):
        enc.backward(params, enc_cfg, fwd[i][1], gq[i], grads)
    for i in range(b):
        enc.backward(params, enc_cfg, fwd[b + i][1], gc[i], grads)
    return loss, grads


def train_stage(params: dict, cfg: TrainConfig, enc_cfg: enc.EncoderConfig, data,
                base_dir=None, threads: int = 1):
    """Run one training stage; returns (new params, TrainLog).

    data is either a list of records (implicit single phase using
    cfg.epochs) or a dict mapping phase name -> records matching
    cfg.curriculum.
    """
    if isinstance(data, dict):
        records_by_phase = data
        plan_cfg = cfg
    else:
        phase = PhaseSpec(name="main", epochs=cfg.epochs,
                          stain_augment=any(p.stain_augment for p in cfg.curriculum))
        records_by_phase = {"main": list(data)}
        plan_cfg = TrainConfig(
            stage=cfg.stage, batch_size=cfg.batch_size, learning_rate=cfg.learning_rate,
            epochs=cfg.epochs, seed=cfg.seed, freeze_mask=cfg.freeze_mask, tau=cfg.tau,
            curriculum=[phase], curriculum_mode="progressive",
        )
    plan = curriculum_plan(plan_cfg, records_by_phase)
    frozen = cfg.frozen_groups
    state = OptimizerState.init(params)
    log = TrainLog()
    step = 0

    for entry in plan:
        if entry.step_budget <= 0:
            continue
        if cfg.stage == 1:
            pairs = _stage1_pairs(entry.records, cfg.seed)
        else:
            pairs = _stage2_pairs(entry.records, entry.stain_flags, base_dir)
        dist = None
        if cfg.stage == 2 and any(p.stain for p in pairs):
            dist = fit_stain_distribution(
                [p.query_image for p in pairs if p.stain and p.query_image is not None]
            )
        consumed = 0
        epoch = 0
        while consumed < entry.step_budget:
            batches = build_batches(pairs, cfg.batch_size, cfg.seed, epoch)
            for batch_ids in batches:
                if consumed >= entry.step_budget:
                    break
                t0 = time.perf_counter()
                queries = [_pair_query(pairs[i], dist, cfg.seed, epoch) for i in batch_ids]
                positives = [
                    ComposedQuery([ModalityItem.text(pairs[i].positive_text)]) for i in batch_ids
                ]
                loss, grads = _batch_loss_and_grads(
                    params, enc_cfg, queries, positives, cfg.tau, threads=threads
                )
                if not np.isfinite(loss):
                    raise NonFiniteLoss(step, loss)
                params, state = adam_step(params, grads, state, cfg.learning_rate, frozen=frozen)
                log.steps.append(
                    {
                        "step": step,
                        "phase": entry.name,
                        "epoch": epoch,
                        "loss": float(loss),
                        "lr": cfg.learning_rate,
                        "wall_ms": round((time.perf_counter() - t0) * 1e3, 3),
                    }
                )
                step += 1
                consumed += 1
            epoch += 1

    seen = {}
    for s in log.steps:
        seen.setdefault((s["phase"], s["epoch"]), []).append(s["loss"])
    log.epoch_means = [
        {"phase": ph, "epoch": ep, "mean_loss": float(np.mean(ls))}
        for (ph, ep), ls in sorted(seen.items(), key=lambda kv: (kv[0][0], kv[0][1]))
    ]
    return params, log


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(params: dict, enc_cfg: enc.EncoderConfig, queries, positives,
               h: float = 1e-5, tau: float = 0.07, samples_per_group: int = 200,
               seed: int = 0) -> float:
    """Max relative error between analytic end-to-end gradients and central
    finite differences over a random subsample of parameters per group."""
    seqs = [enc.assemble_sequence(q, enc_cfg) for q in list(queries) + list(positives)]
    b = len(queries)

    def total_loss():
        embs = [enc.forward(params, enc_cfg, s)[0] for s in seqs]
        return info_nce(ContrastiveBatch(np.stack(embs[:b]), np.stack(embs[b:]), tau))

    _, grads = _batch_loss_and_grads(params, enc_cfg, queries, positives, tau)

    rng = seeded_rng(seed, "grad-check")
    worst = 0.0
    by_group: dict[str, list[str]] = {}
    for name in params:
        by_group.setdefault(enc.param_group(name), []).append(name)
    for group in sorted(by_group):
        names = by_group[group]
        sizes = np.array([params[n].size for n in names])
        total = int(sizes.sum())
        take = min(samples_per_group, total)
        flat_choice = rng.choice(total, size=take, replace=False)
        bounds = np.cumsum(sizes)
        for flat in sorted(flat_choice.tolist()):
            slot = int(np.searchsorted(bounds, flat, side="right"))
            name = names[slot]
            idx = flat - (bounds[slot - 1] if slot else 0)
            arr = params[name]
            orig = arr.flat[idx]
            arr.flat[idx] = orig + h
            lp = total_loss()
            arr.flat[idx] = orig - h
            lm = total_loss()
            arr.flat[idx] = orig
            numeric = (lp - lm) / (2 * h)
            analytic = grads[name].flat[idx]
            # the 1e-5 floor keeps structurally-zero gradients (pure
            # finite-difference noise) from dominating the relative error
            err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-5)
            worst = max(worst, err)
    return worst
