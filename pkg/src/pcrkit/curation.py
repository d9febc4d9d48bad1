"""Dataset ingestion, pair filtering, and the synthetic corpus generator.

The generator renders class-separable procedural textures (blob density,
blob radius, anisotropy) on a tissue-pink base with a per-image stain
tint, and emits every record shape the benchmark needs: plain captioned
images, multi-image groups sharing a caption, relational zoom pairs,
question/answer records, and jittered-crop videos. Texture levels for
distinct classes sit 10 generator-noise stds apart, so a correct
pipeline can reach high recall. A hidden truth sidecar (match flags,
class, group topology) is written for tests only.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import encoder as enc
from .data import ComposedQuery, DatasetRecord, ModalityItem, load_image, save_image, write_records
from .errors import InvalidSpec, LengthMismatch
from .stainlab import lab_to_rgb, rgb_to_lab
from .util import parallel_map, seeded_rng

CLASS_WORDS = [
    "acinar", "papillary", "cribriform", "lepidic",
    "micropapillary", "solid", "tubular", "mucinous",
    "clear-cell", "sarcomatoid", "medullary", "serrated",
]

DEFAULT_CAPTION_TEMPLATES = [
    "an h&e image of {cls} tissue showing {attrs}",
    "photomicrograph of {cls} architecture with {attrs}",
    "histology section demonstrating {cls} growth, {attrs}",
]

QA_QUESTION = "what growth pattern and texture does this field show?"

_COVERAGE_RANGE = (0.10, 0.55)  # fraction of area under blobs
_RADIUS_RANGE = (1.4, 3.6)
_ANISO_RANGE = (1.0, 3.0)
# per-class jitter std = level spacing / 10, i.e. classes sit 10 stds apart
_JITTER_DIVISOR = 10.0

_BASE_PINK = np.array([236.0, 205.0, 216.0])
_BLOB_PURPLE = np.array([96.0, 61.0, 135.0])

_DENSITY_WORDS = ["sparse", "moderately cellular", "densely cellular"]
_RADIUS_WORDS = ["fine", "medium", "coarse"]
_ANISO_WORDS = ["rounded", "ovoid", "spindled"]


@dataclass
class SynthSpec:
    n_records: int = 640
    n_classes: int = 8
    image_size: tuple = (28, 44)  # (min, max) pixels per side, native resolution
    caption_templates: list[str] = field(default_factory=lambda: list(DEFAULT_CAPTION_TEMPLATES))
    multi_image_fraction: float = 0.15
    relational_fraction: float = 0.15
    video_fraction: float = 0.10
    qa_fraction: float = 0.15
    noise_fraction: float = 0.0
    test_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        fracs = (self.multi_image_fraction, self.relational_fraction,
                 self.video_fraction, self.qa_fraction, self.noise_fraction)
        if any(f < 0 or f > 1 for f in fracs):
            raise InvalidSpec("fractions must lie in [0, 1]")
        if self.multi_image_fraction + self.relational_fraction + self.video_fraction + self.qa_fraction > 1 + 1e-9:
            raise InvalidSpec("specialized fractions must sum to <= 1")
        if not (0 <= self.test_fraction < 1):
            raise InvalidSpec("test_fraction must be in [0, 1)")
        if self.n_records < max(1, self.n_classes):
            raise InvalidSpec("n_records must cover every class at least once")
        if self.n_classes < 1:
            raise InvalidSpec("need at least one class")
        lo, hi = self.image_size
        if lo < 8 or hi < lo:
            raise InvalidSpec("image_size must satisfy 8 <= min <= max")
        if not self.caption_templates:
            raise InvalidSpec("need at least one caption template")

    def to_dict(self) -> dict:
        d = self.__dict__.copy()
        d["image_size"] = list(self.image_size)
        return d

    @staticmethod
    def from_dict(d: dict) -> "SynthSpec":
        d = dict(d)
        if "image_size" in d:
            d["image_size"] = tuple(d["image_size"])
        return SynthSpec(**d)


# ---------------------------------------------------------------------------
# class vocabulary and textures


def class_word(c: int) -> str:
    if c < len(CLASS_WORDS):
        return CLASS_WORDS[c]
    return f"pattern-{c}"


def class_texture(c: int, n_classes: int):
    """(coverage, radius, anisotropy, jitter stds) for class c.

    Classes index a mixed-radix grid over the three texture factors;
    level spacing is 10x the per-record jitter std on each factor.
    """
    levels = max(2, math.ceil(n_classes ** (1.0 / 3.0))) if n_classes > 1 else 1
    values = []
    sigmas = []
    for fi, (lo, hi) in enumerate((_COVERAGE_RANGE, _RADIUS_RANGE, _ANISO_RANGE)):
        level = (c // levels**fi) % levels if levels > 1 else 0
        grid = np.linspace(lo, hi, levels) if levels > 1 else np.array([(lo + hi) / 2])
        spacing = (hi - lo) / (levels - 1) if levels > 1 else (hi - lo)
        values.append(float(grid[level]))
        sigmas.append(spacing / _JITTER_DIVISOR)
    return values[0], values[1], values[2], tuple(sigmas)


def class_attrs(c: int, n_classes: int) -> str:
    levels = max(2, math.ceil(n_classes ** (1.0 / 3.0))) if n_classes > 1 else 1
    words = []
    for fi, vocab in enumerate((_DENSITY_WORDS, _RADIUS_WORDS, _ANISO_WORDS)):
        level = (c // levels**fi) % levels if levels > 1 else 0
        scaled = min(len(vocab) - 1, level * (len(vocab) - 1) // max(1, levels - 1))
        words.append(vocab[scaled])
    return f"{words[0]}, {words[1]} granularity, {words[2]} contours"


def class_caption(spec: SynthSpec, c: int) -> str:
    tpl = spec.caption_templates[c % len(spec.caption_templates)]
    return tpl.format(cls=class_word(c), attrs=class_attrs(c, spec.n_classes))


def class_answer(spec: SynthSpec, c: int) -> str:
    return f"the field demonstrates {class_word(c)} morphology with {class_attrs(c, spec.n_classes)}"


def class_relation(spec: SynthSpec, c: int) -> str:
    return f"a magnified view of the {class_word(c)} region"


def render_texture(rng: np.random.Generator, h: int, w: int,
                   coverage: float, radius: float, aniso: float) -> np.ndarray:
    """Blob texture on a pink base; all draws come from rng.

    coverage is the (approximate) fraction of area under blobs, so blob
    count adapts to blob size; anisotropic blobs stream coherently along
    a near-horizontal axis, which keeps elongation statistically visible.
    """
    img = np.clip(
        _BASE_PINK + rng.normal(0.0, 2.0, size=(h, w, 3)), 0, 255
    )
    sx = radius * aniso  # major axis along x: "streaming" texture
    sy = max(0.75, radius / aniso)  # keep the minor axis resolvable
    n_blobs = max(1, int(round(coverage * h * w / (2.0 * math.pi * sx * sy))))
    ext = int(math.ceil(3.0 * max(sy, sx))) + 1
    for _ in range(n_blobs):
        cy = rng.uniform(0, h)
        cx = rng.uniform(0, w)
        theta = rng.normal(0.0, 0.18)
        y0, y1 = max(0, int(cy) - ext), min(h, int(cy) + ext + 1)
        x0, x1 = max(0, int(cx) - ext), min(w, int(cx) + ext + 1)
        yy, xx = np.mgrid[y0:y1, x0:x1]
        dy, dx = yy - cy, xx - cx
        u = dx * math.cos(theta) + dy * math.sin(theta)
        v = -dx * math.sin(theta) + dy * math.cos(theta)
        mask = 0.85 * np.exp(-0.5 * ((u / sx) ** 2 + (v / sy) ** 2))
        img[y0:y1, x0:x1] = img[y0:y1, x0:x1] * (1 - mask[..., None]) + _BLOB_PURPLE * mask[..., None]
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def _stain_tint(rng: np.random.Generator, img: np.ndarray) -> np.ndarray:
    shift = rng.normal(0.0, [2.5, 5.0, 5.0])
    return lab_to_rgb(rgb_to_lab(img) + shift)


def _magnified_center(img: np.ndarray) -> np.ndarray:
    h, w = img.shape[:2]
    ch, cw = max(4, h // 2), max(4, w // 2)
    y0, x0 = (h - ch) // 2, (w - cw) // 2
    crop = img[y0 : y0 + ch, x0 : x0 + cw]
    return np.repeat(np.repeat(crop, 2, axis=0), 2, axis=1)


# ---------------------------------------------------------------------------
# generation plan


@dataclass
class _Unit:
    kind: str  # plain | multi | relational | video | qa
    size: int
    class_idx: int
    group_id: str | None = None


def _plan_units(spec: SynthSpec, rng: np.random.Generator) -> list[_Unit]:
    n = spec.n_records
    n_multi = int(spec.multi_image_fraction * n)
    n_rel = int(spec.relational_fraction * n)
    n_vid = int(spec.video_fraction * n)
    n_qa = int(spec.qa_fraction * n)

    units: list[_Unit] = []
    remaining = n_multi
    gi = 0
    while remaining >= 2:
        size = int(rng.integers(2, 4))
        if remaining - size == 1:
            size = remaining
        size = min(size, remaining, 3)
        units.append(_Unit("multi", size, -1, group_id=f"g{gi:04d}"))
        gi += 1
        remaining -= size
    # leftover multi slots (below the minimum group size) fall back to plain
    n_plain = n - (n_multi - remaining) - n_rel - n_vid - n_qa
    if n_plain < 0:
        raise InvalidSpec("specialized fractions leave no room for plain records")
    units += [_Unit("relational", 1, -1) for _ in range(n_rel)]
    units += [_Unit("video", 1, -1) for _ in range(n_vid)]
    units += [_Unit("qa", 1, -1) for _ in range(n_qa)]
    units += [_Unit("plain", 1, -1) for _ in range(n_plain)]

    # balanced class assignment: each unit takes the least-loaded class
    counts = [0] * spec.n_classes
    for u in units:
        c = counts.index(min(counts))
        u.class_idx = c
        counts[c] += u.size
    return units


def _assign_splits(spec: SynthSpec, units: list[_Unit], rng: np.random.Generator) -> dict[int, str]:
    """Unit index -> split, stratified by class and exact in total."""
    n = spec.n_records
    n_test = int(round(spec.test_fraction * n))
    by_class: dict[int, list[int]] = {}
    for ui, u in enumerate(units):
        by_class.setdefault(u.class_idx, []).append(ui)
    class_sizes = {c: sum(units[ui].size for ui in idxs) for c, idxs in by_class.items()}
    # largest-remainder apportionment of the test quota
    raw = {c: spec.test_fraction * class_sizes[c] for c in by_class}
    quota = {c: int(raw[c]) for c in by_class}
    leftovers = sorted(by_class, key=lambda c: (-(raw[c] - quota[c]), c))
    short = n_test - sum(quota.values())
    for c in leftovers[: max(0, short)]:
        quota[c] += 1

    split: dict[int, str] = {}
    for c in sorted(by_class):
        idxs = list(by_class[c])
        order = rng.permutation(len(idxs))
        remaining = quota[c]
        for oi in order:
            ui = idxs[oi]
            if units[ui].size <= remaining:
                split[ui] = "test"
                remaining -= units[ui].size
            else:
                split[ui] = "train"
        if remaining != 0:
            raise InvalidSpec(
                f"cannot satisfy exact test quota for class {c} (short by {remaining})"
            )
    return split


def synth_dataset(spec: SynthSpec, out_dir) -> tuple[list[DatasetRecord], list[dict]]:
    """Generate the corpus under out_dir; returns (records, truth sidecar).

    Writes images/, videos/, train.jsonl, test.jsonl, the per-phase files
    train_morphology.jsonl (plain/multi/video) and train_diagnostic.jsonl
    (qa/relational), and truth.jsonl.
    """
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    plan_rng = seeded_rng(spec.seed, "plan")
    units = _plan_units(spec, plan_rng)
    split = _assign_splits(spec, units, plan_rng)

    records: list[DatasetRecord] = []
    sidecar: list[dict] = []
    pad = max(4, len(str(spec.n_records)))
    ridx = 0

    for ui, unit in enumerate(units):
        c = unit.class_idx
        coverage, radius, aniso, sig = class_texture(c, spec.n_classes)
        rng = seeded_rng(spec.seed, "render", ui)
        d = max(0.02, rng.normal(coverage, sig[0]))
        r = max(0.6, rng.normal(radius, sig[1]))
        a = max(1.0, rng.normal(aniso, sig[2]))
        lo, hi = spec.image_size
        h = int(rng.integers(lo, hi + 1))
        w = int(rng.integers(lo, hi + 1))
        caption = class_caption(spec, c)

        if unit.kind == "multi":
            base = render_texture(rng, h + 8, w + 8, d, r, a)
            for _ in range(unit.size):
                oy, ox = int(rng.integers(0, 9)), int(rng.integers(0, 9))
                variant = _stain_tint(rng, base[oy : oy + h, ox : ox + w])
                rid = f"r{ridx:0{pad}d}"
                path = f"images/{rid}.png"
                save_image(variant, out / path)
                records.append(DatasetRecord(
                    id=rid, image_path=path, text=caption, group_id=unit.group_id,
                    class_label=class_word(c), split=split[ui],
                ))
                sidecar.append({"id": rid, "kind": "multi", "true_class": class_word(c),
                                "caption_class": class_word(c), "mismatched": False,
                                "group_id": unit.group_id})
                ridx += 1
            continue

        img = _stain_tint(rng, render_texture(rng, h, w, d, r, a))
        rid = f"r{ridx:0{pad}d}"
        path = f"images/{rid}.png"

        if unit.kind == "video":
            n_frames = int(rng.integers(4, 7))
            base = render_texture(rng, h + 10, w + 10, d, r, a)
            tint_rng_state = rng.normal(0.0, [2.5, 5.0, 5.0])
            vdir = f"videos/{rid}"
            (out / vdir).mkdir(parents=True, exist_ok=True)
            for fi in range(n_frames):
                oy, ox = int(rng.integers(0, 11)), int(rng.integers(0, 11))
                frame = lab_to_rgb(rgb_to_lab(base[oy : oy + h, ox : ox + w]) + tint_rng_state)
                save_image(frame, out / vdir / f"f{fi:02d}.png")
            records.append(DatasetRecord(
                id=rid, video_dir=vdir, text=caption,
                class_label=class_word(c), split=split[ui],
            ))
            sidecar.append({"id": rid, "kind": "video", "true_class": class_word(c),
                            "caption_class": class_word(c), "mismatched": False,
                            "group_id": None})
            ridx += 1
            continue

        save_image(img, out / path)
        if unit.kind == "plain":
            rec = DatasetRecord(id=rid, image_path=path, text=caption,
                                class_label=class_word(c), split=split[ui])
        elif unit.kind == "qa":
            rec = DatasetRecord(id=rid, image_path=path, text=class_answer(spec, c),
                                relation_text=QA_QUESTION,
                                class_label=class_word(c), split=split[ui])
        elif unit.kind == "relational":
            target = _magnified_center(img)
            tpath = f"images/{rid}_target.png"
            save_image(target, out / tpath)
            rec = DatasetRecord(id=rid, image_path=path, text=caption,
                                relation_text=class_relation(spec, c),
                                target_image_path=tpath,
                                class_label=class_word(c), split=split[ui])
        else:  # pragma: no cover
            raise InvalidSpec(f"unknown unit kind {unit.kind}")
        records.append(rec)
        sidecar.append({"id": rid, "kind": unit.kind, "true_class": class_word(c),
                        "caption_class": class_word(c), "mismatched": False,
                        "group_id": None})
        ridx += 1

    _inject_noise(spec, records, sidecar)

    by_id = {s["id"]: s for s in sidecar}
    train = [r for r in records if r.split == "train"]
    test = [r for r in records if r.split == "test"]
    morpho = [r for r in train if by_id[r.id]["kind"] in ("plain", "multi", "video")]
    diag = [r for r in train if by_id[r.id]["kind"] in ("qa", "relational")]
    write_records(records, out / "records.jsonl")
    write_records(train, out / "train.jsonl")
    write_records(test, out / "test.jsonl")
    write_records(morpho, out / "train_morphology.jsonl")
    write_records(diag, out / "train_diagnostic.jsonl")
    with open(out / "truth.jsonl", "w", encoding="utf-8") as f:
        for s in sidecar:
            f.write(json.dumps(s, sort_keys=True) + "\n")
    with open(out / "synth_spec.json", "w", encoding="utf-8") as f:
        json.dump(spec.to_dict(), f, sort_keys=True, indent=2)
    return records, sidecar


def _inject_noise(spec: SynthSpec, records: list[DatasetRecord], sidecar: list[dict]) -> None:
    """Swap captions of exactly round(noise_fraction * n) non-group records."""
    k = int(round(spec.noise_fraction * spec.n_records))
    if k == 0:
        return
    if spec.n_classes < 2:
        raise InvalidSpec("noise injection needs >= 2 classes")
    eligible = [i for i, r in enumerate(records) if r.group_id is None and r.text]
    if k > len(eligible):
        raise InvalidSpec(f"noise_fraction needs {k} non-group records, have {len(eligible)}")
    rng = seeded_rng(spec.seed, "noise")
    chosen = rng.choice(len(eligible), size=k, replace=False)
    for j in sorted(chosen.tolist()):
        i = eligible[j]
        rec, side = records[i], sidecar[i]
        true_c = CLASS_WORDS.index(side["true_class"]) if side["true_class"] in CLASS_WORDS else 0
        wrong = (true_c + 1 + int(rng.integers(0, spec.n_classes - 1))) % spec.n_classes
        if side["kind"] == "qa":
            rec.text = class_answer(spec, wrong)
        else:
            rec.text = class_caption(spec, wrong)
        side["caption_class"] = class_word(wrong)
        side["mismatched"] = True


def read_sidecar(path) -> list[dict]:
    with open(path, "r", encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


# ---------------------------------------------------------------------------
# bootstrap filtering


@dataclass
class FilterConfig:
    mode: str = "percentile"  # absolute | percentile
    lam: float = 0.0
    percentile: float = 20.0

    def __post_init__(self):
        if self.mode not in ("absolute", "percentile"):
            raise InvalidSpec(f"unknown filter mode {self.mode!r}")
        if self.mode == "percentile" and not (0 < self.percentile < 100):
            raise InvalidSpec("percentile must lie in (0, 100)")


def score_pairs(params: dict, enc_cfg: enc.EncoderConfig,
                pairs: list[tuple[DatasetRecord, DatasetRecord]],
                base_dir=None, threads: int = 1) -> list[float]:
    """Alignment score per (image record, text record) pair: cosine of the
    two single-item embeddings."""
    base = Path(base_dir) if base_dir is not None else Path(".")

    def one(pair):
        img_rec, txt_rec = pair
        e_img = enc.encode(params, enc_cfg,
                           ComposedQuery([ModalityItem.image(load_image(base / img_rec.image_path))]))
        e_txt = enc.encode(params, enc_cfg, ComposedQuery([ModalityItem.text(txt_rec.text)]))
        return float(e_img @ e_txt)

    return parallel_map(one, pairs, threads=threads)


def filter_pairs(pairs: list, scores: list[float], cfg: FilterConfig):
    """Retain pairs with score >= lambda; returns (retained, report).

    In percentile mode lambda is the p-th percentile of the scores.
    """
    if len(pairs) != len(scores):
        raise LengthMismatch(f"{len(pairs)} pairs vs {len(scores)} scores")
    scores_arr = np.asarray(scores, dtype=np.float64)
    lam = float(np.percentile(scores_arr, cfg.percentile)) if cfg.mode == "percentile" else cfg.lam
    keep = scores_arr >= lam
    retained = [p for p, k in zip(pairs, keep) if k]
    hist, edges = np.histogram(scores_arr, bins=20, range=(-1.0, 1.0))
    report = {
        "mode": cfg.mode,
        "lambda_used": lam,
        "n_input": len(pairs),
        "n_retained": len(retained),
        "histogram": {"counts": hist.tolist(), "edges": edges.tolist()},
    }
    return retained, report
