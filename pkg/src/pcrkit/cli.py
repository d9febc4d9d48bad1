"""Operator surface: subcommands chaining synthesis, filtering, training,
embedding, indexing, and evaluation into reproducible pipelines.

Standard output carries machine-readable JSON only; progress goes to
standard error. Every artifact-producing command writes a run manifest
(<output>.manifest.json) atomically before the output is finalized.
Exit codes: 0 success, 1 data error, 2 usage error.
"""

from __future__ import annotations

import argparse
import datetime
import json
import os
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import encoder as enc
from . import evalbench, retrieval
from .checkpoint import load_checkpoint, save_checkpoint
from .curation import FilterConfig, SynthSpec, filter_pairs, score_pairs, synth_dataset
from .data import (
    ComposedQuery,
    ModalityItem,
    TASK_KINDS,
    load_image,
    load_video,
    read_records,
    validate_records,
    write_records,
)
from .errors import PcrError
from .trainer import TrainConfig, train_stage
from .util import json_dumps, sha256_file, sha256_text

ARTIFACT_VERSIONS = {"checkpoint": 1, "index": 1, "embeddings": 1}


def _progress(msg: str) -> None:
    print(msg, file=sys.stderr)


def _emit(obj) -> None:
    sys.stdout.write(json_dumps(obj) + "\n")


def _atomic_write_text(path: Path, text: str) -> None:
    fd, tmp = tempfile.mkstemp(dir=str(path.parent), prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_manifest(out_path, argv: list[str], config: dict, seed, inputs: dict[str, str]) -> None:
    manifest = {
        "command": list(argv),
        "config": config,
        "seed": seed,
        "inputs": inputs,
        "artifact_versions": ARTIFACT_VERSIONS,
        "created_utc": datetime.datetime.now(datetime.timezone.utc).isoformat(),
    }
    _atomic_write_text(Path(str(out_path) + ".manifest.json"), json_dumps(manifest) + "\n")


def _load_config(path) -> dict:
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def _record_query(rec, base: Path) -> ComposedQuery:
    if rec.image_path:
        return ComposedQuery([ModalityItem.image(load_image(base / rec.image_path))])
    if rec.video_dir:
        return ComposedQuery([ModalityItem.video(load_video(base / rec.video_dir))])
    return ComposedQuery([ModalityItem.text(rec.text)])


# ---------------------------------------------------------------------------
# subcommands


def _cmd_synth(args) -> int:
    spec_dict = _load_config(args.spec)
    if args.seed is not None:
        spec_dict["seed"] = args.seed
    spec = SynthSpec.from_dict(spec_dict)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_manifest(out / "records.jsonl", args.argv, spec.to_dict(), spec.seed,
                   {"spec": sha256_file(args.spec)})
    records, sidecar = synth_dataset(spec, out)
    _progress(f"synth: wrote {len(records)} records to {out}")
    kinds: dict[str, int] = {}
    for s in sidecar:
        kinds[s["kind"]] = kinds.get(s["kind"], 0) + 1
    _emit({
        "n_records": len(records),
        "n_train": sum(1 for r in records if r.split == "train"),
        "n_test": sum(1 for r in records if r.split == "test"),
        "n_mismatched": sum(1 for s in sidecar if s["mismatched"]),
        "kinds": kinds,
        "out": str(out),
    })
    return 0


def _cmd_filter(args) -> int:
    if args.lam is not None and args.percentile is not None:
        raise PcrError("--lambda and --percentile are mutually exclusive")
    params, cfg, _ = load_checkpoint(args.ckpt)
    records = read_records(args.pairs)
    base = Path(args.pairs).parent
    problems = validate_records(records)
    if problems:
        raise PcrError("invalid records: " + "; ".join(problems[:5]))
    usable = [r for r in records if r.image_path and r.text]
    pairs = [(r, r) for r in usable]
    _progress(f"filter: scoring {len(pairs)} pairs")
    scores = score_pairs(params, cfg, pairs, base_dir=base, threads=args.threads)
    if args.lam is not None:
        fcfg = FilterConfig(mode="absolute", lam=args.lam)
    else:
        fcfg = FilterConfig(mode="percentile", percentile=args.percentile if args.percentile is not None else 20.0)
    retained, report = filter_pairs(pairs, scores, fcfg)
    write_manifest(args.out, args.argv, {"filter": fcfg.__dict__}, args.seed,
                   {"ckpt": sha256_file(args.ckpt), "pairs": sha256_file(args.pairs)})
    write_records([r for r, _ in retained], args.out)
    _emit(report)
    return 0


def _cmd_train(args) -> int:
    config = _load_config(args.config)
    enc_cfg = enc.EncoderConfig.from_dict(config.get("encoder", {}))
    train_dict = dict(config.get("train", {}))
    train_dict["stage"] = args.stage
    if args.seed is not None:
        train_dict["seed"] = args.seed
    cfg = TrainConfig.from_dict(train_dict)

    data_dir = Path(args.data)
    inputs = {"config": sha256_file(args.config)}
    if args.init:
        params, enc_cfg, _ = load_checkpoint(args.init)
        inputs["init"] = sha256_file(args.init)
    else:
        params = enc.init_params(enc_cfg, cfg.seed)

    if cfg.curriculum:
        records_by_phase = {}
        for phase in cfg.curriculum:
            path = data_dir / (phase.dataset or "train.jsonl")
            records_by_phase[phase.name] = read_records(path)
            inputs[f"data:{phase.name}"] = sha256_file(path)
        data = records_by_phase
    else:
        path = data_dir / "train.jsonl"
        data = read_records(path)
        inputs["data:train"] = sha256_file(path)

    _progress(f"train: stage {cfg.stage}, seed {cfg.seed}, batch {cfg.batch_size}")
    write_manifest(args.out, args.argv,
                   {"encoder": enc_cfg.to_dict(), "train": train_dict}, cfg.seed, inputs)
    params, log = train_stage(params, cfg, enc_cfg, data, base_dir=data_dir, threads=args.threads)
    save_checkpoint(args.out, params, enc_cfg, seed=cfg.seed)
    log.write_jsonl(str(args.out) + ".log.jsonl")
    _progress(f"train: {len(log.steps)} steps")
    _emit({
        "steps": len(log.steps),
        "epoch_means": log.epoch_means,
        "out": str(args.out),
    })
    return 0


def _cmd_embed(args) -> int:
    params, cfg, _ = load_checkpoint(args.ckpt)
    records = read_records(args.records)
    base = Path(args.records).parent
    _progress(f"embed: {len(records)} records")
    embs = [enc.encode(params, cfg, _record_query(r, base)) for r in records]
    write_manifest(args.out, args.argv, {"f64": bool(args.f64)}, args.seed,
                   {"ckpt": sha256_file(args.ckpt), "records": sha256_file(args.records)})
    retrieval.save_embeddings(args.out, [r.id for r in records], np.stack(embs), f64=args.f64)
    _emit({"n": len(records), "d": cfg.d, "out": str(args.out)})
    return 0


def _cmd_index(args) -> int:
    ids, mat = retrieval.load_embeddings(args.emb)
    index = retrieval.build_index(list(mat), ids)
    write_manifest(args.out, args.argv, {}, args.seed, {"emb": sha256_file(args.emb)})
    retrieval.save_index(index, args.out)
    _emit({"n": index.count, "d": index.dim, "out": str(args.out)})
    return 0


def _digest(*parts: str) -> str:
    return sha256_text("|".join(parts))[:16]


def _cmd_eval(args) -> int:
    params, cfg, _ = load_checkpoint(args.ckpt)
    data_dir = Path(args.data)
    records_path = data_dir / args.split_file
    records = read_records(records_path)
    ks = [int(k) for k in args.k.split(",") if k]
    digest = _digest(sha256_file(args.ckpt), sha256_file(records_path), args.task, args.k)

    if args.task == "tile_classification":
        task = evalbench.build_tasks(records, "tile_classification", base_dir=data_dir,
                                     prompt_template=args.prompt_template)
        images = [q.items[0].payload for q in task.queries]
        classes = [it.payload for it in task.candidates]
        class_names = sorted({r.class_label for r in records if r.image_path and r.class_label})
        preds = evalbench.zero_shot_classify(params, cfg, images, class_names,
                                             prompt_template=args.prompt_template,
                                             threads=args.threads)
        labels = [next(iter(task.truth[i])) for i in range(len(images))]
        report = {
            "task_kind": "tile_classification",
            "weighted_accuracy": evalbench.weighted_accuracy(preds, labels),
            "balanced_accuracy": evalbench.weighted_accuracy(preds, labels, balanced=True),
            "weighting": "support",
            "n_queries": len(images),
            "n_classes": len(classes),
            "config_digest": digest,
        }
        out_obj = report
    else:
        task = evalbench.build_tasks(records, args.task, base_dir=data_dir)
        fusions = {"prompt": ["prompt_guide"], "add": ["simple_add"],
                   "both": ["prompt_guide", "simple_add"]}[args.fusion]
        reports = {}
        for fusion in fusions:
            rep = evalbench.evaluate_task(params, cfg, task, ks, threads=args.threads,
                                          fusion=fusion, config_digest=digest)
            reports[fusion] = rep.to_dict()
        out_obj = reports[fusions[0]] if len(fusions) == 1 else reports

    if args.out:
        write_manifest(args.out, args.argv, {"task": args.task, "k": ks}, args.seed,
                       {"ckpt": sha256_file(args.ckpt), "records": sha256_file(records_path)})
        _atomic_write_text(Path(args.out), json_dumps(out_obj) + "\n")
    _emit(out_obj)
    return 0


def _cmd_gap(args) -> int:
    params, cfg, _ = load_checkpoint(args.ckpt)
    data_dir = Path(args.data)
    records_path = data_dir / args.split_file
    records = read_records(records_path)
    usable = [r for r in records if r.image_path and r.text]
    if not usable:
        raise PcrError("no image+text records for gap measurement")
    img_embs = np.stack([
        enc.encode(params, cfg, ComposedQuery([ModalityItem.image(load_image(data_dir / r.image_path))]))
        for r in usable
    ])
    seen = set()
    texts = [r.text for r in usable if not (r.text in seen or seen.add(r.text))]
    txt_embs = np.stack([
        enc.encode(params, cfg, ComposedQuery([ModalityItem.text(t)])) for t in texts
    ])
    projection_file = args.project or ""
    report = evalbench.modality_gap(img_embs, txt_embs, projection_file=projection_file)
    if args.project:
        coords = evalbench.pca_project(np.vstack([img_embs, txt_embs]))
        lines = ["id,x,y,modality"]
        for i, r in enumerate(usable):
            lines.append(f"{r.id},{coords[i, 0]!r},{coords[i, 1]!r},image")
        for j in range(len(texts)):
            c = coords[len(usable) + j]
            lines.append(f"t{j},{c[0]!r},{c[1]!r},text")
        write_manifest(args.project, args.argv, {}, args.seed,
                       {"ckpt": sha256_file(args.ckpt), "records": sha256_file(records_path)})
        _atomic_write_text(Path(args.project), "\n".join(lines) + "\n")
    _emit(report.to_dict())
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="override the config seed")
    common.add_argument("--threads", type=int, default=1, help="worker thread bound")
    common.add_argument("--f64", action="store_true", help="persist embeddings as float64")

    parser = argparse.ArgumentParser(prog="pcr", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic corpus")
    p.add_argument("--spec", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("filter", parents=[common], help="bootstrap-filter noisy pairs")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--pairs", required=True)
    p.add_argument("--lambda", dest="lam", type=float, default=None)
    p.add_argument("--percentile", type=float, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_filter)

    p = sub.add_parser("train", parents=[common], help="run one training stage")
    p.add_argument("--stage", type=int, required=True, choices=(1, 2))
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--init", default=None, help="checkpoint to start from")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("embed", parents=[common], help="embed records to a binary blob")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--records", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_embed)

    p = sub.add_parser("index", parents=[common], help="build an index from embeddings")
    p.add_argument("--emb", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_index)

    p = sub.add_parser("eval", parents=[common], help="evaluate a benchmark task")
    p.add_argument("--task", required=True, choices=TASK_KINDS)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--k", default="1,5,10")
    p.add_argument("--fusion", choices=("prompt", "add", "both"), default="prompt")
    p.add_argument("--split-file", default="test.jsonl")
    p.add_argument("--prompt-template", default=evalbench.DEFAULT_PROMPT_TEMPLATE)
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("gap", parents=[common], help="measure the modality gap")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split-file", default="test.jsonl")
    p.add_argument("--project", default=None, help="write 2-D PCA coordinates CSV")
    p.set_defaults(func=_cmd_gap)

    return parser


def run(argv: list[str]) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code is not None else 0
    args.argv = list(argv)
    try:
        return args.func(args)
    except PcrError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (OSError, json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
