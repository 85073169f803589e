"""Batch front-end: generate data, train a variant, evaluate, analyze.

Machine-readable output is single-line JSON on stdout; human logs go to
stderr. Exit codes: 0 success, 2 config/input error, 3 missing required
input, 4 numeric failure. RUN_THREADS caps BLAS parallelism when set.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time

import numpy as np

from . import __version__, datagen, encoders, geometry, retrieval, trainer
from .errors import DeskclipError, InvalidConfig, MissingInput, SpecInvalid
from .objectives import VARIANTS, ObjectiveConfig
from .trainer import TrainConfig


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


def _emit(obj: dict) -> None:
    print(json.dumps(obj), flush=True)


def _limit_threads() -> None:
    value = os.environ.get("RUN_THREADS")
    if not value:
        return
    try:
        n = max(1, int(value))
    except ValueError:
        raise InvalidConfig(f"RUN_THREADS must be an integer, got {value!r}")
    try:
        import threadpoolctl

        threadpoolctl.threadpool_limits(n)
    except ImportError:
        _log("RUN_THREADS set but threadpoolctl is unavailable; ignoring")


def _load_json_file(path: str, what: str) -> dict:
    if not os.path.exists(path):
        raise MissingInput(f"{what} file not found: {path}")
    with open(path, encoding="utf-8") as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as exc:
            raise InvalidConfig(f"{path}: invalid JSON: {exc.msg}")


def _require(path: str, what: str) -> str:
    if not os.path.exists(path):
        raise MissingInput(f"{what} not found: {path}")
    return path


# ---------------------------------------------------------------------------
# gen
# ---------------------------------------------------------------------------

def cmd_gen(args) -> int:
    spec_obj = _load_json_file(args.spec, "generator spec")
    try:
        spec = datagen.GenSpec.from_json(spec_obj)
    except TypeError as exc:
        raise SpecInvalid(str(exc))
    os.makedirs(args.out, exist_ok=True)

    train, val, classes = datagen.generate(spec)
    nli = datagen.generate_nli(spec, train)

    everything = train + val
    everything.sort(key=lambda r: r.id)
    datagen.write_pairs(os.path.join(args.out, "pairs.jsonl"), everything)
    datagen.write_split(os.path.join(args.out, "split.json"), train, val)
    datagen.write_nli(os.path.join(args.out, "nli.jsonl"), nli)
    datagen.write_classes(os.path.join(args.out, "classes.txt"), classes)
    datagen.write_prompts(
        os.path.join(args.out, "prompts.txt"), datagen.DEFAULT_PROMPT_TEMPLATES
    )

    per_class: dict[str, int] = {}
    for r in everything:
        per_class[r.class_label] = per_class.get(r.class_label, 0) + 1
    _log(f"wrote {len(everything)} records to {args.out}")
    _emit(
        {
            "train": len(train),
            "val": len(val),
            "nli": len(nli),
            "classes": len(classes),
            "per_class": per_class,
        }
    )
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def _load_dataset(data_dir: str):
    pairs_path = _require(os.path.join(data_dir, "pairs.jsonl"), "pairs.jsonl")
    split_path = _require(os.path.join(data_dir, "split.json"), "split.json")
    records = datagen.load_pairs(pairs_path)
    train_ids, val_ids = datagen.load_split(split_path)
    by_id = {r.id: r for r in records}
    missing = [i for i in (*train_ids, *val_ids) if i not in by_id]
    if missing:
        raise InvalidConfig(f"split references unknown ids, e.g. {missing[0]!r}")
    return [by_id[i] for i in train_ids], [by_id[i] for i in val_ids]


def _train_config_from_json(obj: dict, args) -> TrainConfig:
    objective = obj.pop("objective", {})
    if isinstance(objective, str):
        objective = {"variant": objective}
    if args.variant is not None:
        if args.variant not in VARIANTS:
            raise InvalidConfig(
                f"unknown variant {args.variant!r}; expected one of {', '.join(VARIANTS)}"
            )
        objective["variant"] = args.variant
        objective.pop("sentence_corpus", None)
    if args.seed is not None:
        obj["seed"] = args.seed
    known = set(TrainConfig.__dataclass_fields__)
    extra = set(obj) - known
    if extra:
        raise InvalidConfig(f"unknown training fields: {', '.join(sorted(extra))}")
    try:
        return TrainConfig(objective=ObjectiveConfig(**objective), **obj)
    except TypeError as exc:
        raise InvalidConfig(str(exc))


def _config_dict(config: TrainConfig) -> dict:
    out = {}
    for name in TrainConfig.__dataclass_fields__:
        value = getattr(config, name)
        if name == "objective":
            value = {k: getattr(value, k) for k in ObjectiveConfig.__dataclass_fields__}
        elif isinstance(value, tuple):
            value = list(value)
        out[name] = value
    return out


def _run_id(resolved: dict) -> str:
    digest = hashlib.sha256(json.dumps(resolved, sort_keys=True).encode()).hexdigest()
    return digest[:12]


def cmd_train(args) -> int:
    started = time.time()
    config_obj = _load_json_file(args.config, "train config")
    config = _train_config_from_json(config_obj, args)
    train_recs, val_recs = _load_dataset(args.data)

    needs_nli = config.objective.variant.endswith(("n", "e"))
    nli = None
    if needs_nli:
        nli_path = os.path.join(args.data, "nli.jsonl")
        if not os.path.exists(nli_path):
            raise MissingInput(
                f"variant {config.objective.variant} requires {nli_path}"
            )
        nli = datagen.load_nli(nli_path)

    os.makedirs(args.out, exist_ok=True)
    resolved = _config_dict(config)
    run_id = _run_id(resolved)

    _log(
        f"training {config.objective.variant} seed={config.seed} "
        f"on {len(train_recs)} pairs ({len(val_recs)} val)"
    )
    result = trainer.train(config, train_recs, val_recs, nli)

    for model in (result.best_model, result.final_model):
        model.meta = {
            "run_id": run_id,
            "variant": config.objective.variant,
            "seed": config.seed,
        }
    encoders.atomic_write_text(
        os.path.join(args.out, "config.json"), json.dumps(resolved) + "\n"
    )
    encoders.atomic_write_text(
        os.path.join(args.out, "history.jsonl"),
        "".join(json.dumps(e) + "\n" for e in result.history),
    )
    encoders.atomic_write_text(
        os.path.join(args.out, "train_log.jsonl"),
        "".join(json.dumps(e) + "\n" for e in result.train_log),
    )
    encoders.save_checkpoint(result.best_model, os.path.join(args.out, "best.ckpt.json"))
    encoders.save_checkpoint(result.final_model, os.path.join(args.out, "final.ckpt.json"))

    manifest = {
        "run_id": run_id,
        "tool_version": __version__,
        "command": "train",
        "data_dir": os.path.abspath(args.data),
        "out_dir": os.path.abspath(args.out),
        "config": resolved,
        "artifacts": {
            "config": "config.json",
            "history": "history.jsonl",
            "train_log": "train_log.jsonl",
            "best_checkpoint": "best.ckpt.json",
            "final_checkpoint": "final.ckpt.json",
        },
        "started_at": started,
        "wall_seconds": time.time() - started,
    }
    encoders.atomic_write_text(
        os.path.join(args.out, "manifest.json"), json.dumps(manifest) + "\n"
    )

    best = result.best_entry or {}
    _emit(
        {
            "run_id": run_id,
            "variant": config.objective.variant,
            "seed": config.seed,
            "steps": len(result.train_log),
            "best_step": best.get("step"),
            "val_text_r1": best.get("val_text_r1"),
            "val_other_r1": best.get("val_other_r1"),
            "val_score": best.get("score"),
        }
    )
    return 0


# ---------------------------------------------------------------------------
# eval / analyze
# ---------------------------------------------------------------------------

def _records_for_split(args) -> list[datagen.PairedRecord]:
    train_recs, val_recs = _load_dataset(args.data)
    return {"train": train_recs, "val": val_recs, "all": train_recs + val_recs}[args.split]


def _check_dims(model: encoders.Model, records) -> None:
    feat_dim = len(records[0].features)
    if feat_dim != model.feat_mlp.in_dim:
        raise InvalidConfig(
            f"checkpoint expects feature dim {model.feat_mlp.in_dim}, "
            f"data has dim {feat_dim}"
        )


def cmd_eval(args) -> int:
    model = encoders.load_checkpoint(_require(args.ckpt, "checkpoint"))
    records = _records_for_split(args)
    if not records:
        raise InvalidConfig(f"split {args.split!r} holds no records")
    _check_dims(model, records)

    bases = [datagen.base_id(r.id) for r in records]
    _, text_rel, other_rel = retrieval.paired_relevance(bases)
    txt = encoders.encode_captions(model, [r.caption for r in records])
    seen: dict[str, int] = {}
    rows = []
    for r in records:
        b = datagen.base_id(r.id)
        if b not in seen:
            seen[b] = len(rows)
            rows.append(r.features)
    items = encoders.encode_feature_rows(model, np.asarray(rows))

    text_result = retrieval.evaluate_retrieval(items, txt, text_rel, "text_retrieval")
    other_result = retrieval.evaluate_retrieval(txt, items, other_rel, "other_retrieval")
    _emit(text_result.to_json())
    _emit(other_result.to_json())

    if args.prompts:
        templates = datagen.load_prompts(_require(args.prompts, "prompts file"))
        labels = sorted({r.class_label for r in records if r.class_label is not None})
        if not labels:
            raise InvalidConfig("zero-shot evaluation needs class labels in the data")
        class_prompts = []
        for label in labels:
            prompts = [datagen.expand_prompt(t, label) for t in templates]
            class_prompts.append(encoders.encode_captions(model, prompts).matrix)
        label_index = {l: i for i, l in enumerate(labels)}
        # classify unique items against their class labels
        item_label_of: list[int | None] = [None] * len(rows)
        for r in records:
            ii = seen[datagen.base_id(r.id)]
            if item_label_of[ii] is None:
                item_label_of[ii] = label_index[r.class_label]
        zs = retrieval.zero_shot_classify(items, class_prompts, item_label_of)
        _emit(zs.to_json())
    return 0


def cmd_analyze(args) -> int:
    records = _records_for_split(args)
    if not records:
        raise InvalidConfig(f"split {args.split!r} holds no records")
    lines = [geometry.CSV_HEADER]
    for ckpt_path in args.ckpt:
        model = encoders.load_checkpoint(_require(ckpt_path, "checkpoint"))
        _check_dims(model, records)
        report = geometry.geometry_report(model, records)
        meta = model.meta or {}
        row = report.csv_row(
            run_id=str(meta.get("run_id", "")),
            variant=str(meta.get("variant", "")),
            seed=str(meta.get("seed", "")),
        )
        lines.append(row)
        _emit({"checkpoint": ckpt_path, **report.to_json()})
    encoders.atomic_write_text(args.out, "".join(line + "\n" for line in lines))
    _log(f"wrote {len(args.ckpt)} geometry rows to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="deskclip",
        description="Desk-scale cross-modal contrastive training and analysis",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic paired dataset")
    p.add_argument("--spec", required=True, help="generator spec JSON")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train a model variant")
    p.add_argument("--config", required=True, help="train config JSON")
    p.add_argument("--data", required=True, help="dataset directory from 'gen'")
    p.add_argument("--out", required=True, help="run output directory")
    p.add_argument("--variant", help="override the config's variant")
    p.add_argument("--seed", type=int, help="override the config's seed")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="retrieval and zero-shot evaluation")
    p.add_argument("--ckpt", required=True, help="checkpoint JSON")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--prompts", help="prompt template file for zero-shot")
    p.add_argument("--split", choices=("train", "val", "all"), default="val")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze", help="geometry report CSV for checkpoints")
    p.add_argument("--ckpt", required=True, nargs="+", help="checkpoint JSON(s)")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="output CSV path")
    p.add_argument("--split", choices=("train", "val", "all"), default="val")
    p.set_defaults(func=cmd_analyze)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _limit_threads()
        return args.func(args)
    except DeskclipError as exc:
        _log(f"error: {exc}")
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
