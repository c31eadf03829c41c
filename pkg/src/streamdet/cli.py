"""Command-line entry points.

Subcommands: gen (synthetic dataset), train-pq (fit a quantizer from
feature files), run (full experiment), eval (standalone detection
scoring), omega (normalized incremental score from learning curves).
Failures exit non-zero with a one-line JSON error object on stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import pq as pq_mod
from .config import ConfigError, Seeds, config_from_dict, config_to_dict, load_config
from .core import BoundingBox, Detection
from .datagen import SyntheticSpec, generate_dataset, load_dataset, write_dataset
from .driver import run_experiment
from .evaluation import evaluate_detections, omega_map, read_curve_alphas
from .fileio import ParseError, atomic_write_json, read_annotations, read_feature


def _fail(exc: BaseException) -> int:
    payload = {"error": {"type": type(exc).__name__, "message": str(exc)}}
    print(json.dumps(payload), file=sys.stderr)
    return 1


def _spec_from_file(path, seed_override=None) -> SyntheticSpec:
    try:
        obj = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc.msg}") from None
    if not isinstance(obj, dict):
        raise ConfigError(f"{path}: expected a JSON object")
    names = {f.name for f in fields(SyntheticSpec)}
    extra = obj.keys() - names
    if extra:
        raise ConfigError(f"{path}: unknown keys {sorted(extra)}")
    for key in ("grid", "boxes_per_image"):
        if key in obj and isinstance(obj[key], list):
            obj[key] = tuple(obj[key])
    if seed_override is not None:
        obj["seed"] = seed_override
    try:
        return SyntheticSpec(**obj)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from None


def cmd_gen(args) -> int:
    spec = _spec_from_file(args.spec, args.seed)
    dataset = generate_dataset(spec)
    write_dataset(dataset, args.out, spec)
    print(
        json.dumps(
            {
                "out": str(args.out),
                "classes": list(dataset.classes),
                "train_images": len(dataset.train),
                "test_images": len(dataset.test),
            }
        )
    )
    return 0


def cmd_train_pq(args) -> int:
    root = Path(args.features)
    paths = sorted(root.glob("*.rfm1"))
    if not paths:
        raise FileNotFoundError(f"no .rfm1 feature files under {root}")
    samples = []
    for i, path in enumerate(paths):
        fmap = read_feature(path)
        total = fmap.grid_h * fmap.grid_w
        if args.locations == 0 or args.locations >= total:
            samples.append(fmap.values.reshape(total, -1).astype(np.float64))
        else:
            samples.append(
                pq_mod.subsample_locations(fmap, args.locations, seed=[args.seed, 1, i])
            )
    model = pq_mod.train_pq(
        np.concatenate(samples),
        args.num_codebooks,
        args.codebook_size,
        seed=args.seed,
        iters=args.iters,
    )
    pq_mod.save_pq(model, args.out)
    print(
        json.dumps(
            {
                "out": str(args.out),
                "num_codebooks": model.num_codebooks,
                "codebook_size": model.codebook_size,
                "subvector_dim": model.subvector_dim,
                "digest": pq_mod.model_digest(model),
            }
        )
    )
    return 0


def cmd_run(args) -> int:
    config = load_config(args.config)
    overrides = {}
    if args.learner is not None:
        overrides["learner"] = args.learner
    if args.replay_n is not None:
        overrides["replay_n"] = args.replay_n
    if args.eval_every is not None:
        overrides["schedule"] = {"eval_every": args.eval_every}
    if args.policy is not None or args.capacity_entries is not None or args.capacity_bytes:
        overrides["buffer"] = {
            "policy": args.policy,
            "capacity_entries": args.capacity_entries,
            "capacity_bytes": args.capacity_bytes,
        }
    if overrides or args.seed is not None:
        doc = config_to_dict(config)
        for key, value in overrides.items():
            if isinstance(value, dict):
                base = doc.get(key) or {}
                merged = dict(base)
                merged.update({k: v for k, v in value.items() if v is not None})
                doc[key] = merged
            else:
                doc[key] = value
        if args.seed is not None:
            doc["seeds"] = {
                name: args.seed + i
                for i, name in enumerate(f.name for f in fields(Seeds))
            }
        config = config_from_dict(doc)

    if args.data is not None:
        dataset = load_dataset(args.data)
    elif config.data is not None:
        dataset = generate_dataset(config.data)
    else:
        raise ConfigError("no dataset: pass --data DIR or put a 'data' spec in the config")
    result = run_experiment(config, dataset, out_dir=args.out)
    print(
        json.dumps(
            {
                "out": str(args.out),
                "learner": config.learner.value,
                "checkpoints": [r.t for r in result.reports],
                "alphas": result.alphas,
            }
        )
    )
    return 0


def _read_detections(path) -> dict[str, list[Detection]]:
    path = str(path)
    try:
        obj = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(path, exc.pos, f"invalid JSON: {exc.msg}") from None
    if not isinstance(obj, dict) or set(obj) != {"detections"}:
        raise ParseError(path, 0, 'expected an object with a single "detections" key')
    out: dict[str, list[Detection]] = {}
    for image_id, rows in obj["detections"].items():
        dets = []
        for i, row in enumerate(rows):
            if not isinstance(row, dict) or set(row) != {"box", "class_id", "score"}:
                raise ParseError(
                    path, 0, f"{image_id}[{i}]: need exactly box/class_id/score"
                )
            try:
                dets.append(
                    Detection(BoundingBox(*row["box"]), row["class_id"], row["score"])
                )
            except (TypeError, ValueError) as exc:
                raise ParseError(path, 0, f"{image_id}[{i}]: {exc}") from None
        out[image_id] = dets
    return out


def cmd_eval(args) -> int:
    detections = _read_detections(args.detections)
    ann_root = Path(args.annotations)
    ann_paths = sorted(ann_root.glob("*.json")) if ann_root.is_dir() else [ann_root]
    annotations = {}
    for path in ann_paths:
        ann = read_annotations(path)
        annotations[ann.image_id] = ann
    if not annotations:
        raise FileNotFoundError(f"no annotation files under {ann_root}")
    if args.classes:
        classes = [int(c) for c in args.classes.split(",")]
    else:
        classes = sorted({c for a in annotations.values() for c in a.classes})
    report = evaluate_detections(detections, annotations, classes, eleven_point=args.eleven_point)
    atomic_write_json(args.out, report.to_json())
    print(json.dumps({"out": str(args.out), "map": report.map}))
    return 0


def cmd_omega(args) -> int:
    alphas = read_curve_alphas(args.curve)
    if args.offline_curve is not None:
        offline = read_curve_alphas(args.offline_curve)
    else:
        offline = args.offline_const
    value = omega_map(alphas, offline)
    print(json.dumps({"omega_map": round(value, 6), "checkpoints": len(alphas)}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="streamdet",
        description="Streaming continual learning for object detection over feature maps.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    p.add_argument("--spec", required=True, help="SyntheticSpec JSON file")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--seed", type=int, default=None, help="override the spec seed")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train-pq", help="fit a product quantizer from feature files")
    p.add_argument("--features", required=True, help="directory of .rfm1 files")
    p.add_argument("--num-codebooks", type=int, required=True)
    p.add_argument("--codebook-size", type=int, default=256)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--iters", type=int, default=25)
    p.add_argument(
        "--locations", type=int, default=30, help="sampled cells per image (0 = all)"
    )
    p.add_argument("--out", required=True, help="output model path")
    p.set_defaults(func=cmd_train_pq)

    p = sub.add_parser("run", help="run a full streaming experiment")
    p.add_argument("--config", required=True, help="ExperimentConfig JSON file")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--data", default=None, help="dataset directory (else config.data)")
    p.add_argument("--seed", type=int, default=None, help="override every seed")
    p.add_argument("--learner", choices=["replay", "fine_tune", "slda_regress"], default=None)
    p.add_argument("--replay-n", type=int, default=None)
    p.add_argument("--policy", choices=["min", "max", "bal", "random", "no_replace"], default=None)
    p.add_argument("--capacity-entries", type=int, default=None)
    p.add_argument("--capacity-bytes", type=int, default=None)
    p.add_argument("--eval-every", type=int, default=None)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("eval", help="score a detections file against annotations")
    p.add_argument("--detections", required=True)
    p.add_argument("--annotations", required=True, help="annotation file or directory")
    p.add_argument("--classes", default=None, help="comma-separated class ids")
    p.add_argument("--eleven-point", action="store_true")
    p.add_argument("--out", required=True, help="report JSON path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("omega", help="normalized incremental score from a curve CSV")
    p.add_argument("--curve", required=True, help="learning-curve CSV with a map column")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--offline-const", type=float, default=None)
    group.add_argument("--offline-curve", default=None)
    p.set_defaults(func=cmd_omega)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except BrokenPipeError:
        raise
    except Exception as exc:
        return _fail(exc)


if __name__ == "__main__":
    sys.exit(main())
