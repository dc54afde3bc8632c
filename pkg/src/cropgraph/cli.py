"""Command-line entry point: synth, train, crop, eval, ablate, gradcheck, bench.

Exit codes: 0 success, 1 usage, 2 data error, 3 numerical failure. Every
output directory gets the exact config that produced it; timing numbers live
in a separate timings.json so the remaining outputs diff byte-exactly across
reruns.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import checks, evaluation, synth, training
from .autodiff import ConfigurationError, NumericalError, UsageError
from .candidates import AnchorGrid, circular_crop, grid_anchors, rank_crops, ratio_anchors
from .evaluation import InputError
from .model import CropScorer, ModelConfig
from .rois import InputError as RoiInputError
from .rois import RegionBox, RegionError, read_box_file, read_feature_map
from .training import DataError, TrainConfig, read_manifest, train

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class _UsageFailure(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageFailure(message)


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def _load_config_file(path) -> dict:
    if path is None:
        return {}
    with open(path, encoding="utf8") as fh:
        return json.load(fh)


def _model_config(args, file_cfg) -> ModelConfig:
    cfg = dict(file_cfg.get("model", {}))
    for flag, key in (("spatial", "spatial_variant"), ("eps", "eps"),
                      ("proposals", "n_proposals"), ("layers", "layers"),
                      ("heads", "heads"), ("d", "d")):
        val = getattr(args, flag, None)
        if val is not None:
            cfg[key] = val
    return ModelConfig(**cfg)


def _train_config(args, file_cfg) -> TrainConfig:
    cfg = dict(file_cfg.get("train", {}))
    for flag, key in (("seed", "seed"), ("epochs", "epochs"), ("lr", "learning_rate"),
                      ("sample_k", "candidate_sample_k")):
        val = getattr(args, flag, None)
        if val is not None:
            cfg[key] = val
    return TrainConfig(**cfg)


def _write_run_config(out_dir, payload: dict) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "config.json", "w", encoding="utf8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_timings(out_dir, payload: dict) -> None:
    with open(Path(out_dir) / "timings.json", "w", encoding="utf8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    file_cfg = _load_config_file(args.config)
    spec_cfg = dict(file_cfg.get("synth", {}))
    if args.image_size:
        w, h = (int(v) for v in args.image_size.split("x"))
        spec_cfg["image_w"], spec_cfg["image_h"] = w, h
    if "grid" in spec_cfg:
        spec_cfg["grid"] = AnchorGrid(**spec_cfg["grid"])
    spec = synth.SynthSpec(**spec_cfg)
    start = time.perf_counter()
    records, _ = synth.synth_dataset(args.n_images, args.seed, spec,
                                     out_dir=args.out)
    _write_run_config(args.out, {"command": "synth", "seed": args.seed,
                                 "n_images": args.n_images,
                                 "synth": spec.to_dict()})
    _write_timings(args.out, {"seconds": time.perf_counter() - start})
    print(f"wrote {len(records)} records to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    file_cfg = _load_config_file(args.config)
    model_cfg = _model_config(args, file_cfg)
    train_cfg = _train_config(args, file_cfg)
    records = read_manifest(args.manifest)
    root = Path(args.manifest).parent
    if args.val_manifest:
        val = read_manifest(args.val_manifest)
        train_set = records
    else:
        rng = np.random.default_rng(train_cfg.seed)
        order = rng.permutation(len(records))
        n_val = max(1, int(round(args.val_fraction * len(records))))
        val = [records[i] for i in order[:n_val]]
        train_set = [records[i] for i in order[n_val:]]
        if not train_set:
            raise DataError("validation split consumed every record")
    model = CropScorer(model_cfg, seed=train_cfg.seed)
    start = time.perf_counter()
    result = train(train_set, model, train_cfg, val=val, out_dir=args.out,
                   root=root, log=print if args.verbose else None)
    elapsed = time.perf_counter() - start
    ck = Path(args.out) / "checkpoint.s2ck"
    _write_run_config(args.out, {
        "command": "train", "model": model_cfg.to_dict(),
        "train": train_cfg.to_dict(), "checkpoint_sha256": _sha256(ck),
        "best_epoch": result.best_epoch})
    _write_timings(args.out, {"seconds": elapsed})
    if result.aborted:
        print("training aborted on non-finite loss; last good checkpoint kept",
              file=sys.stderr)
        return EXIT_NUMERIC
    print(f"best held-out srcc {result.best_srcc:.4f} "
          f"(epoch {result.best_epoch})")
    return EXIT_OK


def _parse_ratio(text: str):
    parts = text.split(":")
    if len(parts) != 2:
        raise _UsageFailure(f"--ratio expects W:H, got {text!r}")
    return int(parts[0]), int(parts[1])


def cmd_crop(args) -> int:
    model = CropScorer.load(args.checkpoint)
    if args.feature_map:
        source = read_feature_map(args.feature_map)
        image_w, image_h = source.extent
        image_id = Path(args.feature_map).stem
    else:
        source = training.load_source(args.image)
        image_h, image_w = source.shape[0], source.shape[1]
        image_id = Path(args.image).stem

    proposals = []
    if args.proposal_file:
        table = read_box_file(args.proposal_file)
        proposals = table.get(image_id, [])
    if not proposals and args.no_heuristic:
        raise DataError("no proposals supplied and the heuristic fallback is "
                        "disabled")
    if not proposals and args.feature_map:
        raise DataError("feature-map input needs a proposal file (no pixels "
                        "for the heuristic fallback)")

    circles = None
    if args.circle:
        pairs = circular_crop(int(image_w), int(image_h))
        circles = [c for c, _ in pairs]
        boxes = [b for _, b in pairs]
    elif args.ratio:
        rw, rh = _parse_ratio(args.ratio)
        boxes = ratio_anchors(int(image_w), int(image_h), rw, rh)
    else:
        boxes = grid_anchors(int(image_w), int(image_h))

    ctx = model.prepare(source, proposals, image_size=(image_w, image_h))
    scores = model.score_boxes(ctx, boxes).numpy()
    results = rank_crops(scores.tolist(), boxes=boxes)
    ranked = sorted(results, key=lambda r: r.rank)[:args.top]
    payload = {"image_id": image_id, "mode": ("circle" if args.circle else
                                              args.ratio or "free"),
               "results": []}
    for res in ranked:
        entry = {"box": list(res.box.coords()), "score": res.score,
                 "rank": res.rank}
        if circles is not None:
            c = circles[results.index(res)]
            entry["circle"] = [c.cx, c.cy, c.radius]
        payload["results"].append(entry)
    text = json.dumps(payload, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "crops.json").write_text(text + "\n", encoding="utf8")
    print(text)
    return EXIT_OK


def cmd_eval(args) -> int:
    model = CropScorer.load(args.checkpoint)
    records = read_manifest(args.manifest)
    root = Path(args.manifest).parent
    report = evaluation.evaluate(model, records, root=root)
    evaluation.write_report(args.out, report)
    evaluation.write_scatter(Path(args.out) / "scatter.csv", model, records,
                             root=root)
    _write_run_config(args.out, {
        "command": "eval", "model": model.config.to_dict(),
        "checkpoint_sha256": _sha256(args.checkpoint),
        "convention": report.convention})
    print(f"srcc {report.srcc_mean:.4f} acc5 {report.acc5:.1f} "
          f"acc10 {report.acc10:.1f} ({report.runtime:.1f} images/s)")
    return EXIT_OK


def cmd_ablate(args) -> int:
    file_cfg = _load_config_file(args.config)
    model_cfg = _model_config(args, file_cfg)
    train_cfg = _train_config(args, file_cfg)
    records = read_manifest(args.manifest)
    root = Path(args.manifest).parent
    if args.val_manifest:
        val = read_manifest(args.val_manifest)
        train_set = records
    else:
        rng = np.random.default_rng(train_cfg.seed)
        order = rng.permutation(len(records))
        n_val = max(1, int(round(args.val_fraction * len(records))))
        val = [records[i] for i in order[:n_val]]
        train_set = [records[i] for i in order[n_val:]]
    rows = evaluation.ablation_run(train_set, val, args.axis, model_cfg,
                                   train_cfg, seed=train_cfg.seed, root=root,
                                   log=print if args.verbose else None)
    Path(args.out).mkdir(parents=True, exist_ok=True)
    evaluation.write_ablation_csv(Path(args.out) / f"ablation_{args.axis}.csv",
                                  rows)
    _write_run_config(args.out, {"command": "ablate", "axis": args.axis,
                                 "model": model_cfg.to_dict(),
                                 "train": train_cfg.to_dict()})
    for row in rows:
        print(f"{row['setting']:>18}: srcc {row['srcc']:.4f} "
              f"acc5 {row['acc5']:.1f} acc10 {row['acc10']:.1f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    start = time.perf_counter()
    results = checks.run_gradient_suite(tol=args.tol, seed=args.seed,
                                        corrupt=args.corrupt)
    elapsed = time.perf_counter() - start
    failed = 0
    for name, report in results:
        status = "pass" if report.passed else "FAIL"
        print(f"{name:>26}: {status}  max rel err {report.max_rel_err:.3e}")
        failed += 0 if report.passed else 1
    print(f"{len(results)} checks in {elapsed:.1f}s, {failed} failed")
    return EXIT_NUMERIC if failed else EXIT_OK


def cmd_bench(args) -> int:
    records = read_manifest(args.manifest)[:args.images]
    root = Path(args.manifest).parent
    if args.checkpoint:
        model = CropScorer.load(args.checkpoint)
    else:
        model = CropScorer(_model_config(args, _load_config_file(args.config)),
                           seed=args.seed or 0)
    report = evaluation.evaluate(model, records, root=root)
    print(f"{report.runtime:.1f} images/second over {len(records)} images "
          f"({len(records[0].candidates)} candidates each)")
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        _write_timings(args.out, {"images_per_second": report.runtime,
                                  "images": len(records)})
    return EXIT_OK


# ---------------------------------------------------------------------------
# wiring
# ---------------------------------------------------------------------------

def build_parser() -> _Parser:
    parser = _Parser(prog="cropgraph",
                     description="graph-attention crop scoring toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--spatial", choices=["disdrop", "disemb"])
        p.add_argument("--eps", type=float)
        p.add_argument("--proposals", type=int)
        p.add_argument("--layers", type=int)
        p.add_argument("--heads", type=int)
        p.add_argument("--d", type=int)
        p.add_argument("--verbose", action="store_true")

    p = sub.add_parser("synth", help="generate a planted synthetic dataset")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--n-images", type=int, default=100)
    p.add_argument("--image-size", help="WxH, e.g. 96x96")
    p.set_defaults(func=cmd_synth, seed=0)

    p = sub.add_parser("train", help="train on a manifest")
    common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--val-manifest")
    p.add_argument("--val-fraction", type=float, default=0.2)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--sample-k", type=int, dest="sample_k")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("crop", help="rank crops for one image")
    common(p)
    p.add_argument("--checkpoint", required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--image")
    src.add_argument("--feature-map")
    p.add_argument("--proposal-file", help="JSONL box file")
    p.add_argument("--no-heuristic", action="store_true")
    mode = p.add_mutually_exclusive_group()
    mode.add_argument("--ratio", help="W:H aspect constraint")
    mode.add_argument("--circle", action="store_true")
    mode.add_argument("--free", action="store_true")
    p.add_argument("--top", type=int, default=5)
    p.add_argument("--out")
    p.set_defaults(func=cmd_crop)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and tabulate one ablation axis")
    common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--val-manifest")
    p.add_argument("--val-fraction", type=float, default=0.2)
    p.add_argument("--axis", required=True,
                   choices=["spatial", "proposals", "components"])
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="run the finite-difference suite")
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--corrupt", help="inject a sign-flipped backward into one "
                                     "named check (negative control)")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("bench", help="report evaluation throughput")
    common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--images", type=int, default=10)
    p.add_argument("--out")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except _UsageFailure as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (UsageError, ConfigurationError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, InputError, RoiInputError, RegionError, OSError,
            json.JSONDecodeError, KeyError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, AssertionError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
