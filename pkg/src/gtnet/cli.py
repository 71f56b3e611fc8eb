"""Command-line interface: ``gtnet train | eval | gradcheck | synth | demo``.

Exit status is 0 on success, 1 on invalid input (bad flags, configs, files or
shapes) and 2 on numeric failure (non-finite loss, failed gradient check).
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
import tempfile
import time
from pathlib import Path

from . import gradcheck_suite
from .errors import GTNetError, NumericError
from .evaluation import EVAL_STREAM, TRAIN_STREAM, datasets, detect_all, evaluate, init_model
from .metrics import compute_map
from .pipeline.config import TIERS, RunConfig, load_config
from .pipeline.model import Detection
from .pipeline.synth import SceneSpec, make_dataset
from .pipeline.train import train
from .scene_files import read_annotations, read_scenes, write_scenes
from .serialization import load_model, save_model

log = logging.getLogger("gtnet")

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _config(path) -> RunConfig:
    return load_config(path) if path else RunConfig()


def _progress(total: int):
    every = max(1, total // 10)

    def report(step: int, loss: float) -> None:
        if step % every == 0 or step == total - 1:
            print(f"step {step + 1}/{total} loss {loss:.5f}", flush=True)

    return report


# ----------------------------------------------------------------------
def cmd_train(args) -> int:
    cfg = _config(args.config)
    model_cfg = cfg.model
    if args.no_ga:
        model_cfg = dataclasses.replace(model_cfg, ga_enabled=False)
    if args.no_tba:
        model_cfg = dataclasses.replace(model_cfg, tba_enabled=False)
    train_cfg = cfg.train
    if args.seed is not None:
        train_cfg = dataclasses.replace(train_cfg, seed=args.seed)
    if args.steps is not None:
        train_cfg = dataclasses.replace(train_cfg, steps=args.steps)
    cfg = RunConfig(model=model_cfg, train=train_cfg, data=cfg.data)
    train_scenes, _ = datasets(cfg, train_cfg.seed)
    model = init_model(model_cfg, train_cfg.seed, train_scenes)
    result = train(train_scenes, model, train_cfg, progress=None if args.quiet else _progress(train_cfg.steps))
    save_model(model, args.out)
    if result.losses:
        first, last = result.window_medians()
        print(f"loss median first 20% {first:.5f}, last 20% {last:.5f}")
    print(f"model written to {args.out}")
    return EXIT_OK


def _load_detections(path, names: list[str]):
    try:
        records = json.loads(Path(path).read_text())
    except OSError as exc:
        raise UsageError(f"cannot read detections file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"detections file {path} is not valid JSON: {exc.msg}") from exc
    by_image = {}
    for rec in records:
        try:
            by_image[rec["image"]] = [
                Detection(int(d["class"]), float(d["score"]), tuple(float(v) for v in d["box"]))
                for d in rec["detections"]
            ]
        except (KeyError, TypeError, ValueError) as exc:
            raise UsageError(f"malformed detection record in {path}: {exc}") from exc
    unknown = set(by_image) - set(names)
    if unknown:
        raise UsageError(f"detections for unknown images: {sorted(unknown)[:3]}")
    return [by_image.get(n, []) for n in names]


def _eval_scenes(spec: str, seed: int):
    """A scene directory written by ``synth``, or a config whose eval scenes are generated."""
    path = Path(spec)
    if path.is_dir():
        return read_scenes(path), [r["image"] for r in read_annotations(path)], None
    cfg = load_config(path)
    _, scenes = datasets(cfg, seed)
    return scenes, [f"scene_{i:05d}.npy" for i in range(len(scenes))], cfg.model.k_cat


def write_report(report: dict, path) -> None:
    path = Path(path)
    if path.suffix.lower() == ".csv":
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["map", "class", "ap", "tier", "iou_threshold", "num_images"])
            for cls, ap in report["per_class"].items():
                w.writerow([report["map"], cls, ap, report["tier"], report["iou_threshold"], report["num_images"]])
    else:
        path.write_text(json.dumps(report, indent=2) + "\n")


def cmd_eval(args) -> int:
    if (args.model is None) == (args.detections is None):
        raise UsageError("eval needs exactly one of --model or --detections")
    scenes, names, k_cat = _eval_scenes(args.dataset, args.seed)
    tier = None if args.tier == "all" else args.tier
    if args.model is not None:
        model = load_model(args.model)
        report = evaluate(model, scenes, args.iou, tier, dets=detect_all(model, scenes))
    else:
        dets = _load_detections(args.detections, names)
        from .evaluation import ground_truths

        gts = ground_truths(scenes)
        labels = {o.class_id for s in scenes for o in s.objects} | {d.class_id for img in dets for d in img}
        categories = range(k_cat) if k_cat else sorted(labels)
        mean_ap, per_class = compute_map(dets, gts, categories, args.iou, tier)
        report = {
            "map": mean_ap,
            "per_class": {str(k): v for k, v in per_class.items()},
            "tier": tier or "all",
            "iou_threshold": args.iou,
            "num_images": len(scenes),
        }
    if args.report:
        write_report(report, args.report)
    print(f"mAP@{args.iou:g} ({report['tier']}) = {report['map']:.4f} over {report['num_images']} images")
    for cls, ap in report["per_class"].items():
        print(f"  class {cls}: AP {ap:.4f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    names = None if args.all or not args.op else args.op
    known = {c.name for c in gradcheck_suite.CASES}
    if names:
        unknown = sorted(set(names) - known)
        if unknown:
            raise UsageError(f"unknown operation(s) {unknown}; choose from {sorted(known)}")
    start = time.perf_counter()
    rows = gradcheck_suite.run_all(points=args.points, seed=args.seed, names=names)
    if args.model:
        t0 = time.perf_counter()
        rows.append(("tiny_detector_end_to_end", gradcheck_suite.tiny_model_check(args.seed), time.perf_counter() - t0))
    width = max(len(r[0]) for r in rows)
    print(f"{'operation':<{width}}  max rel err   time   ok")
    failed = 0
    for name, err, secs in rows:
        tol = gradcheck_suite.MODEL_TOLERANCE if name == "tiny_detector_end_to_end" else gradcheck_suite.TOLERANCE
        ok = err < tol
        failed += not ok
        print(f"{name:<{width}}  {err:11.3e}  {secs:5.2f}s  {'yes' if ok else 'NO'}")
    print(f"{len(rows) - failed}/{len(rows)} passed in {time.perf_counter() - start:.1f}s")
    return EXIT_OK if not failed else EXIT_NUMERIC


def cmd_synth(args) -> int:
    cfg = _config(args.spec)
    spec = SceneSpec.from_data_config(cfg.data, cfg.model.k_cat)
    count = cfg.data.num_scenes if args.count is None else args.count
    stream = TRAIN_STREAM if args.stream == "train" else EVAL_STREAM
    scenes = make_dataset(count, args.seed, spec, stream=stream)
    path = write_scenes(scenes, args.out)
    print(f"{len(scenes)} scenes written to {args.out} (annotations: {path.name})")
    return EXIT_OK


def cmd_demo(args) -> int:
    cfg = RunConfig()
    cfg = dataclasses.replace(
        cfg,
        data=dataclasses.replace(cfg.data, num_scenes=args.scenes, eval_scenes=args.scenes // 2),
        train=dataclasses.replace(cfg.train, steps=args.steps, seed=args.seed),
    )
    train_scenes, eval_scenes = datasets(cfg, args.seed)
    model = init_model(cfg.model, args.seed, train_scenes)
    print(f"training the full model (GA + TBA) for {args.steps} steps on {len(train_scenes)} scenes")
    result = train(train_scenes, model, cfg.train, progress=_progress(args.steps))
    first, last = result.window_medians()
    print(f"loss median first 20% {first:.4f} -> last 20% {last:.4f}")
    overall = evaluate(model, eval_scenes, dets=detect_all(model, eval_scenes))
    print(f"held-out mAP@0.5 over {overall['num_images']} scenes: {overall['map']:.4f}")
    out = Path(args.out) if args.out else Path(tempfile.mkdtemp(prefix="gtnet-demo-"))
    out.mkdir(parents=True, exist_ok=True)
    save_model(model, out / "model.gtnet")
    write_scenes(eval_scenes, out / "eval_scenes")
    write_report(overall, out / "report.json")
    print(f"model, evaluation scenes and report written to {out}")
    return EXIT_OK


# ----------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="gtnet", description="Guided attention + Tucker bilinear attention detector toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train a detector and write a model file")
    t.add_argument("--config", help="run config file ([model], [train], [data] sections)")
    t.add_argument("--out", required=True, help="model file to write")
    t.add_argument("--seed", type=int, help="overrides [train] seed")
    t.add_argument("--steps", type=int, help="overrides [train] steps")
    t.add_argument("--no-ga", action="store_true", help="disable guided attention")
    t.add_argument("--no-tba", action="store_true", help="disable Tucker bilinear attention")
    t.add_argument("--quiet", action="store_true", help="no per-step progress")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="compute mAP on a scene set")
    e.add_argument("--model", help="model file from train")
    e.add_argument("--detections", help="JSON detections file: [{image, detections: [{class, score, box}]}]")
    e.add_argument("--dataset", required=True, help="scene directory from synth, or a config file")
    e.add_argument("--seed", type=int, default=0, help="data seed when --dataset is a config")
    e.add_argument("--iou", type=float, default=0.5)
    e.add_argument("--tier", choices=TIERS + ("all",), default="all")
    e.add_argument("--report", help="report path; .csv for CSV, otherwise JSON")
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    g.add_argument("--all", action="store_true", help="every registered operation (default)")
    g.add_argument("--op", action="append", help="only this operation (repeatable)")
    g.add_argument("--points", type=int, default=3, help="random points per operation")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--model", action="store_true", help="also check the tiny end-to-end detector")
    g.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("synth", help="write synthetic scenes")
    s.add_argument("--spec", help="config file; its [data] and [model] k_cat define the scenes")
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--count", type=int, help="number of scenes (default: [data] num_scenes)")
    s.add_argument("--stream", choices=("train", "eval"), default="train")
    s.set_defaults(func=cmd_synth)

    d = sub.add_parser("demo", help="small end-to-end run: synth, train, evaluate")
    d.add_argument("--steps", type=int, default=40)
    d.add_argument("--scenes", type=int, default=24)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--out", help="output directory (default: a fresh temp dir)")
    d.set_defaults(func=cmd_demo)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"gtnet {args.command}: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except NumericError as exc:
        print(f"gtnet {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (GTNetError, ValueError, OSError) as exc:
        print(f"gtnet {args.command}: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
