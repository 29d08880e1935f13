"""Command-line entry point: ``objn <command>``.

Exit codes: 0 success, 1 I/O error, 2 config error, 3 data error,
4 model/checkpoint error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from contextlib import nullcontext
from dataclasses import replace
from pathlib import Path

from . import data as data_mod
from .config import load_run_config
from .detector import nms, predict_distribution
from .errors import CheckpointError, ConfigError, DataError, ObjnError
from .metrics import evaluate_detections, write_report_csv
from .model import classification_head, load, write_checkpoint
from .trainer import (
    HELDOUT_CELLS,
    detect_records,
    run_heldout_experiment,
    run_recognition_transfer,
    train_classification,
    train_detection,
)

log = logging.getLogger("objectness")


def _class_list(text: str) -> tuple:
    try:
        return tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError as exc:
        raise ConfigError(f"expected a comma-separated list of class ids, got {text!r}") from exc


def _load_bbox_model(path):
    model = load(path)
    if model.config.head.kind != "bbox":
        raise CheckpointError(f"{path} has a {model.config.head.kind} head; this command needs a bbox head")
    return model


def cmd_gen_data(args) -> int:
    cfg = load_run_config(args.config)
    manifest = data_mod.generate(cfg.synth, args.out)
    records = data_mod.load_manifest(manifest)
    print(f"manifest {manifest}")
    for split in ("train", "val"):
        for class_id, (images, boxes) in data_mod.class_tallies(records, split).items():
            print(f"{split} class {class_id} ({data_mod.class_name(class_id, cfg.synth.num_fills)}): "
                  f"{images} images, {boxes} boxes")
    print(f"sha256 {data_mod.dataset_checksum(manifest)}")
    return 0


def cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    records = data_mod.load_manifest(args.data)
    train_cfg = cfg.train
    if args.held_out is not None:
        train_cfg = replace(train_cfg, held_out_classes=_class_list(args.held_out))
    if args.init:
        log.info("head swap: initializing %s training from %s", args.task, args.init)
        train_cfg = replace(train_cfg, init=args.init)
    if args.task == "classify":
        num_classes = 1 + max(r.class_id for r in records)
        ckpt, tlog = train_classification(records, train_cfg, cfg.network_for(classification_head(num_classes)))
    else:
        held = data_mod.withhold_boxes(records, train_cfg.held_out_classes)
        for class_id, (images, boxes) in data_mod.class_tallies(held, "train").items():
            log.info("train class %d: %d images, %d boxes used", class_id, images, boxes)
        ckpt, tlog = train_detection(records, train_cfg, cfg.network, cfg.nms, cfg.iou_match_threshold)
    out = Path(args.out)
    write_checkpoint(ckpt, out)
    tlog.write_csv(out.with_suffix(".log.csv"))
    print(f"checkpoint {out} (best epoch {tlog.best_epoch})")
    return 0


def cmd_detect(args) -> int:
    model = _load_bbox_model(args.model)
    image = data_mod.image_to_tensor(data_mod.read_image(args.image))
    if image.shape != tuple(model.config.input_dims):
        raise DataError(f"image {args.image} has shape {image.shape}, model expects {model.config.input_dims}")
    cfg = load_run_config(args.config)
    dist = predict_distribution(model, image)
    dets = nms(dist, model.config.head.grid,
               cfg.nms.iou_threshold if args.iou_nms is None else args.iou_nms,
               cfg.nms.score_threshold if args.score_min is None else args.score_min,
               cfg.nms.max_detections if args.max_det is None else args.max_det)
    for d in dets:
        b = d.box
        print(f"{d.score:.6f} {b.x_min:.6f} {b.y_min:.6f} {b.x_max:.6f} {b.y_max:.6f}")
    return 0


def cmd_eval(args) -> int:
    model = _load_bbox_model(args.model)
    cfg = load_run_config(args.config)
    records = [r for r in data_mod.load_manifest(args.data) if r.split == "val"]
    if args.classes:
        wanted = set(_class_list(args.classes))
        records = [r for r in records if r.class_id in wanted]
    if not records:
        raise DataError("no validation records to evaluate")
    dets = detect_records(model, records, cfg.nms)
    report = evaluate_detections(dets, [r.boxes for r in records], cfg.iou_match_threshold)
    write_report_csv(report, args.out)
    print(f"AUC {report.auc:.6f} over {report.total_gt} ground-truth boxes in {len(records)} images")
    return 0


def _prepare_out_dir(out: Path, force: bool) -> None:
    if out.exists() and any(out.iterdir()) and not force:
        raise FileExistsError(f"output directory {out} exists and is not empty; pass --force to overwrite")
    (out / "logs").mkdir(parents=True, exist_ok=True)
    (out / "pretrain_logs").mkdir(exist_ok=True)


def cmd_experiment(args) -> int:
    cfg = load_run_config(args.config)
    out = Path(args.out)
    _prepare_out_dir(out, args.force)
    manifest = Path(args.data) if args.data else data_mod.generate(cfg.synth, out / "data")
    records = data_mod.load_manifest(manifest)
    if args.protocol == "heldout":
        report = run_heldout_experiment(records, cfg.experiment)
        for key in HELDOUT_CELLS:
            cell = report.cells[key]
            write_checkpoint(cell.checkpoint, out / f"{cell.name}.objn")
            write_report_csv(cell.report, out / f"{cell.name}_pr.csv")
            for seed, tlog in zip(report.seeds, cell.logs):
                tlog.write_csv(out / "logs" / f"{cell.name}_seed{seed}.log.csv")
        for seed, tlog in zip(report.seeds, report.pretrain_logs):
            tlog.write_csv(out / "pretrain_logs" / f"classify_seed{seed}.log.csv")
        _write_rows(out / "summary.csv", report.summary_rows())
        print(report.table())
    else:
        report = run_recognition_transfer(records, cfg.experiment)
        for (arm, seed), tlog in report.logs.items():
            # logs/ holds the compared classification runs; pretraining goes alongside
            sub = "pretrain_logs" if arm == "detection" else "logs"
            tlog.write_csv(out / sub / f"{arm}_seed{seed}.log.csv")
        rows = list(report.rows)
        for arm in ("detection_pretrained", "random"):
            rows.append({"seed": "mean", "arm": arm, "top1_error": report.mean(arm, "top1_error"),
                         "top5_error": report.mean(arm, "top5_error")})
        _write_rows(out / "summary.csv", rows)
        for row in rows[-2:]:
            print(f"{row['arm']}: mean top-1 error {row['top1_error']:.4f}, top-5 error {row['top5_error']:.4f}")
    print(f"results in {out}")
    return 0


def _write_rows(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="objn", description="Class-generic object detection on a discretized box space.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="render the synthetic shapes dataset")
    g.add_argument("--config")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a classification or detection network")
    t.add_argument("--task", choices=("classify", "detect"), required=True)
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--init", help="checkpoint whose trunk initializes the network")
    t.add_argument("--held-out", help='class ids whose boxes are withheld, e.g. "8,9"')
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    d = sub.add_parser("detect", help="print detections for one image")
    d.add_argument("--model", required=True)
    d.add_argument("--image", required=True)
    d.add_argument("--config")
    d.add_argument("--iou-nms", type=float)
    d.add_argument("--score-min", type=float)
    d.add_argument("--max-det", type=int)
    d.set_defaults(func=cmd_detect)

    e = sub.add_parser("eval", help="precision-recall evaluation on the validation split")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--classes", help='restrict to these class ids, e.g. "8,9"')
    e.add_argument("--config")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    x = sub.add_parser("experiment", help="run the held-out or transfer experiment grid")
    x.add_argument("--protocol", choices=("heldout", "transfer"), required=True)
    x.add_argument("--config")
    x.add_argument("--data", help="existing manifest (default: generate from the config)")
    x.add_argument("--out", required=True)
    x.add_argument("--force", action="store_true")
    x.set_defaults(func=cmd_experiment)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    threads = os.environ.get("OBJN_THREADS")
    if threads:
        from threadpoolctl import threadpool_limits

        limiter = threadpool_limits(limits=int(threads))
    else:
        limiter = nullcontext()
    try:
        with limiter:
            return args.func(args)
    except ObjnError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
