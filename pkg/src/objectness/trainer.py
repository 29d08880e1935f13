"""Momentum SGD and the training / pretraining protocols."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Union

import numpy as np

from . import bbox as bbox_space
from .data import class_tallies, load_images, withhold_boxes
from .detector import nms, predict_distributions
from .errors import ConfigError, DataError
from .metrics import EvalReport, evaluate_detections, topk_error_from_logits
from .model import (
    Checkpoint,
    Model,
    NetworkConfig,
    bbox_head,
    build,
    classification_head,
    head_swap,
    model_from_checkpoint,
)
from .nn import softmax_xent_soft

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 32
    epochs: int = 10
    seed: int = 0
    lr_decay: float = 0.1
    lr_decay_every: int = 0  # epochs; 0 disables decay
    held_out_classes: tuple = ()
    init: Union[None, str, Path, Checkpoint] = None

    def __post_init__(self):
        object.__setattr__(self, "held_out_classes", tuple(sorted(set(self.held_out_classes))))
        if self.lr < 0:
            raise ConfigError(f"learning rate must be >= 0, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0 or self.weight_decay < 0 or self.lr_decay_every < 0:
            raise ConfigError("epochs, weight_decay and lr_decay_every must be >= 0")

    def lr_at(self, epoch: int) -> float:
        if not self.lr_decay_every:
            return self.lr
        return self.lr * self.lr_decay ** (epoch // self.lr_decay_every)


@dataclass(frozen=True)
class NMSParams:
    iou_threshold: float = 0.5
    score_threshold: float = 0.01
    max_detections: int = 5


@dataclass(frozen=True)
class EpochLog:
    epoch: int
    train_loss: float
    val_metric: float
    wall_time: float = field(default=0.0, compare=False)


@dataclass
class TrainLog:
    metric: str
    epochs: list = field(default_factory=list)
    best_epoch: int = -1

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", self.metric, "wall_time"])
            for e in self.epochs:
                w.writerow([e.epoch, f"{e.train_loss:.9g}", f"{e.val_metric:.9g}", f"{e.wall_time:.3f}"])


def sgd_step(params: dict, grads: dict, velocity: dict, config: TrainConfig, lr: Optional[float] = None):
    """In-place momentum step: ``v = m*v - lr*(g + wd*p); p += v``.

    ``lr`` overrides ``config.lr`` (used for step decay).
    """
    lr = config.lr if lr is None else lr
    for name, p in params.items():
        g, v = grads[name], velocity[name]
        if g.shape != p.shape or v.shape != p.shape:
            raise ValueError(f"shape mismatch for {name!r}: param {p.shape}, grad {g.shape}, velocity {v.shape}")
        v *= config.momentum
        v -= lr * (g + config.weight_decay * p)
        p += v
    return params, velocity


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def _fit(model: Model, x: np.ndarray, targets: np.ndarray, config: TrainConfig, validate, metric: str,
         higher_is_better: bool):
    """Shared minibatch loop; keeps the parameters of the best validation epoch.

    ``validate`` returns ``None`` when there is nothing to validate on; the
    last epoch is kept then.
    """
    params = model.named_params()
    velocity = {k: np.zeros_like(v) for k, v in params.items()}
    best_params = {k: v.copy() for k, v in params.items()}
    best = None
    log_ = TrainLog(metric)
    for epoch in range(config.epochs):
        start = time.perf_counter()
        lr = config.lr_at(epoch)
        order = epoch_order(len(x), config.seed, epoch)
        losses = []
        for i in range(0, len(order), config.batch_size):
            idx = order[i:i + config.batch_size]
            logits = model.forward(x[idx])
            loss, dlogits = softmax_xent_soft(logits, targets[idx])
            model.backward(dlogits)
            sgd_step(params, model.named_grads(), velocity, config, lr)
            losses.append(loss * len(idx))
        value = validate(model)
        value = float("nan") if value is None else float(value)
        entry = EpochLog(epoch, float(np.sum(losses) / len(x)), value, time.perf_counter() - start)
        log_.epochs.append(entry)
        log.info("epoch %d loss %.4f %s %.4f (%.1fs)", epoch, entry.train_loss, metric, value, entry.wall_time)
        improved = best is None or (value > best if higher_is_better else value < best)
        if np.isnan(value) or improved:
            best, log_.best_epoch = value, epoch
            best_params = {k: v.copy() for k, v in params.items()}
    model.set_params(best_params)
    return model, log_


def _split(records, split):
    return [r for r in records if r.split == split]


def _initial_model(network_config: NetworkConfig, config: TrainConfig) -> Model:
    if config.init is None:
        return build(network_config)
    log.info("initializing from checkpoint via head swap (%s head)", network_config.head.kind)
    return head_swap(config.init, network_config)


def train_classification(records, config: TrainConfig, network_config: NetworkConfig):
    """Train a classification head on one-hot class targets.

    Returns ``(checkpoint, log)`` for the epoch with the lowest top-1
    validation error (the final epoch if there is no validation split).
    """
    num_classes = network_config.head.num_classes
    if network_config.head.kind != "classification":
        network_config = replace(network_config, head=classification_head(1 + max(r.class_id for r in records)))
        num_classes = network_config.head.num_classes
    train = _split(records, "train")
    val = _split(records, "val")
    if not train:
        raise DataError("no training records for classification")
    if any(r.class_id >= num_classes for r in records):
        raise DataError(f"class ids exceed the head's {num_classes} classes")
    x = load_images(train)
    targets = np.eye(num_classes)[[r.class_id for r in train]]
    x_val = load_images(val) if val else None
    y_val = np.array([r.class_id for r in val])

    def validate(model):
        if x_val is None:
            return None
        return topk_error_from_logits(model.predict_logits(x_val), y_val, 1)

    model = _initial_model(network_config, config)
    model, log_ = _fit(model, x, targets, config, validate, "val_top1_error", higher_is_better=False)
    return model.to_checkpoint(), log_


def detection_targets(records, grid) -> np.ndarray:
    return np.stack([bbox_space.target_distribution(r.boxes, grid) for r in records])


def detect_records(model: Model, records, nms_params: NMSParams = NMSParams(), images=None) -> list:
    """NMS detections for each record's image."""
    if images is None:
        images = load_images(records)
    dists = predict_distributions(model, images)
    grid = model.config.head.grid
    return [nms(d, grid, nms_params.iou_threshold, nms_params.score_threshold, nms_params.max_detections)
            for d in dists]


def detection_auc(model: Model, records, nms_params: NMSParams = NMSParams(), iou_match_threshold: float = 0.5,
                  images=None):
    dets = detect_records(model, records, nms_params, images)
    return evaluate_detections(dets, [r.boxes for r in records], iou_match_threshold)


def train_detection(records, config: TrainConfig, network_config: NetworkConfig,
                    nms_params: NMSParams = NMSParams(), iou_match_threshold: float = 0.5):
    """Train the bbox head on Gaussian-smoothed cell targets.

    Box labels of ``config.held_out_classes`` are withheld first; only
    records that still carry box labels enter the loss. Class labels are
    never used. Returns ``(checkpoint, log)`` for the epoch with the best
    validation AUC over the box-labelled validation records.
    """
    if network_config.head.kind != "bbox":
        network_config = replace(network_config, head=bbox_head())
    grid = network_config.head.grid
    records = withhold_boxes(records, config.held_out_classes)
    labelled = [r for r in records if r.has_bbox_labels]
    train = _split(labelled, "train")
    val = _split(labelled, "val")
    if not train:
        raise DataError("no bbox-labeled records left for detection training")
    log.info("detection training: %d labelled train images, per-class (images, boxes): %s",
             len(train), class_tallies(records, "train"))
    x = load_images(train)
    targets = detection_targets(train, grid)
    x_val = load_images(val) if val else None

    def validate(model):
        if x_val is None:
            return None
        return detection_auc(model, val, nms_params, iou_match_threshold, images=x_val).auc

    model = _initial_model(network_config, config)
    model, log_ = _fit(model, x, targets, config, validate, "val_auc", higher_is_better=True)
    return model.to_checkpoint(), log_


# ---------------------------------------------------------------------------
# Experiment protocols
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ExperimentConfig:
    """Budgets and settings shared by the pretraining experiments.

    ``network`` supplies the trunk; heads are set per run. Seed ``s`` sets
    both the network init seed and the shuffling seed of every run.
    """

    network: NetworkConfig = field(default_factory=NetworkConfig)
    classify: TrainConfig = field(default_factory=TrainConfig)
    detect: TrainConfig = field(default_factory=TrainConfig)
    held_out_classes: tuple = (8, 9)
    seeds: tuple = (0, 1, 2, 3, 4)
    nms: NMSParams = field(default_factory=NMSParams)
    iou_match_threshold: float = 0.5

    @property
    def grid(self):
        head = self.network.head
        return head.grid if head.kind == "bbox" else bbox_head().grid


HELDOUT_CELLS = (("pretrained", "withheld"), ("pretrained", "all"), ("random", "withheld"), ("random", "all"))


@dataclass
class CellResult:
    init: str
    boxes: str
    heldout_auc: list = field(default_factory=list)
    all_val_auc: list = field(default_factory=list)
    report: Optional[EvalReport] = None  # held-out evaluation of the first seed
    checkpoint: Optional[Checkpoint] = None  # first seed
    logs: list = field(default_factory=list)

    @property
    def name(self) -> str:
        return f"{self.init}_{self.boxes}"


@dataclass
class HeldoutReport:
    cells: dict
    seeds: tuple
    held_out_classes: tuple
    uniform_baseline_auc: float
    prior_baseline_auc: float
    pretrain_logs: list = field(default_factory=list)

    def mean_auc(self, init: str, boxes: str, which: str = "heldout_auc") -> float:
        return float(np.mean(getattr(self.cells[(init, boxes)], which)))

    def summary_rows(self) -> list:
        rows = []
        for key in HELDOUT_CELLS:
            cell = self.cells[key]
            for seed, ho, al in zip(self.seeds, cell.heldout_auc, cell.all_val_auc):
                rows.append({"cell": cell.name, "init": cell.init, "boxes": cell.boxes, "seed": seed,
                             "heldout_auc": ho, "all_val_auc": al})
            rows.append({"cell": cell.name, "init": cell.init, "boxes": cell.boxes, "seed": "mean",
                         "heldout_auc": float(np.mean(cell.heldout_auc)),
                         "all_val_auc": float(np.mean(cell.all_val_auc))})
        for name, value in (("uniform_baseline", self.uniform_baseline_auc), ("prior_baseline", self.prior_baseline_auc)):
            rows.append({"cell": name, "init": "", "boxes": "", "seed": "", "heldout_auc": value, "all_val_auc": ""})
        return rows

    def table(self) -> str:
        """Plain-text analog of the two AUC tables (held-out validation images)."""
        lines = [f"held-out classes {list(self.held_out_classes)}, mean over seeds {list(self.seeds)}",
                 f"{'':12s}{'boxes withheld':>16s}{'all boxes':>12s}"]
        for init in ("pretrained", "random"):
            lines.append(f"{init:12s}{self.mean_auc(init, 'withheld'):16.3f}{self.mean_auc(init, 'all'):12.3f}")
        lines.append(f"uniform-distribution baseline {self.uniform_baseline_auc:.4f}, "
                     f"training-prior baseline {self.prior_baseline_auc:.4f}")
        return "\n".join(lines)


def _with_seed(network: NetworkConfig, config: TrainConfig, seed: int, **changes):
    return replace(network, init_seed=seed), replace(config, seed=seed, **changes)


def constant_baseline_auc(dist: np.ndarray, records, grid, nms_params: NMSParams, iou_match_threshold: float) -> float:
    """AUC of a detector that outputs ``dist`` for every image.

    The score floor is dropped so a flat distribution still yields boxes.
    """
    dets = nms(dist, grid, nms_params.iou_threshold, 0.0, nms_params.max_detections)
    return evaluate_detections([dets] * len(records), [r.boxes for r in records], iou_match_threshold).auc


def run_heldout_experiment(records, exp: ExperimentConfig) -> HeldoutReport:
    """{pretrained, random} x {held-out boxes withheld, all boxes} detection grid.

    Every cell is scored by AUC on the validation images of the held-out
    classes (their ground truth included) and on all validation images.
    """
    if len(set(exp.held_out_classes)) < 1 or len({r.class_id for r in records}) < 2:
        raise DataError("held-out experiment needs at least two classes and one held-out class")
    grid = exp.grid
    net_bbox = replace(exp.network, head=bbox_head(grid))
    num_classes = 1 + max(r.class_id for r in records)
    net_cls = replace(exp.network, head=classification_head(num_classes))
    val = [r for r in records if r.split == "val"]
    held_val = [r for r in val if r.class_id in set(exp.held_out_classes)]
    if not held_val:
        raise DataError("no validation records of the held-out classes")
    x_val, x_held = load_images(val), load_images(held_val)

    cells = {key: CellResult(*key) for key in HELDOUT_CELLS}
    pretrain_logs = []
    for seed in exp.seeds:
        net, cls_cfg = _with_seed(net_cls, exp.classify, seed)
        log.info("seed %d: classification pretraining", seed)
        pretrained, plog = train_classification(records, cls_cfg, net)
        pretrain_logs.append(plog)
        for key in HELDOUT_CELLS:
            init, boxes = key
            held = exp.held_out_classes if boxes == "withheld" else ()
            net, det_cfg = _with_seed(net_bbox, exp.detect, seed, held_out_classes=held,
                                      init=pretrained if init == "pretrained" else None)
            log.info("seed %d: detection %s/%s", seed, init, boxes)
            ckpt, dlog = train_detection(records, det_cfg, net, exp.nms, exp.iou_match_threshold)
            model = model_from_checkpoint(ckpt)
            held_report = detection_auc(model, held_val, exp.nms, exp.iou_match_threshold, images=x_held)
            all_report = detection_auc(model, val, exp.nms, exp.iou_match_threshold, images=x_val)
            cell = cells[key]
            cell.heldout_auc.append(held_report.auc)
            cell.all_val_auc.append(all_report.auc)
            cell.logs.append(dlog)
            if cell.checkpoint is None:
                cell.checkpoint, cell.report = ckpt, held_report
            log.info("seed %d %s: held-out AUC %.4f, all-val AUC %.4f", seed, cell.name,
                     held_report.auc, all_report.auc)

    uniform = np.full(grid.size, 1.0 / grid.size)
    train_labelled = [r for r in withhold_boxes(records, exp.held_out_classes)
                      if r.has_bbox_labels and r.split == "train"]
    prior = detection_targets(train_labelled, grid).mean(axis=0)
    return HeldoutReport(
        cells, tuple(exp.seeds), tuple(exp.held_out_classes),
        constant_baseline_auc(uniform, held_val, grid, exp.nms, exp.iou_match_threshold),
        constant_baseline_auc(prior, held_val, grid, exp.nms, exp.iou_match_threshold),
        pretrain_logs,
    )


@dataclass
class TransferReport:
    rows: list  # dicts: seed, arm, top1_error, top5_error
    logs: dict = field(default_factory=dict)  # (arm, seed) -> TrainLog, arm "detection" is pretraining

    def mean(self, arm: str, column: str = "top1_error") -> float:
        return float(np.mean([r[column] for r in self.rows if r["arm"] == arm]))


def run_recognition_transfer(records, exp: ExperimentConfig) -> TransferReport:
    """Classification from a detection-trained trunk vs from random init.

    Both arms use the same classification budget and seed; detection
    pretraining sees every box label.
    """
    if any(r.class_id < 0 for r in records):
        raise DataError("every record needs a class label")
    grid = exp.grid
    num_classes = 1 + max(r.class_id for r in records)
    net_bbox = replace(exp.network, head=bbox_head(grid))
    net_cls = replace(exp.network, head=classification_head(num_classes))
    val = [r for r in records if r.split == "val"]
    rows, logs = [], {}
    k5 = min(5, num_classes)
    for seed in exp.seeds:
        net, det_cfg = _with_seed(net_bbox, exp.detect, seed, held_out_classes=(), init=None)
        log.info("seed %d: detection pretraining", seed)
        det_ckpt, logs[("detection", seed)] = train_detection(records, det_cfg, net, exp.nms, exp.iou_match_threshold)
        for arm, init in (("detection_pretrained", det_ckpt), ("random", None)):
            net, cls_cfg = _with_seed(net_cls, exp.classify, seed, init=init)
            log.info("seed %d: classification, %s init", seed, arm)
            ckpt, logs[(arm, seed)] = train_classification(records, cls_cfg, net)
            model = model_from_checkpoint(ckpt)
            logits = model.predict_logits(load_images(val))
            labels = [r.class_id for r in val]
            rows.append({"seed": seed, "arm": arm,
                         "top1_error": topk_error_from_logits(logits, labels, 1),
                         "top5_error": topk_error_from_logits(logits, labels, k5)})
            log.info("seed %d %s: top-1 %.4f top-5 %.4f", seed, arm, rows[-1]["top1_error"], rows[-1]["top5_error"])
    return TransferReport(rows, logs)
