"""Train a detector on a small shapes dataset, then run NMS and PR evaluation.

Run: python demos/train_and_detect.py   (a minute or two on one CPU core)
"""

import tempfile
from pathlib import Path

from objectness import data
from objectness.config import load_run_config
from objectness.metrics import evaluate_detections
from objectness.model import model_from_checkpoint
from objectness.trainer import TrainConfig, detect_records, train_detection

cfg = load_run_config(overrides={"data.train_images": 1500, "data.val_images": 200})
root = Path(tempfile.mkdtemp())
records = data.load_manifest(data.generate(cfg.synth, root))
print(f"{len(records)} images in {root}")

ckpt, log = train_detection(records, TrainConfig(epochs=8, lr_decay_every=6), cfg.network)
for e in log.epochs:
    print(f"epoch {e.epoch}: loss {e.train_loss:.3f}, val AUC {e.val_metric:.3f}")

model = model_from_checkpoint(ckpt)
val = [r for r in records if r.split == "val"]
dets = detect_records(model, val, cfg.nms)
print("first validation image:")
def fmt(box):
    return "(" + ", ".join(f"{v:.2f}" for v in box.as_tuple()) + ")"


print("  truth", ", ".join(fmt(b) for b in val[0].boxes))
for d in dets[0]:
    print(f"  score {d.score:.3f} box {fmt(d.box)}")

report = evaluate_detections(dets, [r.boxes for r in val], cfg.iou_match_threshold)
print(f"validation AUC {report.auc:.3f} over {report.total_gt} boxes")
