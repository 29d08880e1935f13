"""Scaled-down held-out-class and transfer experiments.

The full versions run through ``objn experiment``; this one uses two seeds
and a smaller dataset so it finishes in a few minutes.

Run: python demos/pretraining_experiments.py
"""

import tempfile
from pathlib import Path

from objectness import data
from objectness.config import load_run_config
from objectness.trainer import run_heldout_experiment, run_recognition_transfer

cfg = load_run_config(overrides={"data.train_images": 800, "data.val_images": 200,
                                 "experiment.seeds": [0, 1], "experiment.classify_epochs": 5,
                                 "experiment.detect_epochs": 5, "train.lr_decay_every": 4})
records = data.load_manifest(data.generate(cfg.synth, Path(tempfile.mkdtemp())))

# Boxes of classes 8 and 9 are withheld; their images still count for classification pretraining.
heldout = run_heldout_experiment(records, cfg.experiment)
print(heldout.table())

transfer = run_recognition_transfer(records, cfg.experiment)
for arm in ("detection_pretrained", "random"):
    print(f"{arm:22s} top-1 error {transfer.mean(arm):.3f}")
