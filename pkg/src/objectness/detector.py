"""Inference: cell distributions from a bbox-head model, and NMS over them."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bbox import Box, BBoxGrid, cell_boxes, iou_matrix
from .nn import softmax


@dataclass(frozen=True)
class Detection:
    box: Box
    score: float

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"detection score must lie in [0, 1], got {self.score}")


def predict_distributions(model, images: np.ndarray, batch_size: int = 128) -> np.ndarray:
    """Softmax over the bbox head for a batch of images ``(N, C, H, W)``."""
    if model.config.head.kind != "bbox":
        raise ValueError("predict_distribution needs a model with a bbox head")
    images = np.asarray(images, dtype=np.float32)
    if images.shape[1:] != tuple(model.config.input_dims):
        raise ValueError(f"images of shape {images.shape[1:]} do not match model input {model.config.input_dims}")
    out = [softmax(model.forward(images[i:i + batch_size]).astype(np.float64))
           for i in range(0, len(images), batch_size)]
    return np.concatenate(out) if out else np.zeros((0, model.config.head.grid.size))


def predict_distribution(model, image: np.ndarray) -> np.ndarray:
    """Cell distribution for a single ``(C, H, W)`` image."""
    image = np.asarray(image)
    if image.ndim != 3:
        raise ValueError(f"expected a single (C, H, W) image, got shape {image.shape}")
    return predict_distributions(model, image[None])[0]


def nms(dist, grid: BBoxGrid, iou_threshold: float = 0.5, score_threshold: float = 0.01,
        max_detections: int = 5) -> list:
    """Greedy non-max suppression over a cell distribution.

    Repeatedly takes the most probable live cell (lowest index on ties),
    emits its decoded box with that cell's probability, and kills every
    live cell whose decoded box overlaps it with IoU above
    ``iou_threshold``. Stops below ``score_threshold`` or at
    ``max_detections``.
    """
    if not (0.0 <= iou_threshold <= 1.0 and 0.0 <= score_threshold <= 1.0):
        raise ValueError("iou_threshold and score_threshold must lie in [0, 1]")
    if max_detections < 1:
        raise ValueError("max_detections must be >= 1")
    probs = np.asarray(dist, dtype=np.float64).reshape(-1)
    if probs.size != grid.size:
        raise ValueError(f"distribution has {probs.size} cells, grid has {grid.size}")
    boxes = cell_boxes(grid)
    live = np.where(probs >= score_threshold, probs, -np.inf)
    out = []
    while len(out) < max_detections:
        best = int(np.argmax(live))
        if live[best] == -np.inf:
            break
        out.append(Detection(Box(*boxes[best]), float(min(probs[best], 1.0))))
        overlap = iou_matrix(boxes[best], boxes)[0]
        live[overlap > iou_threshold] = -np.inf
        live[best] = -np.inf
    return out
