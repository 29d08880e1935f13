"""Class-generic object detection over a discretized bounding-box space.

A small convolutional network predicts a probability distribution over a
4-D grid of boxes (position, scale, aspect). It is trained against
Gaussian-smoothed targets, decoded with non-max suppression and scored with
precision-recall AUC. Classification and detection heads share one trunk,
so either task can pretrain the other.
"""

from .bbox import Box, BBoxGrid, box_params, decode, encode, iou, target_distribution
from .detector import Detection, nms, predict_distribution
from .metrics import auc, match_detections, pr_curve, topk_error
from .model import NetworkConfig, bbox_head, build, classification_head, head_swap, load, save

__version__ = "0.1.0"
