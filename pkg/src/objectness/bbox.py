"""Discretized bounding-box space.

A box is parameterized by its center ``(cx, cy)``, scale ``sqrt(w*h)`` and
aspect ratio ``w/h``. The grid bins center coordinates uniformly over
``[0, 1]`` and scale/aspect log-uniformly over their ranges; a flat cell
index is row-major over ``(ix, iy, is, ia)``.
"""

from __future__ import annotations

import logging
import math
import sys
from collections import Counter
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

#: Number of encode calls that clamped scale or aspect to a boundary bin.
CLAMP_COUNTER: Counter = Counter()


@dataclass(frozen=True)
class Box:
    """Axis-aligned box in normalized image coordinates."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        coords = (self.x_min, self.y_min, self.x_max, self.y_max)
        if not all(0.0 <= v <= 1.0 for v in coords):
            raise ValueError(f"box coordinates must lie in [0, 1]: {coords}")
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(f"box must have positive width and height: {coords}")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    def as_tuple(self) -> tuple:
        return (self.x_min, self.y_min, self.x_max, self.y_max)


@dataclass(frozen=True)
class BBoxGrid:
    """The 4-D cell grid plus per-dimension Gaussian widths (in bins)."""

    nx: int = 8
    ny: int = 8
    ns: int = 4
    na: int = 3
    scale_range: tuple = (0.1, 1.0)
    aspect_range: tuple = (1.0 / 3.0, 3.0)
    sigma: tuple = (0.5, 0.5, 0.5, 0.5)

    def __post_init__(self):
        object.__setattr__(self, "scale_range", tuple(float(v) for v in self.scale_range))
        object.__setattr__(self, "aspect_range", tuple(float(v) for v in self.aspect_range))
        sigma = self.sigma
        if np.isscalar(sigma):
            sigma = (sigma,) * 4
        object.__setattr__(self, "sigma", tuple(float(v) for v in sigma))
        if min(self.shape) < 1:
            raise ValueError(f"bin counts must be >= 1, got {self.shape}")
        s_min, s_max = self.scale_range
        if not 0 < s_min < s_max <= 1:
            raise ValueError(f"scale_range must satisfy 0 < s_min < s_max <= 1, got {self.scale_range}")
        a_min, a_max = self.aspect_range
        if not 0 < a_min < a_max:
            raise ValueError(f"aspect_range must satisfy 0 < a_min < a_max, got {self.aspect_range}")
        if len(self.sigma) != 4 or min(self.sigma) <= 0:
            raise ValueError(f"sigma must be four positive widths, got {self.sigma}")

    @property
    def shape(self) -> tuple:
        return (self.nx, self.ny, self.ns, self.na)

    @property
    def size(self) -> int:
        return self.nx * self.ny * self.ns * self.na

    def to_dict(self) -> dict:
        return {
            "nx": self.nx, "ny": self.ny, "ns": self.ns, "na": self.na,
            "scale_range": list(self.scale_range),
            "aspect_range": list(self.aspect_range),
            "sigma": list(self.sigma),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BBoxGrid":
        d = dict(d)
        for key in ("scale_range", "aspect_range", "sigma"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


def box_params(box: Box) -> tuple:
    """Return ``(cx, cy, scale, aspect)`` of ``box``."""
    w, h = box.width, box.height
    area = w * h
    # the product underflows for vanishingly small boxes
    s = math.sqrt(area) if area >= sys.float_info.min else math.sqrt(w) * math.sqrt(h)
    return ((box.x_min + box.x_max) / 2, (box.y_min + box.y_max) / 2, s, w / h)


def _continuous_coords(params: Sequence[float], grid: BBoxGrid) -> np.ndarray:
    """Position of a box along each grid axis, in bin units ``[0, n]``."""
    cx, cy, s, a = params
    s_lo, s_hi = (math.log(v) for v in grid.scale_range)
    a_lo, a_hi = (math.log(v) for v in grid.aspect_range)
    return np.array([
        cx * grid.nx,
        cy * grid.ny,
        (math.log(s) - s_lo) / (s_hi - s_lo) * grid.ns,
        (math.log(a) - a_lo) / (a_hi - a_lo) * grid.na,
    ])


def _clamped_coords(box: Box, grid: BBoxGrid) -> np.ndarray:
    t = _continuous_coords(box_params(box), grid)
    n = np.array(grid.shape)
    for axis, name in ((2, "scale"), (3, "aspect")):
        if t[axis] < 0 or t[axis] > n[axis]:
            CLAMP_COUNTER[name] += 1
            log.debug("%s of %s outside grid range, clamped", name, box)
    return np.clip(t, 0.0, n)


def _bins(t: np.ndarray, grid: BBoxGrid) -> tuple:
    return tuple(int(v) for v in np.minimum(np.floor(t), np.array(grid.shape) - 1))


def flat_index(bins: Sequence[int], grid: BBoxGrid) -> int:
    ix, iy, is_, ia = bins
    return ((ix * grid.ny + iy) * grid.ns + is_) * grid.na + ia


def unravel(index: int, grid: BBoxGrid) -> tuple:
    return tuple(int(v) for v in np.unravel_index(index, grid.shape))


def encode(box: Box, grid: BBoxGrid) -> int:
    """Flat index of the grid cell containing ``box``.

    Scale and aspect outside the grid ranges clamp to the boundary bins.
    """
    return flat_index(_bins(_clamped_coords(box, grid), grid), grid)


def _center_params(bins: Sequence[int], grid: BBoxGrid) -> tuple:
    ix, iy, is_, ia = bins
    s_lo, s_hi = (math.log(v) for v in grid.scale_range)
    a_lo, a_hi = (math.log(v) for v in grid.aspect_range)
    return (
        (ix + 0.5) / grid.nx,
        (iy + 0.5) / grid.ny,
        math.exp(s_lo + (is_ + 0.5) / grid.ns * (s_hi - s_lo)),
        math.exp(a_lo + (ia + 0.5) / grid.na * (a_hi - a_lo)),
    )


def _unclipped_box(cx, cy, s, a) -> tuple:
    w, h = s * math.sqrt(a), s / math.sqrt(a)
    return (cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)


def _fit_axis(center: float, extent: float, lo: float, hi: float):
    """Center coordinate in bin ``[lo, hi)`` keeping ``extent`` inside [0, 1], or None."""
    c_lo, c_hi = max(lo, extent / 2), min(hi, 1.0 - extent / 2)
    if c_lo >= c_hi:
        return None
    if c_lo <= center < c_hi:
        return center
    return (c_lo + c_hi) / 2


def _in_image_params(bins: Sequence[int], grid: BBoxGrid, samples: int = 401):
    """Cell parameters closest to the bin center whose box fits the image.

    Scale only ever needs to shrink to make a box fit, so for each candidate
    aspect the best scale is closed-form; aspect is searched on a fine grid.
    Returns None when no box of this cell fits inside the image.
    """
    ix, iy, is_, ia = bins
    s_lo, s_hi = (math.log(v) for v in grid.scale_range)
    a_lo, a_hi = (math.log(v) for v in grid.aspect_range)
    s_edges = (s_lo + is_ / grid.ns * (s_hi - s_lo), s_lo + (is_ + 1) / grid.ns * (s_hi - s_lo))
    a_edges = (a_lo + ia / grid.na * (a_hi - a_lo), a_lo + (ia + 1) / grid.na * (a_hi - a_lo))
    s_mid, a_mid = sum(s_edges) / 2, sum(a_edges) / 2
    # largest width/height that still leaves room for a center inside the x/y bin
    w_max = min(2 * (ix + 1) / grid.nx, 2 * (1 - ix / grid.nx), 1.0)
    h_max = min(2 * (iy + 1) / grid.ny, 2 * (1 - iy / grid.ny), 1.0)
    cand_a = a_edges[0] + np.linspace(0.0, 1.0, samples)[:-1] * (a_edges[1] - a_edges[0])
    best, best_cost = None, math.inf
    for log_a in cand_a[np.argsort(np.abs(cand_a - a_mid), kind="stable")]:
        cost_a = abs(log_a - a_mid) / (a_edges[1] - a_edges[0])
        if cost_a >= best_cost:
            break
        s_fit = min(math.log(w_max) - log_a / 2, math.log(h_max) + log_a / 2)
        log_s = min(s_mid, s_fit - 1e-9)
        if log_s <= s_edges[0]:
            continue
        s, a = math.exp(log_s), math.exp(log_a)
        cx = _fit_axis((ix + 0.5) / grid.nx, s * math.sqrt(a), ix / grid.nx, (ix + 1) / grid.nx)
        cy = _fit_axis((iy + 0.5) / grid.ny, s / math.sqrt(a), iy / grid.ny, (iy + 1) / grid.ny)
        if cx is None or cy is None:
            continue
        cost = cost_a + (s_mid - log_s) / (s_edges[1] - s_edges[0])
        if cost < best_cost:
            best, best_cost = (cx, cy, s, a), cost
    return best


def _params_to_box(cx, cy, s, a) -> tuple:
    return tuple(min(max(v, 0.0), 1.0) for v in _unclipped_box(cx, cy, s, a))


def decode(index: int, grid: BBoxGrid) -> Box:
    """Representative box of a cell.

    This is the bin-center box when it fits inside the image. Otherwise it
    is the in-image box of the same cell nearest the bin center, so that
    re-encoding lands in the same cell; cells holding no in-image box fall
    back to the clipped bin-center box.
    """
    index = int(index)
    if not 0 <= index < grid.size:
        raise IndexError(f"cell index {index} outside [0, {grid.size})")
    bins = unravel(index, grid)
    params = _center_params(bins, grid)
    raw = _unclipped_box(*params)
    if min(raw) < 0.0 or max(raw) > 1.0:
        fitted = _in_image_params(bins, grid)
        if fitted is not None:
            params = fitted
    return Box(*_params_to_box(*params))


@lru_cache(maxsize=16)
def cell_boxes(grid: BBoxGrid) -> np.ndarray:
    """Decoded boxes of every cell as a read-only ``(size, 4)`` array."""
    out = np.array([decode(i, grid).as_tuple() for i in range(grid.size)])
    out.setflags(write=False)
    return out


def iou(a: Box, b: Box) -> float:
    """Intersection over union of two boxes."""
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.width * a.height + b.width * b.height - inter)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between box arrays of shape ``(N, 4)`` and ``(M, 4)``."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(inter > 0, inter / np.where(union > 0, union, 1.0), 0.0)


_EDGE_NUDGE = 1e-6  # bins


def _axis_weights(center: float, home: int, n: int, sigma: float) -> np.ndarray:
    # Gaussian at integer bin positions, relative to the home bin so the home
    # bin always keeps weight 1 (delta limit for tiny sigma); 3-sigma cutoff.
    # A center on a bin edge is pulled just inside home so home wins the tie.
    center = min(max(center, home - 0.5 + _EDGE_NUDGE), home + 0.5 - _EDGE_NUDGE)
    d = np.arange(n) - center
    w = np.exp(-(d * d - (home - center) ** 2) / (2.0 * sigma * sigma))
    w[np.abs(d) > 3.0 * sigma] = 0.0
    w[home] = 1.0
    return w / w.sum()


def box_distribution(box: Box, grid: BBoxGrid) -> np.ndarray:
    """Normalized, truncated separable Gaussian for one box, shape ``grid.shape``."""
    t = _clamped_coords(box, grid)
    home = _bins(t, grid)
    axes = [
        _axis_weights(t[i] - 0.5, home[i], n, sig)
        for i, (n, sig) in enumerate(zip(grid.shape, grid.sigma))
    ]
    dist = np.einsum("i,j,k,l->ijkl", *axes)
    return dist / dist.sum()


def target_distribution(boxes: Iterable[Box], grid: BBoxGrid) -> np.ndarray:
    """Soft training target over all cells for the ground-truth ``boxes``.

    Each box contributes one unit of mass spread as a Gaussian around its
    fractional bin position; the sum is renormalized to a distribution.
    Multiplicities are reduced by their gcd and boxes are summed in sorted
    order, so reordering or uniformly duplicating the list changes nothing,
    not even rounding.
    """
    counts = Counter(boxes)
    if not counts:
        raise ValueError("target_distribution needs at least one box")
    g = math.gcd(*counts.values())
    total = np.zeros(grid.shape)
    for box in sorted(counts, key=Box.as_tuple):
        total += (counts[box] // g) * box_distribution(box, grid)
    return (total / total.sum()).reshape(-1)
