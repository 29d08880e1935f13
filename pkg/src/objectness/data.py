"""Synthetic "shapes" detection data and the JSON-lines manifest.

Each image holds one to ``max_objects`` non-touching objects of a single
class over a cluttered grey background. A class is a (shape, fill) pair.
Objects are drawn in saturated colours and clutter is nearly achromatic, so
an object's extent is recoverable from the pixels alone; the manifest box is
the exact bounding rectangle of the rendered object mask.
"""

from __future__ import annotations

import colorsys
import hashlib
import json
import logging
import os
from collections import Counter
from dataclasses import dataclass, field, replace
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
from PIL import Image

from .bbox import Box
from .errors import ConfigError, DataError

log = logging.getLogger(__name__)

SHAPES = ("rectangle", "ellipse", "triangle", "diamond", "cross", "ring")
FILLS = ("solid", "striped", "checkered")
MANIFEST_NAME = "manifest.jsonl"


def class_name(class_id: int, num_fills: int = 2) -> str:
    return f"{SHAPES[class_id // num_fills]}/{FILLS[class_id % num_fills]}"


@dataclass(frozen=True)
class SynthConfig:
    num_classes: int = 10
    train_images: int = 2000
    val_images: int = 400
    image_size: int = 32
    max_objects: int = 2
    scale_range: tuple = (0.25, 0.6)
    aspect_range: tuple = (0.6, 1.66)
    clutter: float = 0.15
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "scale_range", tuple(float(v) for v in self.scale_range))
        object.__setattr__(self, "aspect_range", tuple(float(v) for v in self.aspect_range))
        if not 2 <= self.num_classes <= len(SHAPES) * len(FILLS):
            raise ConfigError(f"num_classes must lie in [2, {len(SHAPES) * len(FILLS)}], got {self.num_classes}")
        if self.image_size < 16:
            raise ConfigError(f"image_size must be >= 16, got {self.image_size}")
        if self.max_objects < 1:
            raise ConfigError(f"max_objects must be >= 1, got {self.max_objects}")
        if self.train_images < 0 or self.val_images < 0:
            raise ConfigError("image counts must be non-negative")
        lo, hi = self.scale_range
        if not 0 < lo <= hi < 1:
            raise ConfigError(f"scale_range must lie within (0, 1), got {self.scale_range}")
        a_lo, a_hi = self.aspect_range
        if not 0 < a_lo <= a_hi:
            raise ConfigError(f"aspect_range must satisfy 0 < lo <= hi, got {self.aspect_range}")
        if hi * max(a_hi, 1 / a_lo) ** 0.5 >= 1.0:
            raise ConfigError("largest object (scale_range x aspect_range) does not fit in the image")
        if not 0 <= self.clutter <= 1:
            raise ConfigError(f"clutter must lie in [0, 1], got {self.clutter}")

    @property
    def num_fills(self) -> int:
        # fewest fills such that the shapes cover all classes
        return 2 if self.num_classes <= 2 * len(SHAPES) else 3


@dataclass(frozen=True)
class SampleRecord:
    image_path: Path
    class_id: int
    boxes: tuple = ()
    has_bbox_labels: bool = True
    split: str = "train"

    def validate(self) -> None:
        if self.split not in ("train", "val"):
            raise DataError(f"{self.image_path}: split must be 'train' or 'val', got {self.split!r}")
        if self.class_id < 0:
            raise DataError(f"{self.image_path}: negative class_id {self.class_id}")
        if not self.has_bbox_labels and len(self.boxes):
            raise DataError(f"{self.image_path}: boxes present although has_bbox_labels is false")
        for b in self.boxes:
            if not isinstance(b, Box):
                raise DataError(f"{self.image_path}: box {b!r} is not a Box")

    def load_image(self) -> np.ndarray:
        """Image as ``(H, W, 3)`` uint8."""
        return _read_png(str(self.image_path))

    def to_json(self, root: Path) -> str:
        return json.dumps({
            "image": Path(os.path.relpath(self.image_path, root)).as_posix(),
            "class_id": self.class_id,
            "boxes": [list(b.as_tuple()) for b in self.boxes],
            "has_bbox_labels": self.has_bbox_labels,
            "split": self.split,
        })


@lru_cache(maxsize=None)
def _read_png(path: str) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"))
    except FileNotFoundError as exc:
        raise DataError(f"image file not found: {path}") from exc
    except OSError as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc
    arr.setflags(write=False)
    return arr


def read_image(path) -> np.ndarray:
    """Read an image file as ``(H, W, 3)`` uint8; raises DataError if unreadable."""
    return _read_png(str(path))


def image_to_tensor(image: np.ndarray) -> np.ndarray:
    """uint8 ``(H, W, 3)`` -> float32 ``(3, H, W)`` scaled to [-1, 1]."""
    return (np.asarray(image, dtype=np.float32).transpose(2, 0, 1) / 127.5 - 1.0).astype(np.float32)


def load_images(records: Iterable[SampleRecord]) -> np.ndarray:
    """Stack the images of ``records`` into a float32 ``(N, 3, H, W)`` batch."""
    arrays = [image_to_tensor(r.load_image()) for r in records]
    if not arrays:
        return np.zeros((0, 3, 1, 1), np.float32)
    shapes = {a.shape for a in arrays}
    if len(shapes) > 1:
        raise DataError(f"images have differing shapes: {sorted(shapes)}")
    return np.stack(arrays)


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------

def _shape_mask(shape: str, h: int, w: int) -> np.ndarray:
    y, x = np.mgrid[0:h, 0:w]
    # pixel centers in [-1, 1]
    u = (x + 0.5) / w * 2 - 1
    v = (y + 0.5) / h * 2 - 1
    if shape == "rectangle":
        return np.ones((h, w), bool)
    if shape == "ellipse":
        return u * u + v * v <= 1.0
    if shape == "triangle":
        return np.abs(u) <= (v + 1) / 2 + 1.0 / w
    if shape == "diamond":
        return np.abs(u) + np.abs(v) <= 1.0
    if shape == "cross":
        return (np.abs(u) <= 1 / 3 + 1e-9) | (np.abs(v) <= 1 / 3 + 1e-9)
    if shape == "ring":
        r = u * u + v * v
        return (r <= 1.0) & (r >= 0.3)
    raise ValueError(shape)


def _fill_colors(fill: str, h: int, w: int, rgb: np.ndarray, dark: np.ndarray) -> np.ndarray:
    y, x = np.mgrid[0:h, 0:w]
    if fill == "solid":
        alt = np.zeros((h, w), bool)
    elif fill == "striped":
        alt = (y // 2) % 2 == 1
    else:
        alt = ((y // 2) + (x // 2)) % 2 == 1
    return np.where(alt[..., None], dark, rgb)


def _object_color(rng: np.random.Generator) -> tuple:
    hue = rng.uniform()
    sat = rng.uniform(0.75, 1.0)
    val = rng.uniform(0.7, 1.0)
    bright = np.array(colorsys.hsv_to_rgb(hue, sat, val)) * 255
    dark = np.array(colorsys.hsv_to_rgb(hue, sat, val * 0.5)) * 255
    return np.round(bright), np.round(dark)


def _background(rng: np.random.Generator, size: int, clutter: float) -> np.ndarray:
    base = rng.uniform(60, 200)
    img = np.full((size, size, 3), base) + rng.normal(0, 6, size=(size, size, 1))
    n_strokes = rng.poisson(clutter * size)
    for _ in range(n_strokes):
        grey = rng.uniform(0, 255)
        tint = rng.uniform(-5, 5, size=3)
        if rng.uniform() < 0.5:
            r, c0 = rng.integers(size), rng.integers(size)
            length = rng.integers(3, size // 2)
            img[r, c0:c0 + length] = grey + tint
        else:
            c, r0 = rng.integers(size), rng.integers(size)
            length = rng.integers(3, size // 2)
            img[r0:r0 + length, c] = grey + tint
    return img


def render_image(cfg: SynthConfig, class_id: int, rng: np.random.Generator):
    """Render one image; returns ``(uint8 image, list of pixel rects)``.

    Pixel rects are ``(row0, col0, row1, col1)`` with exclusive ends.
    """
    size = cfg.image_size
    shape = SHAPES[class_id // cfg.num_fills]
    fill = FILLS[class_id % cfg.num_fills]
    img = _background(rng, size, cfg.clutter)
    n_objects = int(rng.integers(1, cfg.max_objects + 1))
    occupied = np.zeros((size, size), bool)
    rects = []
    for _ in range(n_objects):
        for _attempt in range(50):
            s = rng.uniform(*cfg.scale_range)
            a = np.exp(rng.uniform(np.log(cfg.aspect_range[0]), np.log(cfg.aspect_range[1])))
            w = int(min(size, max(3, round(s * np.sqrt(a) * size))))
            h = int(min(size, max(3, round(s / np.sqrt(a) * size))))
            r0 = int(rng.integers(0, size - h + 1))
            c0 = int(rng.integers(0, size - w + 1))
            # keep a one-pixel gap to every earlier object
            if not occupied[max(r0 - 1, 0):r0 + h + 1, max(c0 - 1, 0):c0 + w + 1].any():
                break
        else:
            break
        mask = _shape_mask(shape, h, w)
        rows, cols = np.flatnonzero(mask.any(axis=1)), np.flatnonzero(mask.any(axis=0))
        rgb, dark = _object_color(rng)
        colors = _fill_colors(fill, h, w, rgb, dark)
        region = img[r0:r0 + h, c0:c0 + w]
        region[mask] = colors[mask]
        occupied[r0:r0 + h, c0:c0 + w] = True
        rects.append((r0 + rows[0], c0 + cols[0], r0 + rows[-1] + 1, c0 + cols[-1] + 1))
    return np.clip(np.round(img), 0, 255).astype(np.uint8), rects


def _rect_to_box(rect, size: int) -> Box:
    r0, c0, r1, c1 = rect
    return Box(c0 / size, r0 / size, c1 / size, r1 / size)


def generate(cfg: SynthConfig, out_dir) -> Path:
    """Render the dataset into ``out_dir``; returns the manifest path.

    Image ``i`` of a split draws from its own stream seeded by
    ``(seed, split, i)`` and has class ``i % num_classes``.
    """
    out_dir = Path(out_dir)
    try:
        (out_dir / "images").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out_dir}: {exc}") from exc
    lines = []
    for split_code, (split, count) in enumerate((("train", cfg.train_images), ("val", cfg.val_images))):
        for i in range(count):
            class_id = i % cfg.num_classes
            rng = np.random.default_rng([cfg.seed, split_code, i])
            img, rects = render_image(cfg, class_id, rng)
            rel = Path("images") / f"{split}_{i:05d}.png"
            Image.fromarray(img).save(out_dir / rel, format="PNG")
            boxes = tuple(_rect_to_box(r, cfg.image_size) for r in rects)
            lines.append(SampleRecord(out_dir / rel, class_id, boxes, True, split).to_json(out_dir))
    manifest = out_dir / MANIFEST_NAME
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


def dataset_checksum(manifest) -> str:
    """SHA-256 over the manifest bytes and every referenced image's bytes."""
    manifest = Path(manifest)
    h = hashlib.sha256(manifest.read_bytes())
    for rec in load_manifest(manifest):
        h.update(Path(rec.image_path).read_bytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------

def load_manifest(path) -> list:
    """Parse a JSON-lines manifest into validated :class:`SampleRecord` s.

    Image paths resolve relative to the manifest's directory; images are
    only opened on first access.
    """
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    root = path.parent
    records = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            d = json.loads(line)
            image = d["image"]
            class_id = d["class_id"]
            has_bbox = d["has_bbox_labels"]
            split = d["split"]
            raw_boxes = d["boxes"]
            if not isinstance(class_id, int) or not isinstance(has_bbox, bool) or not isinstance(image, str):
                raise TypeError("field types do not match the manifest schema")
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise DataError(f"{path}:{lineno}: malformed manifest line: {exc}") from exc
        try:
            boxes = tuple(Box(*map(float, b)) for b in raw_boxes)
        except (TypeError, ValueError) as exc:
            raise DataError(f"{path}:{lineno}: invalid box in record {image!r}: {exc}") from exc
        rec = SampleRecord(root / image, class_id, boxes, has_bbox, split)
        try:
            rec.validate()
        except DataError as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from exc
        records.append(rec)
    return records


def write_manifest(records: Iterable[SampleRecord], path) -> None:
    path = Path(path)
    root = path.parent.resolve()
    lines = [replace(r, image_path=Path(r.image_path).resolve()).to_json(root) for r in records]
    path.write_text("\n".join(lines) + "\n")


def class_tallies(records: Iterable[SampleRecord], split: Optional[str] = None) -> dict:
    """Per-class ``(images, boxes)`` counts."""
    images, boxes = Counter(), Counter()
    for r in records:
        if split is None or r.split == split:
            images[r.class_id] += 1
            boxes[r.class_id] += len(r.boxes) if r.has_bbox_labels else 0
    return {c: (images[c], boxes[c]) for c in sorted(images)}


def withhold_boxes(records, held_out_classes) -> list:
    """Drop box labels (keeping class labels) for records of ``held_out_classes``."""
    held_out = set(held_out_classes)
    observed = {r.class_id for r in records}
    unknown = held_out - observed
    if unknown:
        raise DataError(f"held-out classes {sorted(unknown)} do not occur in the records")
    return [
        replace(r, boxes=(), has_bbox_labels=False) if r.class_id in held_out else r
        for r in records
    ]
