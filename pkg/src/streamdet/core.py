"""Shared domain types and box geometry used by every other module."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

# Class id 0 is reserved for background everywhere; ground-truth boxes are >= 1.
BACKGROUND = 0


class EmptyBoxError(ValueError):
    """Raised when a box operation would produce zero or negative area."""


@dataclass(frozen=True, order=True)
class BoundingBox:
    """Axis-aligned box in continuous corner coordinates, area = (x2-x1)*(y2-y1)."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        coords = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(c) for c in coords):
            raise ValueError(f"non-finite box coordinates {coords}")
        if self.x1 >= self.x2 or self.y1 >= self.y2:
            raise EmptyBoxError(f"box has no area: {coords}")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    def as_array(self) -> np.ndarray:
        return np.array(self.as_tuple(), dtype=np.float64)


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection over union of two valid boxes; 0 when disjoint."""
    ix = min(a.x2, b.x2) - max(a.x1, b.x1)
    iy = min(a.y2, b.y2) - max(a.y1, b.y1)
    if ix <= 0.0 or iy <= 0.0:
        return 0.0
    inter = ix * iy
    return inter / (a.area + b.area - inter)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between (N,4) and (M,4) corner-coordinate box arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ix = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    iy = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(ix, 0.0, None) * np.clip(iy, 0.0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    return inter / (area_a[:, None] + area_b[None, :] - inter)


def clip_box(b: BoundingBox, image_w: int, image_h: int) -> BoundingBox:
    """Clamp a box to [0,w]x[0,h]; raises EmptyBoxError if nothing remains."""
    if image_w <= 0 or image_h <= 0:
        raise ValueError(f"image size must be positive, got {image_w}x{image_h}")
    x1 = min(max(b.x1, 0.0), float(image_w))
    y1 = min(max(b.y1, 0.0), float(image_h))
    x2 = min(max(b.x2, 0.0), float(image_w))
    y2 = min(max(b.y2, 0.0), float(image_h))
    if x1 >= x2 or y1 >= y2:
        raise EmptyBoxError(f"box {b.as_tuple()} lies outside {image_w}x{image_h}")
    return BoundingBox(x1, y1, x2, y2)


@dataclass(frozen=True, order=True)
class LabeledBox:
    box: BoundingBox
    class_id: int

    def __post_init__(self):
        if self.class_id < 1:
            raise ValueError(f"ground-truth class_id must be >= 1, got {self.class_id}")


@dataclass(frozen=True)
class ImageAnnotation:
    """Ground-truth labeled boxes for one image; labels may be revealed gradually."""

    image_id: str
    image_h: int
    image_w: int
    boxes: tuple[LabeledBox, ...]

    def __post_init__(self):
        if self.image_h < 1 or self.image_w < 1:
            raise ValueError(f"image size must be positive, got {self.image_w}x{self.image_h}")
        object.__setattr__(self, "boxes", tuple(self.boxes))
        seen = set()
        for lb in self.boxes:
            b = lb.box
            if b.x1 < 0 or b.y1 < 0 or b.x2 > self.image_w or b.y2 > self.image_h:
                raise ValueError(
                    f"box {b.as_tuple()} outside image {self.image_w}x{self.image_h}"
                )
            key = (b.as_tuple(), lb.class_id)
            if key in seen:
                raise ValueError(f"duplicate labeled box {key} in {self.image_id!r}")
            seen.add(key)

    @property
    def classes(self) -> frozenset[int]:
        return frozenset(lb.class_id for lb in self.boxes)

    def restrict(self, classes: Iterable[int]) -> "ImageAnnotation":
        """Annotation with only the boxes whose class is in `classes`."""
        allowed = frozenset(classes)
        kept = tuple(lb for lb in self.boxes if lb.class_id in allowed)
        return ImageAnnotation(self.image_id, self.image_h, self.image_w, kept)

    def merge(self, new_boxes: Iterable[LabeledBox]) -> "ImageAnnotation":
        """Append boxes, dropping exact (box, class) duplicates."""
        existing = {(lb.box.as_tuple(), lb.class_id) for lb in self.boxes}
        merged = list(self.boxes)
        for lb in new_boxes:
            key = (lb.box.as_tuple(), lb.class_id)
            if key not in existing:
                merged.append(lb)
                existing.add(key)
        return ImageAnnotation(self.image_id, self.image_h, self.image_w, tuple(merged))


@dataclass(frozen=True)
class Detection:
    box: BoundingBox
    class_id: int
    score: float

    def __post_init__(self):
        if self.class_id < 1:
            raise ValueError(f"detection class_id must be >= 1, got {self.class_id}")
        if not math.isfinite(self.score) or not 0.0 <= self.score <= 1.0:
            raise ValueError(f"detection score must be in [0,1], got {self.score}")


@dataclass(frozen=True)
class FeatureMap:
    """p x q x d backbone output for one image; values are finite float32."""

    image_id: str
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float32)
        if values.ndim != 3 or min(values.shape) < 1:
            raise ValueError(f"feature map must be (p,q,d) with p,q,d >= 1, got {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ValueError(f"feature map {self.image_id!r} contains NaN/Inf")
        values.flags.writeable = False
        object.__setattr__(self, "values", values)

    @property
    def grid_h(self) -> int:
        return self.values.shape[0]

    @property
    def grid_w(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return self.values.shape[2]


@dataclass(frozen=True)
class ClassSchedule:
    """Base classes learned offline, then incremental classes one at a time.

    eval_every is in units of new classes (1 evaluates after every class,
    10 after every ten).
    """

    base_classes: tuple[int, ...]
    incremental_classes: tuple[int, ...]
    eval_every: int = 1

    def __post_init__(self):
        object.__setattr__(self, "base_classes", tuple(self.base_classes))
        object.__setattr__(self, "incremental_classes", tuple(self.incremental_classes))
        if not self.base_classes:
            raise ValueError("schedule needs at least one base class")
        if self.eval_every < 1:
            raise ValueError(f"eval_every must be >= 1, got {self.eval_every}")
        base, inc = set(self.base_classes), set(self.incremental_classes)
        if len(base) != len(self.base_classes) or len(inc) != len(self.incremental_classes):
            raise ValueError("duplicate class ids in schedule")
        if base & inc:
            raise ValueError(f"base and incremental classes overlap: {sorted(base & inc)}")
        if BACKGROUND in base | inc:
            raise ValueError("class id 0 is reserved for background")

    @property
    def all_classes(self) -> tuple[int, ...]:
        return self.base_classes + self.incremental_classes
