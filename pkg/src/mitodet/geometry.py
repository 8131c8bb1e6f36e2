"""Boxes, points, IoU, NMS and patch/slide coordinate transforms.

Everything here is pure and stateless, safe to call from any number of
threads. Coordinates are float pixels. Where integer pixels are required
the single policy is round-half-up (``floor(x + 0.5)``), exposed as
:func:`round_half_up` so callers never fall back to platform-dependent
rounding.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

__all__ = [
    "Point",
    "BoundingBox",
    "Detection",
    "FrameTransform",
    "round_half_up",
    "iou",
    "nms",
    "box_center",
    "compose_transforms",
]


def round_half_up(value: float) -> int:
    """Round to the nearest integer, halves toward +inf: 2.5 -> 3, -2.5 -> -2."""
    return int(math.floor(value + 0.5))


@dataclass(frozen=True)
class Point:
    """A 2-D pixel position; slide or patch frame depending on context."""

    x: float
    y: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise ValueError(f"point coordinates must be finite, got ({self.x}, {self.y})")

    def rounded(self) -> tuple[int, int]:
        return round_half_up(self.x), round_half_up(self.y)

    def distance_to(self, other: "Point") -> float:
        return math.hypot(self.x - other.x, self.y - other.y)


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box with half-open pixel semantics (area = width * height)."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self) -> None:
        for v in (self.x_min, self.y_min, self.x_max, self.y_max):
            if not math.isfinite(v):
                raise ValueError(f"box coordinates must be finite, got {self}")
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(
                f"degenerate box: need x_min < x_max and y_min < y_max, got "
                f"({self.x_min}, {self.y_min}, {self.x_max}, {self.y_max})"
            )

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    def translated(self, dx: float, dy: float) -> "BoundingBox":
        return BoundingBox(self.x_min + dx, self.y_min + dy, self.x_max + dx, self.y_max + dy)

    def clipped(self, width: float, height: float) -> "BoundingBox | None":
        """Clip to [0, width] x [0, height]; None if nothing remains."""
        x0 = min(max(self.x_min, 0.0), width)
        y0 = min(max(self.y_min, 0.0), height)
        x1 = min(max(self.x_max, 0.0), width)
        y1 = min(max(self.y_max, 0.0), height)
        if x0 >= x1 or y0 >= y1:
            return None
        return BoundingBox(x0, y0, x1, y1)

    def contains(self, p: Point) -> bool:
        return self.x_min <= p.x < self.x_max and self.y_min <= p.y < self.y_max

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)


@dataclass(frozen=True)
class Detection:
    """A scored candidate box; the detector emits a single foreground class."""

    box: BoundingBox
    score: float
    class_id: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must lie in [0, 1], got {self.score}")


@dataclass(frozen=True)
class FrameTransform:
    """Maps patch-frame coordinates into slide-frame coordinates.

    ``offset`` is the patch origin expressed in the slide frame and ``scale``
    is slide pixels per patch pixel, so ``to_slide(p) = offset + p * scale``.
    """

    offset: Point
    scale: float = 1.0

    def __post_init__(self) -> None:
        if not (math.isfinite(self.scale) and self.scale > 0):
            raise ValueError(f"scale must be positive and finite, got {self.scale}")

    def to_slide(self, p: Point) -> Point:
        return Point(self.offset.x + p.x * self.scale, self.offset.y + p.y * self.scale)

    def to_patch(self, p: Point) -> Point:
        return Point((p.x - self.offset.x) / self.scale, (p.y - self.offset.y) / self.scale)

    def box_to_slide(self, box: BoundingBox) -> BoundingBox:
        lo = self.to_slide(Point(box.x_min, box.y_min))
        hi = self.to_slide(Point(box.x_max, box.y_max))
        return BoundingBox(lo.x, lo.y, hi.x, hi.y)


def compose_transforms(parent: FrameTransform, child: FrameTransform) -> FrameTransform:
    """Transform for a child patch nested inside a parent patch.

    ``child`` maps child frame -> parent frame, ``parent`` maps parent ->
    slide; the result maps child -> slide directly.
    """
    return FrameTransform(offset=parent.to_slide(child.offset), scale=parent.scale * child.scale)


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection-over-union of two boxes; 0 when disjoint."""
    ix = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    iy = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if ix <= 0.0 or iy <= 0.0:
        return 0.0
    inter = ix * iy
    return inter / (a.area + b.area - inter)


def box_center(b: BoundingBox) -> Point:
    return Point((b.x_min + b.x_max) / 2.0, (b.y_min + b.y_max) / 2.0)


def nms(dets: Sequence[Detection], iou_threshold: float) -> list[Detection]:
    """Greedy class-agnostic non-maximum suppression.

    Keeps the highest-scoring detection, suppresses everything overlapping it
    with IoU strictly above ``iou_threshold``, then repeats. Ties in score are
    broken by lower ``x_min``, then lower ``y_min``, so the result is
    deterministic. Output is sorted by descending score and preserves the
    input ``Detection`` objects bit-exactly.
    """
    if not 0.0 <= iou_threshold <= 1.0:
        raise ValueError(f"iou_threshold must lie in [0, 1], got {iou_threshold}")
    if not dets:
        return []

    x1 = np.array([d.box.x_min for d in dets], dtype=np.float64)
    y1 = np.array([d.box.y_min for d in dets], dtype=np.float64)
    x2 = np.array([d.box.x_max for d in dets], dtype=np.float64)
    y2 = np.array([d.box.y_max for d in dets], dtype=np.float64)
    scores = np.array([d.score for d in dets], dtype=np.float64)
    areas = (x2 - x1) * (y2 - y1)

    # lexsort: last key is primary
    order = np.lexsort((y1, x1, -scores))
    suppressed = np.zeros(len(dets), dtype=bool)
    keep: list[int] = []
    for pos, idx in enumerate(order):
        if suppressed[idx]:
            continue
        keep.append(int(idx))
        rest = order[pos + 1 :]
        rest = rest[~suppressed[rest]]
        if rest.size == 0:
            continue
        ix = np.minimum(x2[idx], x2[rest]) - np.maximum(x1[idx], x1[rest])
        iy = np.minimum(y2[idx], y2[rest]) - np.maximum(y1[idx], y1[rest])
        inter = np.clip(ix, 0.0, None) * np.clip(iy, 0.0, None)
        overlap = inter / (areas[idx] + areas[rest] - inter)
        suppressed[rest[overlap > iou_threshold]] = True
    return [dets[i] for i in keep]
