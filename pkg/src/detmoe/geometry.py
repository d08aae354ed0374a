"""Axis-aligned box geometry.

Boxes are (x1, y1, x2, y2) in continuous pixel coordinates. Nothing here
rounds to integers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        coords = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(c) for c in coords):
            raise ValueError(f"non-finite box coordinates {coords}")
        if self.x2 < self.x1 or self.y2 < self.y1:
            raise ValueError(f"negative box extent {coords}")

    @classmethod
    def from_seq(cls, seq: Sequence[float]) -> "Box":
        if len(seq) != 4:
            raise ValueError(f"box needs 4 coordinates, got {len(seq)}")
        return cls(*(float(v) for v in seq))

    def as_list(self) -> list[float]:
        return [self.x1, self.y1, self.x2, self.y2]

    def translate(self, dx: float, dy: float) -> "Box":
        return Box(self.x1 + dx, self.y1 + dy, self.x2 + dx, self.y2 + dy)


@dataclass(frozen=True)
class Detection:
    image_id: str
    class_id: int
    score: float
    box: Box
    source: Optional[str] = None

    def __post_init__(self):
        if self.class_id < 0:
            raise ValueError(f"class_id must be >= 0, got {self.class_id}")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must lie in [0, 1], got {self.score}")

    def replace(self, **changes) -> "Detection":
        fields = dict(image_id=self.image_id, class_id=self.class_id,
                      score=self.score, box=self.box, source=self.source)
        fields.update(changes)
        return Detection(**fields)


def area(box: Box) -> float:
    return (box.x2 - box.x1) * (box.y2 - box.y1)


def iou(a: Box, b: Box) -> float:
    """Intersection over union; 0 when the union is empty."""
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    inter = max(iw, 0.0) * max(ih, 0.0)
    union = area(a) + area(b) - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def boxes_to_array(boxes: Iterable[Box]) -> np.ndarray:
    arr = np.array([b.as_list() for b in boxes], dtype=np.float64)
    return arr.reshape(-1, 4)


def iou_one_to_many(box: np.ndarray, boxes: np.ndarray) -> np.ndarray:
    """IoU of a single (4,) box against an (N, 4) array.

    Uses the same operation order as :func:`iou` so that thresholds decide
    identically on both paths.
    """
    iw = np.minimum(box[2], boxes[:, 2]) - np.maximum(box[0], boxes[:, 0])
    ih = np.minimum(box[3], boxes[:, 3]) - np.maximum(box[1], boxes[:, 1])
    inter = np.maximum(iw, 0.0) * np.maximum(ih, 0.0)
    area_a = (box[2] - box[0]) * (box[3] - box[1])
    area_b = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
    union = area_a + area_b - inter
    out = np.zeros(len(boxes), dtype=np.float64)
    ok = union > 0.0
    out[ok] = inter[ok] / union[ok]
    return out


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between (N, 4) and (M, 4) arrays -> (N, M)."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.maximum(iw, 0.0) * np.maximum(ih, 0.0)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    out = np.zeros(union.shape, dtype=np.float64)
    np.divide(inter, union, out=out, where=union > 0.0)
    return out
