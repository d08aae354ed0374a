"""Decoding of raw per-level YOLO-style prediction tensors.

Each level tensor has shape ``[A, H, W, 5 + C]`` holding raw logits
``(t_x, t_y, t_w, t_h, t_obj, t_cls...)``.  Gate weights are applied to
these logits *before* the sigmoid, so a heavily down-weighted expert decodes
to confidences drifting toward 0.5 rather than toward 0.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from detmoe.errors import DecodeError
from detmoe.geometry import Box, Detection


@dataclass(frozen=True)
class Level:
    stride: int
    anchors: tuple[tuple[float, float], ...]

    @property
    def anchor_count(self) -> int:
        return len(self.anchors)


@dataclass(frozen=True)
class AnchorConfig:
    levels: tuple[Level, ...]
    class_count: int
    image_size: tuple[int, int]  # (H, W)

    def __post_init__(self):
        if not self.levels:
            raise DecodeError("anchor config needs at least one level")
        if self.class_count < 1:
            raise DecodeError("class_count must be >= 1")
        h, w = self.image_size
        prev = 0
        for i, lv in enumerate(self.levels):
            if lv.anchor_count < 1:
                raise DecodeError(f"level {i} has no anchors")
            if lv.stride <= prev:
                raise DecodeError("strides must be strictly increasing")
            if h % lv.stride or w % lv.stride:
                raise DecodeError(
                    f"level {i}: image size {h}x{w} not divisible by stride {lv.stride}")
            prev = lv.stride

    @classmethod
    def from_dict(cls, d: dict) -> "AnchorConfig":
        levels = tuple(
            Level(int(lv["stride"]), tuple((float(a[0]), float(a[1])) for a in lv["anchors"]))
            for lv in d["levels"])
        h, w = d["image_size"]
        return cls(levels, int(d["class_count"]), (int(h), int(w)))

    def to_dict(self) -> dict:
        return {
            "version": 1,
            "image_size": list(self.image_size),
            "class_count": self.class_count,
            "levels": [{"stride": lv.stride, "anchors": [list(a) for a in lv.anchors]}
                       for lv in self.levels],
        }

    def grid_shape(self, index: int) -> tuple[int, int]:
        s = self.levels[index].stride
        return self.image_size[0] // s, self.image_size[1] // s

    def level_shape(self, index: int) -> tuple[int, int, int, int]:
        gh, gw = self.grid_shape(index)
        return (self.levels[index].anchor_count, gh, gw, 5 + self.class_count)

    @property
    def anchor_total(self) -> int:
        return sum(int(np.prod(self.level_shape(i)[:3])) for i in range(len(self.levels)))


@dataclass
class RawPredictionTensor:
    image_id: str
    expert_id: str
    levels: list[np.ndarray] = field(default_factory=list)

    def scaled(self, factors: Sequence) -> "RawPredictionTensor":
        """Elementwise product of every level with the matching factor array."""
        return RawPredictionTensor(
            self.image_id, self.expert_id,
            [np.asarray(lv, dtype=np.float64) * f for lv, f in zip(self.levels, factors)])


def sigmoid(t):
    t = np.asarray(t, dtype=np.float64)
    e = np.exp(-np.abs(t))
    out = np.where(t >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return float(out) if out.ndim == 0 else out


def check_tensor(raw: RawPredictionTensor, cfg: AnchorConfig) -> None:
    if len(raw.levels) != len(cfg.levels):
        raise DecodeError(
            f"{raw.image_id}/{raw.expert_id}: {len(raw.levels)} levels, "
            f"anchor config has {len(cfg.levels)}")
    for i, lv in enumerate(raw.levels):
        _check_level(np.asarray(lv), cfg, i)


def _check_level(arr: np.ndarray, cfg: AnchorConfig, index: int) -> None:
    expected = cfg.level_shape(index)
    if arr.ndim != 4:
        raise DecodeError(f"level {index}: expected 4 axes, got shape {arr.shape}")
    names = ("anchor", "height", "width", "channel")
    for axis, (got, want) in enumerate(zip(arr.shape, expected)):
        if got != want:
            raise DecodeError(
                f"level {index}: axis {axis} ({names[axis]}) has size {got}, expected {want}")


def decode_level_arrays(raw: np.ndarray, cfg: AnchorConfig, index: int):
    """Vectorised decode of one level.

    Returns ``(boxes [N, 4], objectness [N], class_scores [N, C])`` flattened
    in (cy, cx, anchor) order.
    """
    raw = np.asarray(raw, dtype=np.float64)
    _check_level(raw, cfg, index)
    level = cfg.levels[index]
    a, gh, gw, _ = raw.shape
    t = raw.transpose(1, 2, 0, 3)  # [H, W, A, 5+C]
    s = sigmoid(t)
    cy, cx = np.meshgrid(np.arange(gh, dtype=np.float64),
                         np.arange(gw, dtype=np.float64), indexing="ij")
    anchors = np.asarray(level.anchors, dtype=np.float64)  # [A, 2]
    bx = (2.0 * s[..., 0] - 0.5 + cx[..., None]) * level.stride
    by = (2.0 * s[..., 1] - 0.5 + cy[..., None]) * level.stride
    bw = (2.0 * s[..., 2]) ** 2 * anchors[:, 0]
    bh = (2.0 * s[..., 3]) ** 2 * anchors[:, 1]
    img_h, img_w = cfg.image_size
    boxes = np.stack([
        np.clip(bx - bw / 2.0, 0.0, img_w),
        np.clip(by - bh / 2.0, 0.0, img_h),
        np.clip(bx + bw / 2.0, 0.0, img_w),
        np.clip(by + bh / 2.0, 0.0, img_h),
    ], axis=-1)
    n = gh * gw * a
    return boxes.reshape(n, 4), s[..., 4].reshape(n), s[..., 5:].reshape(n, -1)


def decode_level(raw: np.ndarray, cfg: AnchorConfig, index: int):
    """Decode one level into ``(Box, objectness, class_scores)`` tuples."""
    boxes, obj, cls = decode_level_arrays(raw, cfg, index)
    return [(Box(*map(float, b)), float(o), [float(c) for c in row])
            for b, o, row in zip(boxes, obj, cls)]


def decode_arrays(raw: RawPredictionTensor, cfg: AnchorConfig):
    """All levels concatenated: ``(boxes, scores, class_ids)`` in tie-break order."""
    check_tensor(raw, cfg)
    all_boxes, all_scores, all_cls = [], [], []
    for i, lv in enumerate(raw.levels):
        boxes, obj, cls = decode_level_arrays(lv, cfg, i)
        best = np.argmax(cls, axis=1)
        all_boxes.append(boxes)
        all_scores.append(obj * cls[np.arange(len(cls)), best])
        all_cls.append(best)
    return np.concatenate(all_boxes), np.concatenate(all_scores), np.concatenate(all_cls)


def decode_all(raw: RawPredictionTensor, cfg: AnchorConfig,
               conf_threshold: float = 0.001) -> list[Detection]:
    """Decode every level and keep boxes with ``obj * max class prob >= threshold``.

    Output is sorted by descending score; ties keep (level, cy, cx, anchor)
    order.
    """
    boxes, scores, cls = decode_arrays(raw, cfg)
    keep = np.flatnonzero(scores >= conf_threshold)
    order = keep[np.argsort(-scores[keep], kind="stable")]
    return [Detection(raw.image_id, int(cls[i]), float(scores[i]),
                      Box(*map(float, boxes[i])), raw.expert_id)
            for i in order]


def encode_box(box: Sequence[float], cfg: AnchorConfig, index: int, anchor: int,
               cell: tuple[int, int]) -> np.ndarray:
    """Raw ``(t_x, t_y, t_w, t_h)`` that decode to ``box`` at the given slot.

    Inverse of the decode equations where representable; sigmoid arguments
    are clamped to [1e-4, 1 - 1e-4].
    """
    level = cfg.levels[index]
    cy, cx = cell
    x1, y1, x2, y2 = box
    bx, by = (x1 + x2) / 2.0, (y1 + y2) / 2.0
    aw, ah = level.anchors[anchor]
    sx = (bx / level.stride - cx + 0.5) / 2.0
    sy = (by / level.stride - cy + 0.5) / 2.0
    sw = np.sqrt((x2 - x1) / aw) / 2.0
    sh = np.sqrt((y2 - y1) / ah) / 2.0
    s = np.clip(np.array([sx, sy, sw, sh], dtype=np.float64), 1e-4, 1.0 - 1e-4)
    return np.log(s / (1.0 - s))
