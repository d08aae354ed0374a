"""Fusion of detections from several experts: NMS, Soft-NMS, WBF and NMW.

Every method works class by class; detections of different classes never
interact.  Greedy steps pick the highest score first and break ties by input
position, which keeps all methods deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np

from detmoe.errors import ConfigError
from detmoe.geometry import Box, Detection, iou_matrix, iou_one_to_many

METHODS = ("nms", "softnms", "wbf", "nmw")


@dataclass
class FusionConfig:
    method: str = "nmw"
    iou_threshold: float = 0.6
    softnms_sigma: float = 0.5
    softnms_score_floor: float = 0.3
    model_map_weights: Optional[dict[str, float]] = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown fusion method {self.method!r}; choose from {METHODS}")
        if not 0.0 < self.iou_threshold <= 1.0:
            raise ConfigError(f"iou_threshold must be in (0, 1], got {self.iou_threshold}")
        if self.softnms_sigma <= 0.0:
            raise ConfigError("softnms_sigma must be > 0")
        if not 0.0 <= self.softnms_score_floor < 1.0:
            raise ConfigError("softnms_score_floor must be in [0, 1)")
        if self.model_map_weights is not None:
            for k, v in self.model_map_weights.items():
                if not v > 0.0:
                    raise ConfigError(f"model weight for {k!r} must be > 0, got {v}")


def _arrays(dets: Sequence[Detection]):
    boxes = np.array([d.box.as_list() for d in dets], dtype=np.float64).reshape(-1, 4)
    scores = np.array([d.score for d in dets], dtype=np.float64)
    classes = np.array([d.class_id for d in dets], dtype=np.int64)
    return boxes, scores, classes


def _class_groups(classes: np.ndarray, scores: np.ndarray):
    """Yield index arrays per class, each ordered by descending score then index."""
    for c in np.unique(classes):
        idx = np.flatnonzero(classes == c)
        yield idx[np.argsort(-scores[idx], kind="stable")]


def _ordered(items: list[tuple[float, int, Detection]]) -> list[Detection]:
    items.sort(key=lambda t: (-t[0], t[1]))
    return [d for _, _, d in items]


def map_reweight(dets: Sequence[Detection], weights: Mapping[str, float]) -> list[Detection]:
    """Scale each score by its expert's weight relative to the largest weight."""
    if not weights:
        raise ConfigError("empty model weight map")
    top = max(weights.values())
    if not top > 0.0:
        raise ConfigError("model weights must be positive")
    out = []
    for d in dets:
        if d.source not in weights:
            raise ConfigError(f"no model weight for expert {d.source!r}")
        s = min(max(d.score * (weights[d.source] / top), 0.0), 1.0)
        out.append(d.replace(score=s))
    return out


def nms(dets: Sequence[Detection], iou_threshold: float = 0.6) -> list[Detection]:
    """Class-wise greedy non-maximum suppression (suppresses IoU > threshold)."""
    if not dets:
        return []
    boxes, scores, classes = _arrays(dets)
    keep: list[tuple[float, int, Detection]] = []
    for order in _class_groups(classes, scores):
        alive = np.ones(len(order), dtype=bool)
        for k in range(len(order)):
            if not alive[k]:
                continue
            i = order[k]
            keep.append((scores[i], int(i), dets[i]))
            rest = order[k + 1:]
            overlap = iou_one_to_many(boxes[i], boxes[rest]) > iou_threshold
            alive[k + 1:] &= ~overlap
    return _ordered(keep)


def soft_nms(dets: Sequence[Detection], sigma: float = 0.5,
             score_floor: float = 0.3) -> list[Detection]:
    """Gaussian Soft-NMS.

    After each selection, every remaining same-class score is multiplied by
    ``exp(-iou**2 / sigma)`` and detections left below ``score_floor`` are
    discarded.  The selected detection itself is never checked against the
    floor.
    """
    if sigma <= 0.0:
        raise ConfigError("sigma must be > 0")
    if not dets:
        return []
    boxes, scores, classes = _arrays(dets)
    keep: list[tuple[float, int, Detection]] = []
    for order in _class_groups(classes, scores):
        idx = np.sort(order)
        cur = scores[idx].copy()
        alive = np.ones(len(idx), dtype=bool)
        while alive.any():
            masked = np.where(alive, cur, -np.inf)
            k = int(np.argmax(masked))
            i = int(idx[k])
            keep.append((cur[k], i, dets[i].replace(score=float(cur[k]))))
            alive[k] = False
            rest = np.flatnonzero(alive)
            if len(rest) == 0:
                break
            ov = iou_one_to_many(boxes[i], boxes[idx[rest]])
            cur[rest] = cur[rest] * np.exp(-(ov * ov) / sigma)
            alive[rest[cur[rest] < score_floor]] = False
    return _ordered(keep)


def _envelope_clip(fused: np.ndarray, members: np.ndarray) -> np.ndarray:
    return np.clip(fused, members.min(axis=0), members.max(axis=0))


def wbf(dets: Sequence[Detection], iou_threshold: float = 0.6, model_count: int = 1,
        return_members: bool = False):
    """Weighted boxes fusion.

    Detections are visited by descending score and join the first same-class
    cluster whose current fused box overlaps by more than ``iou_threshold``.
    The fused score is the mean member score times
    ``min(distinct sources, model_count) / model_count``.
    """
    if model_count < 1:
        raise ConfigError(f"model_count must be >= 1, got {model_count}")
    if not dets:
        return ([], []) if return_members else []
    boxes, scores, classes = _arrays(dets)
    results = []
    for order in _class_groups(classes, scores):
        fused: list[np.ndarray] = []
        wsum: list[float] = []
        wbox: list[np.ndarray] = []
        members: list[list[int]] = []
        for i in order:
            j = -1
            if fused:
                ov = iou_one_to_many(boxes[i], np.array(fused))
                hits = np.flatnonzero(ov > iou_threshold)
                if len(hits):
                    j = int(hits[0])
            if j < 0:
                fused.append(boxes[i].copy())
                wsum.append(scores[i])
                wbox.append(scores[i] * boxes[i])
                members.append([int(i)])
                continue
            members[j].append(int(i))
            wsum[j] += scores[i]
            wbox[j] = wbox[j] + scores[i] * boxes[i]
            if wsum[j] > 0.0:
                fused[j] = wbox[j] / wsum[j]
        for j, mem in enumerate(members):
            mem_boxes = boxes[mem]
            box = _envelope_clip(fused[j], mem_boxes)
            n_models = len({dets[m].source for m in mem})
            score = float(np.mean(scores[mem])) * min(n_models, model_count) / model_count
            seed = dets[mem[0]]
            results.append((score, mem[0],
                            seed.replace(score=score, box=Box(*map(float, box))), mem))
    results.sort(key=lambda t: (-t[0], t[1]))
    out = [r[2] for r in results]
    if return_members:
        return out, [r[3] for r in results]
    return out


def nmw(dets: Sequence[Detection], iou_threshold: float = 0.6, return_members: bool = False):
    """Non-maximum weighted fusion.

    The highest-scoring unassigned detection seeds a cluster and absorbs all
    unassigned same-class detections overlapping it by more than
    ``iou_threshold``.  Members are averaged with weights
    ``score * iou(member, seed)``; the cluster keeps the seed's score.
    """
    if not dets:
        return ([], []) if return_members else []
    boxes, scores, classes = _arrays(dets)
    results = []
    for order in _class_groups(classes, scores):
        ov_all = iou_matrix(boxes[order], boxes[order])
        assigned = np.zeros(len(order), dtype=bool)
        for k in range(len(order)):
            if assigned[k]:
                continue
            seed = order[k]
            ov = ov_all[k]
            take = (~assigned) & (ov > iou_threshold)
            take[k] = True
            assigned |= take
            mem = order[take]
            if len(mem) == 1:
                results.append((scores[seed], int(seed), dets[seed], [int(seed)]))
                continue
            u = scores[mem] * ov[take]
            if u.sum() > 0.0:
                box = (u[:, None] * boxes[mem]).sum(axis=0) / u.sum()
                box = _envelope_clip(box, boxes[mem])
            else:
                box = boxes[seed]
            results.append((scores[seed], int(seed),
                            dets[seed].replace(box=Box(*map(float, box))),
                            [int(m) for m in mem]))
    results.sort(key=lambda t: (-t[0], t[1]))
    out = [r[2] for r in results]
    if return_members:
        return out, [r[3] for r in results]
    return out


def fuse(dets_per_expert: Sequence[Sequence[Detection]], cfg: FusionConfig) -> list[Detection]:
    """Optionally re-weight by model mAP, concatenate experts, then fuse."""
    dets = [d for group in dets_per_expert for d in group]
    if cfg.model_map_weights:
        dets = map_reweight(dets, cfg.model_map_weights)
    if cfg.method == "nms":
        return nms(dets, cfg.iou_threshold)
    if cfg.method == "softnms":
        return soft_nms(dets, cfg.softnms_sigma, cfg.softnms_score_floor)
    if cfg.method == "wbf":
        return wbf(dets, cfg.iou_threshold, max(len(dets_per_expert), 1))
    return nmw(dets, cfg.iou_threshold)
