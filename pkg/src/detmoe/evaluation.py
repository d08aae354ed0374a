"""mAP50 evaluation with per-subset reporting.

AP uses all-points interpolation: the area under the monotone precision
envelope of the precision/recall curve.  Classes without ground truth are
left out of the mean.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from detmoe.geometry import Box, Detection, iou_one_to_many

SUBSET_ORDER = ("daytime", "nighttime", "dawn_dusk", "undefined")
SUBSET_TITLES = {"daytime": "Day", "nighttime": "Night", "dawn_dusk": "Dawn-Dusk",
                 "undefined": "Undef", "all": "All"}


@dataclass(frozen=True)
class GroundTruth:
    image_id: str
    class_id: int
    box: Box

    def __post_init__(self):
        if self.class_id < 0:
            raise ValueError(f"class_id must be >= 0, got {self.class_id}")


@dataclass
class EvalConfig:
    conf_threshold: float = 0.001
    iou_match: float = 0.5


def average_precision(recall: np.ndarray, precision: np.ndarray) -> float:
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def match_detections(dets: Sequence[Detection], gts: Sequence[GroundTruth],
                     iou_match: float = 0.5) -> np.ndarray:
    """TP flags for ``dets`` in descending-score order (ties keep input order).

    Each detection takes the still-unmatched ground truth of its image with
    the highest IoU, provided that IoU reaches ``iou_match``.
    """
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    by_image: dict[str, list[GroundTruth]] = defaultdict(list)
    for g in gts:
        by_image[g.image_id].append(g)
    arrays = {k: np.array([g.box.as_list() for g in v]) for k, v in by_image.items()}
    used = {k: np.zeros(len(v), dtype=bool) for k, v in by_image.items()}
    tp = np.zeros(len(order), dtype=bool)
    for rank, i in enumerate(order):
        d = dets[i]
        if d.image_id not in arrays:
            continue
        ov = iou_one_to_many(np.array(d.box.as_list()), arrays[d.image_id])
        ov[used[d.image_id]] = -1.0
        j = int(np.argmax(ov))
        if ov[j] >= iou_match:
            used[d.image_id][j] = True
            tp[rank] = True
    return tp


def match_and_ap(dets: Sequence[Detection], gts: Sequence[GroundTruth], class_id: int,
                 iou_match: float = 0.5) -> Optional[float]:
    """AP of one class, or None when the class has no ground truth."""
    dets = [d for d in dets if d.class_id == class_id]
    gts = [g for g in gts if g.class_id == class_id]
    if not gts:
        return None
    if not dets:
        return 0.0
    tp = match_detections(dets, gts, iou_match)
    ctp = np.cumsum(tp)
    cfp = np.cumsum(~tp)
    return average_precision(ctp / len(gts), ctp / (ctp + cfp))


@dataclass
class SubsetResult:
    map50: Optional[float]
    per_class_ap: dict[int, float]
    images: int
    gt: int
    detections: int

    def to_dict(self) -> dict:
        return {"map50": self.map50,
                "per_class_ap": {str(k): v for k, v in sorted(self.per_class_ap.items())},
                "images": self.images, "gt": self.gt, "detections": self.detections}


@dataclass
class EvalReport:
    overall: SubsetResult
    subsets: dict[str, SubsetResult] = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)

    @property
    def map50(self) -> Optional[float]:
        return self.overall.map50

    @property
    def per_class_ap(self) -> dict[int, float]:
        return self.overall.per_class_ap

    def to_dict(self) -> dict:
        return {
            "map50": self.overall.map50,
            "per_class_ap": self.overall.to_dict()["per_class_ap"],
            "counts": {"images": self.overall.images, "gt": self.overall.gt,
                       "detections": self.overall.detections},
            "subsets": {k: v.to_dict() for k, v in self.subsets.items()},
            "warnings": list(self.warnings),
        }

    def to_table(self) -> str:
        """Aligned text table, one column per subset, mAP50 in percent."""
        cols = [k for k in self.subsets] + ["all"]
        results = dict(self.subsets, all=self.overall)
        head = ["Metric"] + [SUBSET_TITLES.get(c, c) for c in cols]
        rows = [["mAP50"] + [_pct(results[c].map50) for c in cols],
                ["images"] + [str(results[c].images) for c in cols]]
        widths = [max(len(r[i]) for r in [head] + rows) for i in range(len(head))]
        return "\n".join("  ".join(cell.rjust(w) for cell, w in zip(r, widths))
                         for r in [head] + rows) + "\n"


def _pct(v: Optional[float]) -> str:
    return "-" if v is None else f"{100.0 * v:.2f}"


def _evaluate_subset(dets, gts, n_images, iou_match) -> SubsetResult:
    classes = sorted({g.class_id for g in gts})
    per_class = {}
    for c in classes:
        ap = match_and_ap(dets, gts, c, iou_match)
        if ap is not None:
            per_class[c] = ap
    m = float(np.mean(list(per_class.values()))) if per_class else None
    return SubsetResult(m, per_class, n_images, len(gts), len(dets))


def evaluate(dets: Sequence[Detection], gts: Sequence[GroundTruth],
             subsets: Optional[Mapping[str, str]] = None,
             cfg: Optional[EvalConfig] = None,
             image_ids: Optional[Sequence[str]] = None) -> EvalReport:
    """Overall and per-subset mAP50.

    Images are known if they appear in ``image_ids``, ``subsets`` or the
    ground truth; detections on other images are ignored with a warning.
    Subsets without images are absent from the report.
    """
    cfg = cfg or EvalConfig()
    known = set(image_ids or ()) | set(subsets or {}) | {g.image_id for g in gts}
    warnings = []
    unknown = sorted({d.image_id for d in dets if d.image_id not in known})
    if unknown:
        warnings.append(f"detections reference {len(unknown)} unknown image(s): "
                        + ", ".join(unknown[:5]) + (" ..." if len(unknown) > 5 else ""))
    kept = [d for d in dets if d.image_id in known and d.score >= cfg.conf_threshold]
    overall = _evaluate_subset(kept, gts, len(known), cfg.iou_match)
    report = EvalReport(overall, warnings=warnings)
    if subsets:
        labels = [s for s in SUBSET_ORDER if s in set(subsets.values())]
        labels += sorted(set(subsets.values()) - set(SUBSET_ORDER))
        for label in labels:
            ids = {k for k, v in subsets.items() if v == label}
            report.subsets[label] = _evaluate_subset(
                [d for d in kept if d.image_id in ids],
                [g for g in gts if g.image_id in ids], len(ids), cfg.iou_match)
    return report
