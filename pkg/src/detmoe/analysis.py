"""Routing statistics and expert disagreement analysis."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np

from detmoe.evaluation import SUBSET_ORDER
from detmoe.gate import GateOutput
from detmoe.geometry import Detection, iou_matrix

HIST_BINS = 20
CATEGORIES = ("full_agreement", "label_disagreement", "only_a", "only_b")


def _vector(out) -> np.ndarray:
    if isinstance(out, GateOutput):
        if out.mode != "single":
            raise ValueError("routing summaries need single-mode gate outputs")
        return np.asarray(out.weights, dtype=np.float64)
    return np.asarray(out, dtype=np.float64)


def _subset_labels(present: set) -> list[str]:
    return [s for s in SUBSET_ORDER if s in present] + sorted(present - set(SUBSET_ORDER))


def _expert_stats(col: np.ndarray) -> dict:
    q1, med, q3 = np.percentile(col, [25, 50, 75])
    hist, _ = np.histogram(col, bins=HIST_BINS, range=(0.0, 1.0))
    return {"mean": float(col.mean()), "std": float(col.std()), "min": float(col.min()),
            "max": float(col.max()), "q1": float(q1), "median": float(med), "q3": float(q3),
            "histogram": hist.tolist()}


def routing_summary(outputs: Sequence[tuple[str, object]],
                    subsets: Optional[Mapping[str, str]] = None,
                    expert_ids: Optional[Sequence[str]] = None) -> dict:
    """Per-subset distribution of gate weights.

    Images without a subset label fall under ``undefined``; an ``all`` entry
    covers every image.  Returns ``{subset: {"count": n, "experts": {id: stats}}}``.
    """
    subsets = subsets or {}
    groups: dict[str, list[np.ndarray]] = defaultdict(list)
    for image_id, out in outputs:
        w = _vector(out)
        groups[subsets.get(image_id, "undefined")].append(w)
        groups["all"].append(w)
    result = {}
    for label in _subset_labels(set(groups) - {"all"}) + (["all"] if groups else []):
        mat = np.stack(groups[label])
        ids = list(expert_ids) if expert_ids else [str(i) for i in range(mat.shape[1])]
        result[label] = {"count": len(mat),
                         "experts": {e: _expert_stats(mat[:, i]) for i, e in enumerate(ids)}}
    return result


def match_pairs(boxes_a: np.ndarray, boxes_b: np.ndarray, match_iou: float = 0.5):
    """Greedy class-agnostic matching, highest IoU first.

    Equal IoUs resolve by (index in A, index in B).  Returns ``(i, j)`` pairs.
    """
    ov = iou_matrix(boxes_a, boxes_b)
    cand = [(-ov[i, j], i, j) for i, j in zip(*np.nonzero(ov >= match_iou))]
    cand.sort()
    used_a, used_b, pairs = set(), set(), []
    for _, i, j in cand:
        if i in used_a or j in used_b:
            continue
        used_a.add(i)
        used_b.add(j)
        pairs.append((int(i), int(j)))
    return pairs


def _counts(dets_a: Sequence[Detection], dets_b: Sequence[Detection], match_iou: float) -> dict:
    ba = np.array([d.box.as_list() for d in dets_a]).reshape(-1, 4)
    bb = np.array([d.box.as_list() for d in dets_b]).reshape(-1, 4)
    pairs = match_pairs(ba, bb, match_iou)
    same = sum(dets_a[i].class_id == dets_b[j].class_id for i, j in pairs)
    return {"full_agreement": same, "label_disagreement": len(pairs) - same,
            "only_a": len(dets_a) - len(pairs), "only_b": len(dets_b) - len(pairs)}


def disagreement(dets_a: Sequence[Detection], dets_b: Sequence[Detection],
                 match_iou: float = 0.5) -> dict[str, dict]:
    """Per-image agreement categories between two experts' final detections."""
    by_a: dict[str, list] = defaultdict(list)
    by_b: dict[str, list] = defaultdict(list)
    for d in dets_a:
        by_a[d.image_id].append(d)
    for d in dets_b:
        by_b[d.image_id].append(d)
    return {k: _counts(by_a.get(k, []), by_b.get(k, []), match_iou)
            for k in sorted(set(by_a) | set(by_b))}


@dataclass
class DisagreementReport:
    subsets: dict[str, dict]
    expert_ids: tuple[str, str] = ("a", "b")

    def to_dict(self) -> dict:
        return {"experts": list(self.expert_ids), "subsets": self.subsets}

    def to_csv(self) -> str:
        a, b = self.expert_ids
        lines = [f"subset,images,full_agreement,label_disagreement,only_{a},only_{b}"]
        for label, row in self.subsets.items():
            lines.append(",".join([label, str(row["images"])]
                                  + [repr(row[c]) for c in CATEGORIES]))
        return "\n".join(lines) + "\n"


def disagreement_report(per_image: Mapping[str, dict], subsets: Optional[Mapping[str, str]] = None,
                        image_ids: Optional[Sequence[str]] = None,
                        expert_ids: tuple[str, str] = ("a", "b")) -> DisagreementReport:
    """Average category counts per image, per subset and over all images.

    Images listed in ``subsets`` or ``image_ids`` without any detections count
    as zero in every category.
    """
    subsets = subsets or {}
    images = set(per_image) | set(subsets) | set(image_ids or ())
    zero = dict.fromkeys(CATEGORIES, 0)
    groups: dict[str, list[str]] = defaultdict(list)
    for k in sorted(images):
        groups[subsets.get(k, "undefined")].append(k)
    out = {}
    for label in _subset_labels(set(groups)) + (["all"] if images else []):
        ids = sorted(images) if label == "all" else groups[label]
        rows = [per_image.get(k, zero) for k in ids]
        out[label] = {"images": len(ids),
                      **{c: float(np.mean([r[c] for r in rows])) for c in CATEGORIES}}
    return DisagreementReport(out, tuple(expert_ids))


def routing_csv(outputs: Sequence[tuple[str, object]], subsets: Optional[Mapping[str, str]] = None,
                expert_ids: Optional[Sequence[str]] = None) -> str:
    """One row per image: image id, subset and the weight of every expert."""
    subsets = subsets or {}
    rows = []
    for image_id, out in outputs:
        w = _vector(out)
        ids = list(expert_ids) if expert_ids else [str(i) for i in range(len(w))]
        if not rows:
            rows.append(",".join(["image_id", "subset"] + [f"w_{e}" for e in ids]))
        rows.append(",".join([image_id, subsets.get(image_id, "undefined")] + [repr(float(v)) for v in w]))
    return "\n".join(rows) + ("\n" if rows else "")
