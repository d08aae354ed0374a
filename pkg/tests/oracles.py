"""Slow reference implementations written straight from the definitions.

They share no code with the package: plain Python floats, no numpy.
"""

import itertools
import math


def box_iou(a, b):
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    inter = max(iw, 0.0) * max(ih, 0.0)
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def nms(items, thr):
    """``items``: list of (class, score, box). Returns kept input indices in output order."""
    kept = []
    for c in sorted({it[0] for it in items}):
        remaining = [i for i, it in enumerate(items) if it[0] == c]
        while remaining:
            best = min(remaining, key=lambda i: (-items[i][1], i))
            kept.append(best)
            remaining = [i for i in remaining
                         if i != best and not box_iou(items[i][2], items[best][2]) > thr]
    return sorted(kept, key=lambda i: (-items[i][1], i))


def soft_nms(items, sigma, floor):
    """Returns (index, final score) pairs in output order."""
    out = []
    for c in sorted({it[0] for it in items}):
        cur = {i: items[i][1] for i, it in enumerate(items) if it[0] == c}
        while cur:
            best = min(cur, key=lambda i: (-cur[i], i))
            out.append((best, cur.pop(best)))
            for i in list(cur):
                cur[i] *= math.exp(-box_iou(items[i][2], items[best][2]) ** 2 / sigma)
                if cur[i] < floor:
                    del cur[i]
    return sorted(out, key=lambda t: (-t[1], t[0]))


def all_points_ap(tp_flags, n_gt):
    """Area under the precision envelope for a ranked TP/FP list."""
    if n_gt == 0:
        return None
    tp = fp = 0
    points = []
    for flag in tp_flags:
        tp += flag
        fp += not flag
        points.append((tp / n_gt, tp / (tp + fp)))
    ap, prev_r = 0.0, 0.0
    for k, (r, _) in enumerate(points):
        if r > prev_r:
            ap += (r - prev_r) * max(p for _, p in points[k:])
            prev_r = r
    return ap


def exhaustive_match(boxes_a, boxes_b, thr):
    """Matching whose sorted IoU sequence is lexicographically largest.

    Greedy highest-IoU-first matching produces exactly this matching when
    IoUs are distinct, so it serves as the brute-force reference.
    """
    best_key, best = None, []
    na, nb = len(boxes_a), len(boxes_b)
    for k in range(min(na, nb) + 1):
        for sa in itertools.combinations(range(na), k):
            for sb in itertools.permutations(range(nb), k):
                pairs = list(zip(sa, sb))
                ious = [box_iou(boxes_a[i], boxes_b[j]) for i, j in pairs]
                if any(v < thr for v in ious):
                    continue
                key = sorted(ious, reverse=True)
                if best_key is None or key > best_key:
                    best_key, best = key, pairs
    return sorted(best)
