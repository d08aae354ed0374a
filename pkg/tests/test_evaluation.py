import numpy as np
import pytest

import oracles
from detmoe.evaluation import EvalConfig, GroundTruth, evaluate, match_and_ap, match_detections
from detmoe.geometry import Box, Detection


def gt(image, cls, box):
    return GroundTruth(image, cls, Box(*box))


def det(image, cls, score, box):
    return Detection(image, cls, score, Box(*box))


def two_class_fixture():
    """Class 0 has AP 0.5, class 1 has AP 1.0."""
    gts = [gt("a", 0, (0, 0, 10, 10)), gt("b", 1, (0, 0, 10, 10)), gt("c", 1, (20, 20, 30, 30))]
    dets = [det("a", 0, 0.9, (50, 50, 60, 60)),      # FP ranked first
            det("a", 0, 0.8, (0, 0, 10, 10)),        # TP
            det("b", 1, 0.7, (0, 0, 10, 10)),
            det("c", 1, 0.6, (20, 20, 30, 31))]
    return dets, gts


def random_case(rng, n_gt=5, n_det=8, images=("x", "y")):
    gts, dets = [], []
    for k in range(n_gt):
        x, y = rng.uniform(0, 30, 2)
        gts.append(gt(images[k % len(images)], 0, (x, y, x + 8, y + 8)))
    for k in range(n_det):
        if rng.uniform() < 0.6 and gts:
            g = gts[int(rng.integers(len(gts)))]
            j = rng.normal(0, 1.5, 4)
            b = g.box.as_list()
            box = (b[0] + j[0], b[1] + j[1], b[2] + abs(j[2]) + 1, b[3] + abs(j[3]) + 1)
            dets.append(det(g.image_id, 0, float(rng.uniform(0.01, 1)), box))
        else:
            x, y = rng.uniform(0, 30, 2)
            dets.append(det(images[int(rng.integers(len(images)))], 0,
                            float(rng.uniform(0.01, 1)), (x, y, x + 8, y + 8)))
    return dets, gts


def reference_tp(dets, gts, thr):
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    used = set()
    flags = []
    for i in order:
        d = dets[i]
        best, best_j = -1.0, None
        for j, g in enumerate(gts):
            if g.image_id != d.image_id or j in used:
                continue
            v = oracles.box_iou(d.box.as_list(), g.box.as_list())
            if v > best:
                best, best_j = v, j
        if best_j is not None and best >= thr:
            used.add(best_j)
            flags.append(True)
        else:
            flags.append(False)
    return flags


class TestAP:
    def test_perfect(self):
        gts = [gt("a", 0, (0, 0, 5, 5)), gt("b", 0, (1, 1, 4, 4))]
        dets = [det(g.image_id, 0, s, g.box.as_list()) for g, s in zip(gts, (0.1, 0.7))]
        assert match_and_ap(dets, gts, 0) == 1.0

    def test_no_detections(self):
        assert match_and_ap([], [gt("a", 0, (0, 0, 1, 1))], 0) == 0.0

    def test_no_ground_truth(self):
        assert match_and_ap([det("a", 0, 0.5, (0, 0, 1, 1))], [], 0) is None

    def test_fp_then_tp(self):
        dets, gts = two_class_fixture()
        assert match_and_ap(dets, gts, 0) == pytest.approx(0.5, abs=1e-15)

    def test_duplicates_only_first_counts(self):
        g = [gt("a", 0, (0, 0, 10, 10))]
        d = [det("a", 0, 0.9, (0, 0, 10, 10)), det("a", 0, 0.8, (0, 0, 10, 10))]
        assert match_detections(d, g).tolist() == [True, False]

    def test_greedy_matching_reference(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            dets, gts = random_case(rng, int(rng.integers(1, 5)), int(rng.integers(0, 5)))
            assert match_detections(dets, gts, 0.5).tolist() == reference_tp(dets, gts, 0.5)

    def test_ap_reference(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            dets, gts = random_case(rng)
            ref = oracles.all_points_ap(reference_tp(dets, gts, 0.5), len(gts))
            assert match_and_ap(dets, gts, 0) == pytest.approx(ref, abs=1e-12)

    def test_monotone_transform_invariant(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            dets, gts = random_case(rng)
            moved = [d.replace(score=d.score ** 3 * 0.5) for d in dets]
            assert match_and_ap(moved, gts, 0) == match_and_ap(dets, gts, 0)

    def test_low_ranked_additions(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            dets, gts = random_case(rng)
            base = match_and_ap(dets, gts, 0)
            fp = det("x", 0, 1e-6, (90, 90, 95, 95))
            assert match_and_ap(dets + [fp], gts, 0) <= base + 1e-15
            tp_flags = match_detections(dets, gts)
            # find a GT left unmatched and add a perfect, lowest-ranked hit on it
            order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
            hits = [dets[i] for i, f in zip(order, tp_flags) if f]
            for g in gts:
                if not any(oracles.box_iou(h.box.as_list(), g.box.as_list()) >= 0.5
                           and h.image_id == g.image_id for h in hits):
                    tp = det(g.image_id, 0, 1e-6, g.box.as_list())
                    assert match_and_ap(dets + [tp], gts, 0) >= base - 1e-15
                    break


class TestEvaluate:
    def test_two_class_map(self):
        dets, gts = two_class_fixture()
        report = evaluate(dets, gts)
        assert report.per_class_ap == {0: 0.5, 1: 1.0}
        assert report.map50 == pytest.approx(0.75)

    def test_single_subset_equals_overall(self):
        dets, gts = two_class_fixture()
        report = evaluate(dets, gts, {"a": "daytime", "b": "daytime", "c": "daytime"})
        assert report.subsets["daytime"].map50 == report.map50
        assert list(report.subsets) == ["daytime"]

    def test_empty_detections(self):
        _, gts = two_class_fixture()
        assert evaluate([], gts).per_class_ap == {0: 0.0, 1: 0.0}

    def test_unknown_image_warning(self):
        dets, gts = two_class_fixture()
        report = evaluate(dets + [det("zzz", 0, 0.99, (0, 0, 10, 10))], gts)
        assert report.warnings and "zzz" in report.warnings[0]
        assert report.map50 == pytest.approx(0.75)

    def test_confidence_threshold(self):
        dets, gts = two_class_fixture()
        low = [d.replace(score=0.0005) for d in dets]
        assert evaluate(low, gts).map50 == 0.0
        assert EvalConfig().conf_threshold == 0.001

    def test_table_columns(self):
        dets, gts = two_class_fixture()
        subsets = {"a": "undefined", "b": "nighttime", "c": "daytime"}
        text = evaluate(dets, gts, subsets).to_table()
        head = text.splitlines()[0].split()
        assert head == ["Metric", "Day", "Night", "Undef", "All"]

    def test_to_dict(self):
        dets, gts = two_class_fixture()
        d = evaluate(dets, gts).to_dict()
        assert d["map50"] == 0.75 and d["counts"] == {"images": 3, "gt": 3, "detections": 4}
