import numpy as np
import pytest

import oracles
from detmoe.analysis import (CATEGORIES, disagreement, disagreement_report, match_pairs,
                             routing_csv, routing_summary)
from detmoe.gate import GateOutput
from detmoe.geometry import Box, Detection


def det(cls, box, image="i", score=0.9):
    return Detection(image, cls, score, Box(*box))


def random_side(rng, n, image="i"):
    out = []
    for _ in range(n):
        x, y = rng.uniform(0, 20, 2)
        w, h = rng.uniform(4, 12, 2)
        out.append(det(int(rng.integers(2)), (x, y, x + w, y + h), image))
    return out


class TestRouting:
    def test_all_one_expert(self):
        outs = [(f"i{k}", GateOutput("single", np.array([1.0, 0.0]))) for k in range(4)]
        s = routing_summary(outs, expert_ids=["day", "night"])
        assert s["undefined"]["experts"]["day"]["mean"] == 1.0
        assert s["all"]["experts"]["day"]["std"] == 0.0

    def test_two_point(self):
        outs = [("a", np.array([0.25, 0.75])), ("b", np.array([0.75, 0.25]))]
        s = routing_summary(outs, {"a": "daytime", "b": "daytime"})
        for e in ("0", "1"):
            assert s["daytime"]["experts"][e]["mean"] == 0.5
            assert s["daytime"]["experts"][e]["std"] == 0.25

    def test_subset_order_and_absent(self):
        outs = [("a", np.array([0.5, 0.5])), ("b", np.array([0.2, 0.8]))]
        s = routing_summary(outs, {"a": "nighttime", "b": "daytime"})
        assert list(s) == ["daytime", "nighttime", "all"]

    def test_mirror(self):
        rng = np.random.default_rng(0)
        w = rng.uniform(0, 1, 30)
        outs = [(f"i{k}", np.array([v, 1 - v])) for k, v in enumerate(w)]
        e = routing_summary(outs)["all"]["experts"]
        assert e["0"]["mean"] == pytest.approx(1 - e["1"]["mean"])
        assert e["0"]["std"] == pytest.approx(e["1"]["std"])
        assert e["0"]["histogram"] == e["1"]["histogram"][::-1]
        assert sum(e["0"]["histogram"]) == 30 and len(e["0"]["histogram"]) == 20

    def test_rejects_spatial(self):
        with pytest.raises(ValueError):
            routing_summary([("a", GateOutput("spatial", np.full((2, 2, 2), 0.5)))])

    def test_csv(self):
        text = routing_csv([("a", np.array([0.25, 0.75]))], {"a": "daytime"}, ["day", "night"])
        assert text == "image_id,subset,w_day,w_night\na,daytime,0.25,0.75\n"


class TestDisagreement:
    def test_identical(self):
        rng = np.random.default_rng(0)
        a = random_side(rng, 5)
        c = disagreement(a, list(a))["i"]
        assert c == {"full_agreement": 5, "label_disagreement": 0, "only_a": 0, "only_b": 0}

    def test_empty_b(self):
        c = disagreement([det(0, (0, 0, 1, 1)), det(1, (5, 5, 6, 6))], [])["i"]
        assert c["only_a"] == 2 and c["full_agreement"] == 0

    def test_label_disagreement(self):
        c = disagreement([det(0, (0, 0, 10, 10))], [det(1, (0, 0, 10, 9))])["i"]
        assert c == {"full_agreement": 0, "label_disagreement": 1, "only_a": 0, "only_b": 0}

    def test_partition_and_swap(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            a = random_side(rng, int(rng.integers(0, 7)))
            b = random_side(rng, int(rng.integers(0, 7)))
            ab = disagreement(a, b).get("i", dict.fromkeys(CATEGORIES, 0))
            ba = disagreement(b, a).get("i", dict.fromkeys(CATEGORIES, 0))
            matched = ab["full_agreement"] + ab["label_disagreement"]
            assert matched + ab["only_a"] == len(a) and matched + ab["only_b"] == len(b)
            assert matched <= min(len(a), len(b))
            assert (ab["full_agreement"], ab["label_disagreement"]) == \
                (ba["full_agreement"], ba["label_disagreement"])
            assert (ab["only_a"], ab["only_b"]) == (ba["only_b"], ba["only_a"])

    def test_greedy_equals_exhaustive(self):
        rng = np.random.default_rng(2)
        for _ in range(150):
            a = random_side(rng, int(rng.integers(0, 7)))
            b = random_side(rng, int(rng.integers(0, 7)))
            ba = np.array([d.box.as_list() for d in a]).reshape(-1, 4)
            bb = np.array([d.box.as_list() for d in b]).reshape(-1, 4)
            ref = oracles.exhaustive_match([d.box.as_list() for d in a],
                                           [d.box.as_list() for d in b], 0.5)
            assert sorted(match_pairs(ba, bb, 0.5)) == ref


class TestReport:
    def test_single_image(self):
        per = {"i": {"full_agreement": 3, "label_disagreement": 1, "only_a": 2, "only_b": 4}}
        r = disagreement_report(per)
        assert {c: r.subsets["all"][c] for c in CATEGORIES} == per["i"]

    def test_average(self):
        per = {"i": {"full_agreement": 2, "label_disagreement": 0, "only_a": 0, "only_b": 0}}
        r = disagreement_report(per, {"i": "daytime", "j": "daytime"})
        assert r.subsets["daytime"]["full_agreement"] == 1.0
        assert r.subsets["daytime"]["images"] == 2

    def test_csv(self):
        per = {"i": {"full_agreement": 1, "label_disagreement": 0, "only_a": 2, "only_b": 0}}
        text = disagreement_report(per, expert_ids=("day", "night")).to_csv()
        assert text.splitlines()[0] == \
            "subset,images,full_agreement,label_disagreement,only_day,only_night"
