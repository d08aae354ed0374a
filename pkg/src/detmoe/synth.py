"""Deterministic synthetic two-domain datasets for exercising the pipeline.

Expert ``i`` is accurate on domain ``i``: its raw tensor encodes every
ground-truth box exactly at the box's anchor slot.  On the other domain it
misses objects, mislocalises boxes, flips classes and hallucinates
confident false positives, at rates set per (expert, domain).  Gate
features are spatially constant channel patterns plus Gaussian noise,
separable by domain with a configurable margin.  Ambiguous images draw
their feature offset uniformly between the two domain means.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from detmoe import io
from detmoe.decode import AnchorConfig, Level, RawPredictionTensor, encode_box
from detmoe.errors import ConfigError
from detmoe.evaluation import GroundTruth
from detmoe.gate import FeatureMap
from detmoe.geometry import Box

DOMAIN_SUBSETS = ("daytime", "nighttime")


def default_anchors(class_count: int = 3, image_size: int = 64) -> AnchorConfig:
    return AnchorConfig((
        Level(8, ((8.0, 8.0), (12.0, 16.0), (16.0, 12.0))),
        Level(16, ((20.0, 20.0), (24.0, 32.0), (32.0, 24.0))),
        Level(32, ((40.0, 40.0), (44.0, 52.0), (52.0, 44.0))),
    ), class_count, (image_size, image_size))


def _pair(in_domain: float, cross: float) -> list[list[float]]:
    return [[in_domain, cross], [cross, in_domain]]


@dataclass
class SynthSpec:
    images_per_domain: int = 200
    ambiguous_images: int = 0
    class_count: int = 3
    seed: int = 0
    expert_ids: tuple[str, str] = ("day", "night")
    objects_per_image: tuple[int, int] = (1, 4)
    # [expert][domain] rates
    loc_noise: list = field(default_factory=lambda: _pair(0.0, 0.1))
    miss_prob: list = field(default_factory=lambda: _pair(0.0, 0.2))
    false_positives: list = field(default_factory=lambda: _pair(0.0, 1.0))
    class_flip: list = field(default_factory=lambda: _pair(0.0, 0.1))
    feature_channels_per_expert: int = 4
    feature_size: int = 4
    feature_margin: float = 1.5
    feature_noise: float = 1.0
    test_fraction: float = 0.5
    image_size: int = 64

    def __post_init__(self):
        if self.class_count < 1:
            raise ConfigError("class_count must be >= 1")
        if self.images_per_domain < 0 or self.ambiguous_images < 0:
            raise ConfigError("image counts must be >= 0")
        lo, hi = self.objects_per_image
        if not 0 <= lo <= hi:
            raise ConfigError("objects_per_image must satisfy 0 <= lo <= hi")
        for name in ("loc_noise", "miss_prob", "false_positives", "class_flip"):
            m = np.asarray(getattr(self, name), dtype=float)
            if m.shape != (2, 2) or np.any(m < 0):
                raise ConfigError(f"{name} must be a non-negative 2x2 [expert][domain] table")
        if np.any(np.asarray(self.miss_prob) > 1) or np.any(np.asarray(self.class_flip) > 1):
            raise ConfigError("probabilities must lie in [0, 1]")
        if not 0.0 <= self.test_fraction <= 1.0:
            raise ConfigError("test_fraction must be in [0, 1]")


@dataclass
class SynthImage:
    image_id: str
    subset: str
    domain_label: Optional[int]
    split: str
    ground_truth: list[GroundTruth]
    raws: list[RawPredictionTensor]
    features: FeatureMap


def _slots(cfg: AnchorConfig):
    return [(li, ai, cy, cx)
            for li in range(len(cfg.levels))
            for ai in range(cfg.levels[li].anchor_count)
            for cy in range(cfg.grid_shape(li)[0])
            for cx in range(cfg.grid_shape(li)[1])]


def _place_box(rng, cfg: AnchorConfig, slot):
    """A box whose anchor slot is ``slot`` and which lies inside the image, or None."""
    li, ai, cy, cx = slot
    stride = cfg.levels[li].stride
    aw, ah = cfg.levels[li].anchors[ai]
    img_h, img_w = cfg.image_size
    w = aw * float(np.exp(rng.uniform(-0.2, 0.2)))
    h = ah * float(np.exp(rng.uniform(-0.2, 0.2)))
    lo_x, hi_x = max(cx * stride + 0.1 * stride, w / 2), min((cx + 0.9) * stride, img_w - w / 2)
    lo_y, hi_y = max(cy * stride + 0.1 * stride, h / 2), min((cy + 0.9) * stride, img_h - h / 2)
    if lo_x > hi_x or lo_y > hi_y:
        return None
    bx, by = rng.uniform(lo_x, hi_x), rng.uniform(lo_y, hi_y)
    return [bx - w / 2, by - h / 2, bx + w / 2, by + h / 2]


def _background(rng, cfg: AnchorConfig) -> list[np.ndarray]:
    levels = []
    for li in range(len(cfg.levels)):
        shape = cfg.level_shape(li)
        t = np.empty(shape)
        t[..., 0:4] = rng.normal(0.0, 0.3, size=shape[:3] + (4,))
        t[..., 4] = -8.0 + rng.normal(0.0, 0.5, size=shape[:3])
        t[..., 5:] = -6.0 + rng.normal(0.0, 0.5, size=shape[:3] + (cfg.class_count,))
        levels.append(t)
    return levels


def _write_slot(levels, slot, box_logits, cls, conf, class_count):
    li, ai, cy, cx = slot
    levels[li][ai, cy, cx, 0:4] = box_logits
    levels[li][ai, cy, cx, 4] = conf
    levels[li][ai, cy, cx, 5:] = -conf
    levels[li][ai, cy, cx, 5 + cls] = conf


def _jitter(rng, box, noise, cfg: AnchorConfig):
    x1, y1, x2, y2 = box
    w, h = x2 - x1, y2 - y1
    bx = (x1 + x2) / 2 + rng.normal(0.0, noise * w)
    by = (y1 + y2) / 2 + rng.normal(0.0, noise * h)
    w *= float(np.exp(rng.normal(0.0, noise)))
    h *= float(np.exp(rng.normal(0.0, noise)))
    img_h, img_w = cfg.image_size
    return [float(np.clip(bx - w / 2, 0, img_w)), float(np.clip(by - h / 2, 0, img_h)),
            float(np.clip(bx + w / 2, 0, img_w)), float(np.clip(by + h / 2, 0, img_h))]


def generate_image(spec: SynthSpec, cfg: AnchorConfig, index: int, domain: Optional[int],
                   split: str, pattern: np.ndarray) -> SynthImage:
    """One image; ``domain`` None makes it ambiguous."""
    rng = np.random.default_rng([spec.seed, index])
    if domain is None:
        subset = "undefined"
        offset = rng.uniform(-1.0, 1.0)
        quality_domain = 0 if offset > 0 else 1
    else:
        subset = DOMAIN_SUBSETS[domain]
        offset = 1.0 if domain == 0 else -1.0
        quality_domain = domain
    image_id = f"{subset}-{index:05d}"

    slots = _slots(cfg)
    free = list(rng.permutation(len(slots)))
    n_obj = int(rng.integers(spec.objects_per_image[0], spec.objects_per_image[1] + 1))
    objects = []
    while len(objects) < n_obj and free:
        slot = slots[free.pop()]
        box = _place_box(rng, cfg, slot)
        if box is not None:
            objects.append((slot, box, int(rng.integers(spec.class_count))))
    gts = [GroundTruth(image_id, c, Box(*b)) for _, b, c in objects]

    raws = []
    for e, expert_id in enumerate(spec.expert_ids):
        erng = np.random.default_rng([spec.seed, index, e + 1])
        levels = _background(erng, cfg)
        noise = spec.loc_noise[e][quality_domain]
        for slot, box, cls in objects:
            if erng.random() < spec.miss_prob[e][quality_domain]:
                continue
            if noise > 0:
                box = _jitter(erng, box, noise, cfg)
            if erng.random() < spec.class_flip[e][quality_domain] and spec.class_count > 1:
                cls = int((cls + erng.integers(1, spec.class_count)) % spec.class_count)
            li, ai, cy, cx = slot
            _write_slot(levels, slot, encode_box(box, cfg, li, ai, (cy, cx)), cls,
                        erng.uniform(5.0, 9.0), spec.class_count)
        n_fp = int(erng.poisson(spec.false_positives[e][quality_domain]))
        used = {s for s, _, _ in objects}
        for k in erng.permutation(len(slots)):
            slot = slots[k]
            if n_fp == 0:
                break
            if slot in used:
                continue
            box = _place_box(erng, cfg, slot)
            if box is None:
                continue
            li, ai, cy, cx = slot
            _write_slot(levels, slot, encode_box(box, cfg, li, ai, (cy, cx)),
                        int(erng.integers(spec.class_count)), erng.uniform(3.0, 8.0),
                        spec.class_count)
            n_fp -= 1
        raws.append(RawPredictionTensor(image_id, expert_id,
                                        [lv.astype(np.float32) for lv in levels]))

    c = pattern.shape[0]
    data = (spec.feature_margin * offset * pattern[:, None, None]
            + rng.normal(0.0, spec.feature_noise, size=(c, spec.feature_size, spec.feature_size)))
    features = FeatureMap(image_id, data.astype(np.float32), list(spec.expert_ids), "synthetic")
    return SynthImage(image_id, subset, domain, split, gts, raws, features)


def generate(spec: SynthSpec, threads: int = 1) -> tuple[AnchorConfig, list[SynthImage]]:
    """Every image draws from its own seeded stream, so ``threads`` never changes the result."""
    from detmoe.pipeline import ordered_map

    cfg = default_anchors(spec.class_count, spec.image_size)
    prng = np.random.default_rng([spec.seed, 2**31 - 1])
    c = spec.feature_channels_per_expert * len(spec.expert_ids)
    pattern = prng.normal(size=c)
    pattern /= np.linalg.norm(pattern)
    n_train = int(round(spec.images_per_domain * (1.0 - spec.test_fraction)))
    jobs = [(domain, "train" if k < n_train else "test")
            for domain in (0, 1) for k in range(spec.images_per_domain)]
    jobs += [(None, "test")] * spec.ambiguous_images
    images = ordered_map(lambda i: generate_image(spec, cfg, i, jobs[i][0], jobs[i][1], pattern),
                         range(len(jobs)), threads)
    return cfg, images


def synth_dataset(spec: SynthSpec, out_dir, threads: int = 1) -> Path:
    """Write a dataset directory and return the manifest path.

    Layout: ``anchors.json``, ``manifest.json``, ``ground_truth.jsonl``,
    ``subsets.jsonl``, ``features/<image>.moef``, ``raw/<expert>/<image>.moef``
    and a ready-to-run ``moe.json`` pipeline config using equal fixed weights.
    """
    out = Path(out_dir)
    cfg, images = generate(spec, threads)
    (out / "features").mkdir(parents=True, exist_ok=True)
    for e in spec.expert_ids:
        (out / "raw" / e).mkdir(parents=True, exist_ok=True)
    io.write_anchors(out / "anchors.json", cfg)
    entries = []
    for img in images:
        io.write_feature(out / "features" / f"{img.image_id}.moef", img.features)
        raw_files = {}
        for raw in img.raws:
            rel = f"raw/{raw.expert_id}/{img.image_id}.moef"
            io.write_raw(out / rel, raw)
            raw_files[raw.expert_id] = rel
        entries.append({"image_id": img.image_id, "feature_file": f"features/{img.image_id}.moef",
                        "raw_files": raw_files, "ground_truth": "ground_truth.jsonl",
                        "domain_label": img.domain_label, "subset": img.subset,
                        "split": img.split})
    io.write_ground_truth(out / "ground_truth.jsonl", [g for img in images for g in img.ground_truth])
    io.write_subsets(out / "subsets.jsonl", {img.image_id: img.subset for img in images})
    io.write_manifest(out / "manifest.json", entries, spec.expert_ids, "anchors.json")
    n = len(spec.expert_ids)
    pipeline = {
        "anchors": "anchors.json",
        "experts": [{"id": e, "raw_dir": f"raw/{e}"} for e in spec.expert_ids],
        "feature_dir": "features",
        "fixed_weights": [1.0 / n] * n,
        "fusion": {"method": "nmw", "iou": 0.6},
        "conf_threshold": 0.001,
    }
    (out / "moe.json").write_text(io.canonical_json(pipeline) + "\n", encoding="utf-8")
    return out / "manifest.json"
