"""End-to-end per-image pipelines shared by the CLI and the acceptance suite."""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence, TypeVar

import numpy as np

from detmoe import io
from detmoe.decode import AnchorConfig, RawPredictionTensor, decode_all
from detmoe.errors import ConfigError, FormatError
from detmoe.fusion import FusionConfig, fuse, nms
from detmoe.gate import (FeatureMap, GateOutput, GateParams, apply_expert_weights,
                         fixed_weight_output, gate_forward)
from detmoe.geometry import Detection

T = TypeVar("T")
R = TypeVar("R")


def ordered_map(fn: Callable[[T], R], items: Sequence[T], threads: int = 1) -> list[R]:
    """``map`` over items, optionally threaded; results always in input order."""
    if threads <= 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def standalone(raw: RawPredictionTensor, anchors: AnchorConfig, conf_threshold: float = 0.001,
               iou_threshold: float = 0.6) -> list[Detection]:
    """A single expert's own pipeline: decode, then class-wise NMS."""
    return nms(decode_all(raw, anchors, conf_threshold), iou_threshold)


def moe_image(raws: Sequence[RawPredictionTensor], out: GateOutput, anchors: AnchorConfig,
              fusion: FusionConfig, conf_threshold: float = 0.001) -> list[Detection]:
    """Weight raw outputs, decode each expert, fuse.

    Experts whose gate weights are exactly zero everywhere are switched off:
    a zero-scaled logit tensor would otherwise decode to a 0.25-confidence
    box at every anchor.
    """
    weighted = apply_expert_weights(raws, out, anchors)
    w = np.asarray(out.weights)
    per_expert = [decode_all(t, anchors, conf_threshold)
                  for i, t in enumerate(weighted) if np.any(w[..., i] != 0.0)]
    return fuse(per_expert, fusion)


def list_tensor_files(directory) -> dict[str, Path]:
    d = Path(directory)
    if not d.is_dir():
        raise FormatError("not a directory", path=d)
    return {p.stem: p for p in sorted(d.glob("*.moef"))}


@dataclass
class PipelineConfig:
    anchors: AnchorConfig
    expert_ids: list[str]
    raw_dirs: list[Path]
    feature_dir: Optional[Path] = None
    gate: Optional[GateParams] = None
    fixed_weights: Optional[list[float]] = None
    fusion: FusionConfig = field(default_factory=FusionConfig)
    conf_threshold: float = 0.001

    def __post_init__(self):
        if (self.gate is None) == (self.fixed_weights is None):
            raise ConfigError("give exactly one of a gate parameter file or fixed weights")
        if len(self.raw_dirs) != len(self.expert_ids):
            raise ConfigError("one raw directory per expert is required")
        if self.gate is not None:
            if list(self.gate.expert_ids) != list(self.expert_ids):
                raise ConfigError(f"gate expert order {self.gate.expert_ids} differs from "
                                  f"pipeline order {self.expert_ids}")
            if self.feature_dir is None:
                raise ConfigError("a gate needs a feature directory")
        if self.fixed_weights is not None and len(self.fixed_weights) != len(self.expert_ids):
            raise ConfigError(f"{len(self.fixed_weights)} fixed weights for "
                              f"{len(self.expert_ids)} experts")
        mw = self.fusion.model_map_weights
        if mw is not None and set(mw) != set(self.expert_ids):
            raise ConfigError(f"model weights {sorted(mw)} do not cover experts {self.expert_ids}")


def load_pipeline_config(path, overrides: Optional[dict] = None) -> PipelineConfig:
    """Read a pipeline JSON file; ``overrides`` (already parsed flags) win."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise FormatError(f"cannot read: {exc.strerror}", path=path) from None
    except json.JSONDecodeError as exc:
        raise FormatError(f"bad JSON: {exc.msg}", path=path, line=exc.lineno) from None
    if not isinstance(doc, dict):
        raise FormatError("pipeline config must be a JSON object", path=path)
    base = path.parent
    ov = {k: v for k, v in (overrides or {}).items() if v is not None}
    fusion_doc = dict(doc.get("fusion") or {})
    for key in ("method", "iou", "sigma", "tau", "model_weights"):
        if key in ov:
            fusion_doc[key] = ov[key]
    try:
        fusion = FusionConfig(
            method=fusion_doc.get("method", "nmw"),
            iou_threshold=float(fusion_doc.get("iou", 0.6)),
            softnms_sigma=float(fusion_doc.get("sigma", 0.5)),
            softnms_score_floor=float(fusion_doc.get("tau", 0.3)),
            model_map_weights=fusion_doc.get("model_weights"))
        experts = doc["experts"]
        expert_ids = [str(e["id"]) for e in experts]
        raw_dirs = [base / e["raw_dir"] for e in experts]
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"{path}: incomplete pipeline config ({exc})") from None
    if "anchors" not in doc:
        raise ConfigError(f"{path}: missing anchors")
    gate = fixed = None
    if "fixed_weights" in ov:
        fixed = [float(v) for v in ov["fixed_weights"]]
    elif "gate" in ov:
        gate = io.read_gate(ov["gate"])
    elif doc.get("gate"):
        gate = io.read_gate(base / doc["gate"])
    elif doc.get("fixed_weights") is not None:
        fixed = [float(v) for v in doc["fixed_weights"]]
    feature_dir = doc.get("feature_dir")
    return PipelineConfig(
        anchors=io.read_anchors(base / doc["anchors"]),
        expert_ids=expert_ids, raw_dirs=raw_dirs,
        feature_dir=base / feature_dir if feature_dir else None,
        gate=gate, fixed_weights=fixed, fusion=fusion,
        conf_threshold=float(ov.get("conf", doc.get("conf_threshold", 0.001))))


def run_moe(cfg: PipelineConfig, threads: int = 1, image_ids: Optional[Iterable[str]] = None):
    """Run the full pipeline over every image of the first expert's raw directory.

    Returns ``(detections, gate_outputs)``; both follow sorted image-id order.
    """
    files = [list_tensor_files(d) for d in cfg.raw_dirs]
    ids = sorted(image_ids) if image_ids is not None else sorted(files[0])
    for k, (eid, f) in enumerate(zip(cfg.expert_ids, files)):
        missing = [i for i in ids if i not in f]
        if missing:
            raise FormatError(f"expert {eid} has no raw tensor for {missing[:3]}",
                              path=cfg.raw_dirs[k])
    fixed = (fixed_weight_output(cfg.fixed_weights, len(cfg.expert_ids), cfg.expert_ids)
             if cfg.fixed_weights is not None else None)

    def one(image_id: str):
        raws = [io.read_raw(f[image_id]) for f in files]
        for eid, r in zip(cfg.expert_ids, raws):
            if r.expert_id != eid or r.image_id != image_id:
                raise FormatError(f"tensor holds {r.image_id}/{r.expert_id}, expected "
                                  f"{image_id}/{eid}")
        if fixed is not None:
            out = fixed
        else:
            fm = io.read_feature(cfg.feature_dir / f"{image_id}.moef")
            out = gate_forward(cfg.gate, fm)
        return moe_image(raws, out, cfg.anchors, cfg.fusion, cfg.conf_threshold), out

    results = ordered_map(one, ids, threads)
    dets = [d for r, _ in results for d in r]
    return dets, [(i, out) for i, (_, out) in zip(ids, results)]


def threads_from_env(value: Optional[int]) -> int:
    if value is not None:
        return max(1, value)
    env = os.environ.get("MOE_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError(f"MOE_THREADS must be an integer, got {env!r}") from None
    return 1


def gate_outputs_for(gate: GateParams, features: Sequence[FeatureMap]) -> list[tuple[str, GateOutput]]:
    return [(f.image_id, gate_forward(gate, f)) for f in features]
