"""File formats.

Tensor files (raw predictions and gate features) are a sequence of records::

    MOEF1\\n
    {"byte_order":"little","dtype":"f32","kind":"raw",...}\\n
    <little-endian float32 payload, row-major>

A raw-prediction file holds one record per pyramid level (``"level"`` in the
header); a feature file holds a single record.  Everything else is JSON or
JSON Lines with compact separators, so identical inputs produce identical
bytes.  Floats are written with Python's shortest round-trip repr.
"""

from __future__ import annotations

import base64
import json
import os
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from detmoe.decode import AnchorConfig, RawPredictionTensor
from detmoe.errors import DetMoeError, FormatError
from detmoe.evaluation import GroundTruth
from detmoe.gate import FeatureMap, GateParams
from detmoe.geometry import Box, Detection

PathLike = Union[str, os.PathLike]

MAGIC = b"MOEF1"
TENSOR_KINDS = ("raw", "feature")
SUBSET_LABELS = ("daytime", "nighttime", "dawn_dusk", "undefined")
GATE_FORMAT = "detmoe-gate"
MANIFEST_FORMAT = "detmoe-manifest"


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


# -- tensor records ---------------------------------------------------------

def encode_record(header: dict, data: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(np.asarray(data), dtype="<f4")
    header = dict(header, shape=list(arr.shape), dtype="f32", byte_order="little")
    return MAGIC + b"\n" + canonical_json(header).encode() + b"\n" + arr.tobytes()


def decode_records(buf: bytes, path=None) -> list[tuple[dict, np.ndarray]]:
    records = []
    pos = 0
    while pos < len(buf):
        if buf[pos:pos + len(MAGIC) + 1] != MAGIC + b"\n":
            raise FormatError(f"expected magic {MAGIC.decode()!r}", path=path, offset=pos)
        pos += len(MAGIC) + 1
        end = buf.find(b"\n", pos)
        if end < 0:
            raise FormatError("unterminated header line", path=path, offset=pos)
        try:
            header = json.loads(buf[pos:end].decode())
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"bad header JSON: {exc}", path=path, offset=pos) from None
        if not isinstance(header, dict):
            raise FormatError("header must be a JSON object", path=path, offset=pos)
        if header.get("kind") not in TENSOR_KINDS:
            raise FormatError(f"unknown record kind {header.get('kind')!r}", path=path, offset=pos)
        if header.get("dtype") != "f32" or header.get("byte_order") != "little":
            raise FormatError("only little-endian f32 payloads are supported", path=path, offset=pos)
        shape = header.get("shape")
        if not isinstance(shape, list) or not all(isinstance(s, int) and s >= 0 for s in shape):
            raise FormatError(f"bad shape {shape!r}", path=path, offset=pos)
        pos = end + 1
        need = 4 * int(np.prod(shape, dtype=np.int64))
        have = len(buf) - pos
        if have < need:
            raise FormatError(f"truncated payload: expected {need} bytes, found {have}",
                              path=path, offset=pos)
        data = np.frombuffer(buf, dtype="<f4", count=need // 4, offset=pos).reshape(shape)
        if not np.all(np.isfinite(data)):
            raise FormatError("payload contains non-finite values", path=path, offset=pos)
        records.append((header, data.copy()))
        pos += need
    return records


def _read_bytes(path: PathLike) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read: {exc.strerror}", path=path) from None


def write_raw(path: PathLike, raw: RawPredictionTensor) -> None:
    blob = b"".join(
        encode_record({"kind": "raw", "image_id": raw.image_id, "expert_id": raw.expert_id,
                       "level": i}, lv)
        for i, lv in enumerate(raw.levels))
    Path(path).write_bytes(blob)


def read_raw(path: PathLike) -> RawPredictionTensor:
    records = decode_records(_read_bytes(path), path)
    if not records:
        raise FormatError("empty tensor file", path=path)
    ids = {(h.get("image_id"), h.get("expert_id")) for h, _ in records}
    if len(ids) != 1 or any(h["kind"] != "raw" for h, _ in records):
        raise FormatError("raw file must hold raw records of one image and expert", path=path)
    levels = [h.get("level") for h, _ in records]
    if levels != list(range(len(records))):
        raise FormatError(f"level records out of order: {levels}", path=path)
    image_id, expert_id = ids.pop()
    return RawPredictionTensor(str(image_id), str(expert_id), [d for _, d in records])


def write_feature(path: PathLike, fm: FeatureMap) -> None:
    Path(path).write_bytes(encode_record(
        {"kind": "feature", "image_id": fm.image_id, "expert_ids": list(fm.expert_ids),
         "provenance": fm.provenance}, fm.data))


def read_feature(path: PathLike) -> FeatureMap:
    records = decode_records(_read_bytes(path), path)
    if len(records) != 1 or records[0][0]["kind"] != "feature":
        raise FormatError("feature file must hold exactly one feature record", path=path)
    header, data = records[0]
    if data.ndim != 3:
        raise FormatError(f"feature shape must be [C, H, W], got {list(data.shape)}", path=path)
    try:
        return FeatureMap(str(header.get("image_id")), data, list(header.get("expert_ids") or []),
                          str(header.get("provenance", "")))
    except DetMoeError as exc:
        raise FormatError(str(exc), path=path) from None


# -- JSON Lines -------------------------------------------------------------

def _iter_jsonl(path: PathLike):
    try:
        fh = open(path, encoding="utf-8")
    except OSError as exc:
        raise FormatError(f"cannot read: {exc.strerror}", path=path) from None
    with fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"bad JSON: {exc.msg}", path=path, line=n) from None
            if not isinstance(obj, dict):
                raise FormatError("each line must be a JSON object", path=path, line=n)
            yield n, obj


def _box_field(obj, path, n) -> Box:
    try:
        return Box.from_seq(obj["box"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"bad box: {exc}", path=path, line=n) from None


def detection_to_json(d: Detection) -> str:
    obj = {"image_id": d.image_id, "class_id": d.class_id, "score": d.score,
           "box": d.box.as_list()}
    if d.source is not None:
        obj["source"] = d.source
    return json.dumps(obj, separators=(",", ":"), allow_nan=False)


def write_detections(path: PathLike, dets: Iterable[Detection]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for d in dets:
            fh.write(detection_to_json(d) + "\n")


def read_detections(path: PathLike) -> list[Detection]:
    out = []
    for n, obj in _iter_jsonl(path):
        box = _box_field(obj, path, n)
        try:
            out.append(Detection(str(obj["image_id"]), int(obj["class_id"]), float(obj["score"]),
                                 box, obj.get("source")))
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"bad detection: {exc}", path=path, line=n) from None
    return out


def write_ground_truth(path: PathLike, gts: Iterable[GroundTruth]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for g in gts:
            fh.write(json.dumps({"image_id": g.image_id, "class_id": g.class_id,
                                 "box": g.box.as_list()}, separators=(",", ":")) + "\n")


def read_ground_truth(path: PathLike) -> list[GroundTruth]:
    out = []
    for n, obj in _iter_jsonl(path):
        box = _box_field(obj, path, n)
        try:
            out.append(GroundTruth(str(obj["image_id"]), int(obj["class_id"]), box))
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"bad ground truth: {exc}", path=path, line=n) from None
    return out


def write_subsets(path: PathLike, subsets: dict[str, str]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for image_id, label in subsets.items():
            fh.write(json.dumps({"image_id": image_id, "subset": label},
                                separators=(",", ":")) + "\n")


def read_subsets(path: PathLike) -> dict[str, str]:
    out: dict[str, str] = {}
    for n, obj in _iter_jsonl(path):
        image_id, label = obj.get("image_id"), obj.get("subset")
        if not isinstance(image_id, str):
            raise FormatError("missing image_id", path=path, line=n)
        if label not in SUBSET_LABELS:
            raise FormatError(f"unknown subset {label!r}", path=path, line=n)
        if image_id in out:
            raise FormatError(f"duplicate image_id {image_id!r}", path=path, line=n)
        out[image_id] = label
    return out


# -- JSON documents ---------------------------------------------------------

def _load_json(path: PathLike):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except OSError as exc:
        raise FormatError(f"cannot read: {exc.strerror}", path=path) from None
    except json.JSONDecodeError as exc:
        raise FormatError(f"bad JSON: {exc.msg}", path=path, line=exc.lineno) from None


def _dump_json(path: PathLike, obj) -> None:
    Path(path).write_text(canonical_json(obj) + "\n", encoding="utf-8")


def write_anchors(path: PathLike, cfg: AnchorConfig) -> None:
    _dump_json(path, cfg.to_dict())


def read_anchors(path: PathLike) -> AnchorConfig:
    doc = _load_json(path)
    if not isinstance(doc, dict) or doc.get("version") != 1:
        raise FormatError("anchor config must be a version-1 JSON object", path=path)
    try:
        return AnchorConfig.from_dict(doc)
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"bad anchor config: {exc}", path=path) from None


def gate_to_dict(p: GateParams) -> dict:
    return {
        "format": GATE_FORMAT,
        "version": 1,
        "architecture": p.architecture,
        "mode": p.mode,
        "expert_ids": list(p.expert_ids),
        "in_channels": p.in_channels,
        "hidden": p.hidden,
        "conv_channels": p.conv_channels,
        "class_count": p.class_count,
        "tensors": {
            k: {"shape": list(v.shape),
                "data": base64.b64encode(np.ascontiguousarray(v, dtype="<f8").tobytes()).decode()}
            for k, v in sorted(p.tensors.items())
        },
    }


def gate_from_dict(doc: dict, path=None) -> GateParams:
    if not isinstance(doc, dict) or doc.get("format") != GATE_FORMAT:
        raise FormatError("not a gate parameter document", path=path)
    if doc.get("version") != 1:
        raise FormatError(f"unsupported gate version {doc.get('version')!r}", path=path)
    try:
        p = GateParams(doc["architecture"], doc["mode"], list(doc["expert_ids"]),
                       int(doc["in_channels"]), int(doc["hidden"]), int(doc["conv_channels"]),
                       doc.get("class_count"))
        for k, t in doc["tensors"].items():
            raw = base64.b64decode(t["data"], validate=True)
            p.tensors[k] = np.frombuffer(raw, dtype="<f8").reshape(t["shape"]).astype(np.float64)
        p.validate()
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"bad gate parameters: {exc}", path=path) from None
    return p


def write_gate(path: PathLike, p: GateParams) -> None:
    _dump_json(path, gate_to_dict(p))


def read_gate(path: PathLike) -> GateParams:
    return gate_from_dict(_load_json(path), path)


# -- training manifest ------------------------------------------------------

def write_manifest(path: PathLike, images: Sequence[dict], expert_ids: Sequence[str],
                   anchors: str) -> None:
    _dump_json(path, {"format": MANIFEST_FORMAT, "version": 1, "expert_ids": list(expert_ids),
                      "anchors": anchors, "images": list(images)})


def read_manifest(path: PathLike) -> dict:
    """Manifest with every relative path resolved against its directory.

    A bare JSON list of image entries is accepted as well; it then carries
    no expert order or anchor path of its own.
    """
    doc = _load_json(path)
    if isinstance(doc, list):
        doc = {"format": MANIFEST_FORMAT, "version": 1, "images": doc}
    if not isinstance(doc, dict) or doc.get("format") != MANIFEST_FORMAT or doc.get("version") != 1:
        raise FormatError("not a version-1 training manifest", path=path)
    base = Path(path).parent
    images = []
    for k, entry in enumerate(doc.get("images", [])):
        if not isinstance(entry, dict) or "image_id" not in entry or "feature_file" not in entry:
            raise FormatError(f"image entry {k} needs image_id and feature_file", path=path)
        e = dict(entry)
        e["feature_file"] = str(base / e["feature_file"])
        e["raw_files"] = {x: str(base / f) for x, f in (e.get("raw_files") or {}).items()}
        if e.get("ground_truth"):
            e["ground_truth"] = str(base / e["ground_truth"])
        images.append(e)
    out = dict(doc, images=images)
    if doc.get("anchors"):
        out["anchors"] = str(base / doc["anchors"])
    return out


def load_training_set(manifest: PathLike, split: Optional[str] = None, with_raws: bool = True,
                      threads: int = 1):
    """Read a manifest into ``(samples, anchors, expert_ids)``.

    ``threads`` only parallelises file reads; sample order follows the manifest.
    """
    from detmoe.pipeline import ordered_map
    from detmoe.training import TrainSample

    doc = read_manifest(manifest)
    anchors = read_anchors(doc["anchors"]) if doc.get("anchors") else None
    entries = [e for e in doc["images"] if split is None or e.get("split") == split]
    expert_ids = doc.get("expert_ids")
    if expert_ids is None and entries:
        expert_ids = list(read_feature(entries[0]["feature_file"]).expert_ids)
    gt_cache: dict[str, dict[str, list]] = {}
    for e in entries:
        path = e.get("ground_truth")
        if path and path not in gt_cache:
            grouped: dict[str, list] = {}
            for g in read_ground_truth(path):
                grouped.setdefault(g.image_id, []).append(g)
            gt_cache[path] = grouped

    def one(e):
        fm = read_feature(e["feature_file"])
        raws = None
        if with_raws and e["raw_files"]:
            missing = [x for x in expert_ids if x not in e["raw_files"]]
            if missing:
                raise FormatError(f"{e['image_id']}: no raw file for experts {missing}",
                                  path=manifest)
            raws = [read_raw(e["raw_files"][x]) for x in expert_ids]
        gts = gt_cache[e["ground_truth"]].get(e["image_id"], []) if e.get("ground_truth") else []
        return TrainSample(e["image_id"], fm.data.astype(np.float64), raws, gts,
                           e.get("domain_label"))

    samples = ordered_map(one, entries, threads)
    return samples, anchors, list(expert_ids or [])
