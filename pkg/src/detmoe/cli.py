"""``detmoe`` command line.

Artifacts go to ``-o`` or stdout; diagnostics go to stderr.  Exit codes:
0 success, 1 internal error, 2 bad input, 3 bad configuration.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from collections import defaultdict
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from detmoe import analysis, io, pipeline
from detmoe.decode import decode_all
from detmoe.errors import ConfigError, DecodeError, DetMoeError, FormatError
from detmoe.evaluation import EvalConfig, evaluate
from detmoe.fusion import METHODS, FusionConfig, fuse
from detmoe.gate import ARCHITECTURES, MODES, GateOutput, init_gate
from detmoe.synth import SynthSpec, _pair, synth_dataset
from detmoe.training import BALANCING, LOSS_MODES, TrainConfig, train_gate

log = logging.getLogger("detmoe")

EXIT_OK, EXIT_INTERNAL, EXIT_INPUT, EXIT_CONFIG = 0, 1, 2, 3


def _diag(message: str) -> None:
    print(f"detmoe: {message}", file=sys.stderr)


def _emit(text: str, out: Optional[str]) -> None:
    if out is None or out == "-":
        sys.stdout.write(text)
        sys.stdout.flush()
    else:
        Path(out).write_text(text, encoding="utf-8", newline="\n")


def _dets_text(dets) -> str:
    return "".join(io.detection_to_json(d) + "\n" for d in dets)


def _by_image(dets) -> dict[str, list]:
    groups: dict[str, list] = defaultdict(list)
    for d in dets:
        groups[d.image_id].append(d)
    return groups


def _parse_model_weights(text: Optional[str]) -> Optional[dict[str, float]]:
    if text is None:
        return None
    out = {}
    for part in text.split(","):
        name, sep, value = part.partition("=")
        if not sep or not name.strip():
            raise ConfigError(f"--model-weights expects NAME=VALUE pairs, got {part!r}")
        try:
            out[name.strip()] = float(value)
        except ValueError:
            raise ConfigError(f"bad model weight {value!r} for {name!r}") from None
    return out


def _parse_floats(text: Optional[str], flag: str) -> Optional[list[float]]:
    if text is None:
        return None
    try:
        return [float(v) for v in text.split(",")]
    except ValueError:
        raise ConfigError(f"{flag} expects comma-separated numbers, got {text!r}") from None


def _fusion_flags(p: argparse.ArgumentParser, defaults: bool) -> None:
    d = (lambda v: v) if defaults else (lambda v: None)
    p.add_argument("--method", choices=METHODS, default=d("nmw"), help="fusion method")
    p.add_argument("--iou", type=float, default=d(0.6), help="fusion IoU threshold")
    p.add_argument("--sigma", type=float, default=d(0.5), help="Soft-NMS Gaussian sigma")
    p.add_argument("--tau", type=float, default=d(0.3), help="Soft-NMS score floor")
    p.add_argument("--model-weights", default=None,
                   help="per-expert mAP weights, e.g. day=0.58,night=0.52")


def _threads_flag(p: argparse.ArgumentParser) -> None:
    p.add_argument("--threads", type=int, default=None,
                   help="worker threads (default: $MOE_THREADS or 1)")


# -- commands ---------------------------------------------------------------

def cmd_decode(args) -> int:
    anchors = io.read_anchors(args.anchors)
    files = pipeline.list_tensor_files(args.raw_dir)
    threads = pipeline.threads_from_env(args.threads)

    def one(image_id):
        raw = io.read_raw(files[image_id])
        return decode_all(raw, anchors, args.conf)

    results = pipeline.ordered_map(one, sorted(files), threads)
    _emit(_dets_text(d for r in results for d in r), args.output)
    return EXIT_OK


def cmd_fuse(args) -> int:
    cfg = FusionConfig(args.method, args.iou, args.sigma, args.tau,
                       _parse_model_weights(args.model_weights))
    per_file = [_by_image(io.read_detections(f)) for f in args.detections]
    images = sorted(set().union(*per_file))
    threads = pipeline.threads_from_env(args.threads)
    results = pipeline.ordered_map(
        lambda k: fuse([g.get(k, []) for g in per_file], cfg), images, threads)
    _emit(_dets_text(d for r in results for d in r), args.output)
    return EXIT_OK


def _weights_record(image_id: str, out: GateOutput) -> str:
    rec = {"image_id": image_id, "mode": out.mode, "weights": np.asarray(out.weights).tolist()}
    if out.expert_ids:
        rec["expert_ids"] = list(out.expert_ids)
    return io.canonical_json(rec) + "\n"


def cmd_moe(args) -> int:
    overrides = {"method": args.method, "iou": args.iou, "sigma": args.sigma, "tau": args.tau,
                 "model_weights": _parse_model_weights(args.model_weights),
                 "conf": args.conf, "gate": args.gate,
                 "fixed_weights": _parse_floats(args.fixed_weights, "--fixed-weights")}
    cfg = pipeline.load_pipeline_config(args.config, overrides)
    dets, outputs = pipeline.run_moe(cfg, pipeline.threads_from_env(args.threads))
    _emit(_dets_text(dets), args.output)
    if args.weights_out:
        _emit("".join(_weights_record(k, o) for k, o in outputs), args.weights_out)
    return EXIT_OK


def cmd_gate_train(args) -> int:
    cfg = TrainConfig(loss_mode=args.loss, balancing=args.balancing, lam=args.lam,
                      learning_rate=args.lr, momentum=args.momentum, epochs=args.epochs,
                      batch_size=args.batch_size, seed=args.seed, lam_decay=args.lambda_decay)
    samples, anchors, expert_ids = io.load_training_set(
        args.manifest, args.split, with_raws=cfg.loss_mode == "detection",
        threads=pipeline.threads_from_env(args.threads))
    if not samples:
        raise ConfigError(f"no training images in split {args.split!r}")
    if cfg.loss_mode == "detection" and anchors is None:
        raise ConfigError("detection loss needs an anchor config in the manifest")
    if args.mode == "classwise" and anchors is None:
        raise ConfigError("classwise gates need the class count from the anchor config")
    params = init_gate(args.arch, expert_ids, samples[0].features.shape[0], mode=args.mode,
                       class_count=anchors.class_count if anchors is not None else None,
                       hidden=args.hidden, conv_channels=args.conv_channels, seed=args.seed)
    lines: list[str] = []
    sink = sys.stdout if args.metrics is None else None

    def on_epoch(row):
        line = io.canonical_json(row) + "\n"
        if sink is not None:
            sink.write(line)
            sink.flush()
        else:
            lines.append(line)
        log.info("epoch %d task %.5f balancing %.5f", row["epoch"], row["task_loss"],
                 row["balancing_loss"])

    trained, _ = train_gate(params, samples, cfg, anchors, on_epoch)
    io.write_gate(args.output, trained)
    if args.metrics is not None:
        _emit("".join(lines), args.metrics)
    return EXIT_OK


def cmd_eval(args) -> int:
    dets = io.read_detections(args.detections)
    gts = io.read_ground_truth(args.ground_truth)
    subsets = io.read_subsets(args.subsets) if args.subsets else None
    report = evaluate(dets, gts, subsets, EvalConfig(args.conf, args.iou_match))
    for w in report.warnings:
        _diag(f"warning: {w}")
    _emit(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n", args.output)
    if args.table:
        _emit(report.to_table(), None if args.table == "-" else args.table)
    return EXIT_OK


def _read_weights(path):
    """Weight records as ``(image_id, vector)`` pairs plus any expert names found."""
    out, names = [], None
    for n, obj in io._iter_jsonl(path):
        try:
            w = np.asarray(obj["weights"], dtype=np.float64)
            image_id = str(obj["image_id"])
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"bad weight record: {exc}", path=path, line=n) from None
        if obj.get("mode", "single") != "single":
            w = GateOutput(obj["mode"], w).summary()
        names = names or obj.get("expert_ids")
        out.append((image_id, w))
    return out, names


def cmd_analyze_routing(args) -> int:
    subsets = io.read_subsets(args.subsets) if args.subsets else None
    if args.weights:
        outputs, expert_ids = _read_weights(args.weights)
        if args.experts:
            expert_ids = args.experts.split(",")
    else:
        if not (args.gate and args.features):
            raise ConfigError("routing analysis needs --weights or both --gate and --features")
        gate = io.read_gate(args.gate)
        files = pipeline.list_tensor_files(args.features)
        feats = [io.read_feature(files[k]) for k in sorted(files)]
        outputs = [(k, o.summary()) for k, o in pipeline.gate_outputs_for(gate, feats)]
        expert_ids = list(gate.expert_ids)
    outputs.sort(key=lambda t: t[0])
    summary = analysis.routing_summary(outputs, subsets, expert_ids)
    _emit(json.dumps(summary, indent=2, sort_keys=True) + "\n", args.output)
    if args.csv:
        _emit(analysis.routing_csv(outputs, subsets, expert_ids), args.csv)
    return EXIT_OK


def cmd_analyze_disagreement(args) -> int:
    subsets = io.read_subsets(args.subsets) if args.subsets else None
    a = io.read_detections(args.dets_a)
    b = io.read_detections(args.dets_b)
    per_image = analysis.disagreement(a, b, args.match_iou)
    names = tuple(args.names.split(",")) if args.names else ("a", "b")
    if len(names) != 2:
        raise ConfigError("--names expects exactly two names")
    report = analysis.disagreement_report(per_image, subsets, expert_ids=names)
    _emit(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n", args.output)
    if args.csv:
        _emit(report.to_csv(), args.csv)
    return EXIT_OK


def cmd_synth(args) -> int:
    spec = SynthSpec(images_per_domain=args.images_per_domain,
                     ambiguous_images=args.ambiguous, class_count=args.classes, seed=args.seed,
                     loc_noise=_pair(0.0, args.cross_loc_noise),
                     miss_prob=_pair(0.0, args.cross_miss),
                     false_positives=_pair(0.0, args.cross_fp),
                     class_flip=_pair(0.0, args.cross_flip),
                     feature_margin=args.margin, feature_noise=args.feature_noise,
                     test_fraction=args.test_fraction)
    manifest = synth_dataset(spec, args.out_dir, pipeline.threads_from_env(args.threads))
    _emit(f"{manifest}\n", None)
    return EXIT_OK


# -- parser -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="detmoe", description="Mixture-of-experts detection fusion")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("decode", help="decode a directory of raw tensors")
    s.add_argument("raw_dir")
    s.add_argument("--anchors", required=True)
    s.add_argument("--conf", type=float, default=0.001, help="confidence threshold")
    s.add_argument("-o", "--output")
    _threads_flag(s)
    s.set_defaults(func=cmd_decode)

    s = sub.add_parser("fuse", help="fuse detection files, one per expert")
    s.add_argument("detections", nargs="+")
    _fusion_flags(s, defaults=True)
    s.add_argument("-o", "--output")
    _threads_flag(s)
    s.set_defaults(func=cmd_fuse)

    s = sub.add_parser("moe", help="run the full gated pipeline")
    s.add_argument("config", help="pipeline config JSON")
    _fusion_flags(s, defaults=False)
    s.add_argument("--conf", type=float, default=None)
    g = s.add_mutually_exclusive_group()
    g.add_argument("--gate", help="gate parameter file (overrides the config)")
    g.add_argument("--fixed-weights", help="comma-separated fixed expert weights")
    s.add_argument("--weights-out", help="write per-image gate weights as JSONL")
    s.add_argument("-o", "--output")
    _threads_flag(s)
    s.set_defaults(func=cmd_moe)

    s = sub.add_parser("gate-train", help="train a gate on a manifest")
    s.add_argument("manifest")
    s.add_argument("-o", "--output", required=True, help="gate parameter file")
    s.add_argument("--metrics", help="per-epoch metrics JSONL (default: stdout)")
    s.add_argument("--arch", choices=ARCHITECTURES, default="conv_fc2")
    s.add_argument("--mode", choices=MODES, default="single")
    s.add_argument("--hidden", type=int, default=512)
    s.add_argument("--conv-channels", type=int, default=64)
    s.add_argument("--loss", choices=LOSS_MODES, default="detection")
    s.add_argument("--balancing", choices=BALANCING, default="sample_entropy")
    s.add_argument("--lambda", dest="lam", type=float, default=0.1)
    s.add_argument("--lambda-decay", type=float, default=None)
    s.add_argument("--lr", type=float, default=0.01)
    s.add_argument("--momentum", type=float, default=0.9)
    s.add_argument("--epochs", type=int, default=10)
    s.add_argument("--batch-size", type=int, default=16)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--split", default="train", help="manifest split to train on")
    _threads_flag(s)
    s.set_defaults(func=cmd_gate_train)

    s = sub.add_parser("eval", help="mAP50 overall and per subset")
    s.add_argument("detections")
    s.add_argument("ground_truth")
    s.add_argument("--subsets")
    s.add_argument("--conf", type=float, default=0.001)
    s.add_argument("--iou-match", type=float, default=0.5)
    s.add_argument("--table", nargs="?", const="-", help="also write a text table")
    s.add_argument("-o", "--output")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("analyze", help="routing and disagreement analysis")
    asub = s.add_subparsers(dest="analysis", required=True)
    r = asub.add_parser("routing")
    r.add_argument("--weights", help="JSONL written by 'moe --weights-out'")
    r.add_argument("--experts", help="comma-separated expert names for --weights")
    r.add_argument("--gate")
    r.add_argument("--features", help="directory of feature maps")
    r.add_argument("--subsets")
    r.add_argument("--csv")
    r.add_argument("-o", "--output")
    r.set_defaults(func=cmd_analyze_routing)
    d = asub.add_parser("disagreement")
    d.add_argument("dets_a")
    d.add_argument("dets_b")
    d.add_argument("--names", help="two comma-separated expert names")
    d.add_argument("--subsets")
    d.add_argument("--match-iou", type=float, default=0.5)
    d.add_argument("--csv")
    d.add_argument("-o", "--output")
    d.set_defaults(func=cmd_analyze_disagreement)

    s = sub.add_parser("synth", help="write a synthetic two-domain dataset")
    s.add_argument("out_dir")
    s.add_argument("--images-per-domain", type=int, default=200)
    s.add_argument("--ambiguous", type=int, default=0)
    s.add_argument("--classes", type=int, default=3)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--cross-loc-noise", type=float, default=0.1)
    s.add_argument("--cross-miss", type=float, default=0.2)
    s.add_argument("--cross-fp", type=float, default=1.0)
    s.add_argument("--cross-flip", type=float, default=0.1)
    s.add_argument("--margin", type=float, default=1.5)
    s.add_argument("--feature-noise", type=float, default=1.0)
    s.add_argument("--test-fraction", type=float, default=0.5)
    _threads_flag(s)
    s.set_defaults(func=cmd_synth)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="detmoe: %(levelname)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (FormatError, DecodeError) as exc:
        _diag(f"error: {exc}")
        return EXIT_INPUT
    except ConfigError as exc:
        _diag(f"configuration error: {exc}")
        return EXIT_CONFIG
    except DetMoeError as exc:
        _diag(f"error: {exc}")
        return EXIT_INTERNAL
    except Exception as exc:  # noqa: BLE001
        _diag(f"internal error: {type(exc).__name__}: {exc}")
        return EXIT_INTERNAL

if __name__ == "__main__":
    sys.exit(main())
