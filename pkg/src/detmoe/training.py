"""Gate training with frozen experts.

Losses are functions of per-image weight vectors.  For spatial and
classwise gates the per-image vector is the mean over cells or heads
(:meth:`GateOutput.summary`); balancing and domain losses use that vector.

All balancing losses share one convention: they are non-negative and equal
zero exactly at the balanced configuration.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from detmoe import gate as G
from detmoe.decode import AnchorConfig, RawPredictionTensor, sigmoid
from detmoe.errors import ConfigError, TrainingError
from detmoe.gate import GateOutput, GateParams

log = logging.getLogger(__name__)

EPS = 1e-12
LOSS_MODES = ("detection", "domain_ce")
BALANCING = ("none", "importance", "kl", "batch_entropy", "sample_entropy")


@dataclass
class TrainConfig:
    loss_mode: str = "detection"
    balancing: str = "sample_entropy"
    lam: float = 0.1
    learning_rate: float = 0.01
    momentum: float = 0.9
    epochs: int = 10
    batch_size: int = 16
    seed: int = 0
    lam_decay: Optional[float] = None

    def __post_init__(self):
        if self.loss_mode not in LOSS_MODES:
            raise ConfigError(f"loss_mode must be one of {LOSS_MODES}")
        if self.balancing not in BALANCING:
            raise ConfigError(f"balancing must be one of {BALANCING}")
        if self.lam < 0:
            raise ConfigError("lambda must be >= 0")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be >= 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must be in [0, 1)")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")


@dataclass
class TrainSample:
    image_id: str
    features: np.ndarray  # [C, H, W]
    raws: Optional[list[RawPredictionTensor]] = None
    ground_truth: list = field(default_factory=list)
    domain_label: Optional[int] = None


# -- balancing losses -------------------------------------------------------

def _summaries(batch_outputs) -> np.ndarray:
    if len(batch_outputs) == 0:
        raise ValueError("empty batch")
    rows = [o.summary() if isinstance(o, GateOutput) else np.asarray(o, dtype=np.float64)
            for o in batch_outputs]
    return np.stack(rows)


def importance(batch_outputs: Sequence) -> np.ndarray:
    """Per-expert sum of gate weights over the batch."""
    return _summaries(batch_outputs).sum(axis=0)


def _normalized(imp) -> np.ndarray:
    imp = np.asarray(imp, dtype=np.float64)
    total = imp.sum()
    if not total > 0.0:
        raise ValueError("importance vector sums to zero")
    return imp / total


def _xlogx(p: np.ndarray) -> np.ndarray:
    safe = np.where(p > 0, p, 1.0)
    return np.where(p > 0, p * np.log(safe), 0.0)


def importance_loss(imp) -> float:
    """Squared coefficient of variation, population variance."""
    imp = np.asarray(imp, dtype=np.float64)
    mean = imp.mean()
    if not imp.sum() > 0.0:
        raise ValueError("importance vector sums to zero")
    return float(imp.var() / mean ** 2)


def kl_uniform_loss(imp) -> float:
    p = _normalized(imp)
    n = len(p)
    safe = np.where(p > 0, p, 1.0)
    return float(np.sum(np.where(p > 0, p * np.log(safe * n), 0.0)))


def batch_entropy_loss(imp) -> float:
    """``ln n - H(p)`` of the normalised importance."""
    p = _normalized(imp)
    return float(math.log(len(p)) + _xlogx(p).sum())


def samplewise_entropy_loss(batch_outputs: Sequence) -> float:
    s = _summaries(batch_outputs)
    return float(np.mean(math.log(s.shape[1]) + _xlogx(s).sum(axis=1)))


def domain_ce_loss(batch_outputs: Sequence, domain_labels: Sequence[int]) -> float:
    s = _summaries(batch_outputs)
    labels = np.asarray(domain_labels, dtype=int)
    if len(labels) != len(s):
        raise ValueError(f"{len(labels)} labels for {len(s)} outputs")
    if np.any(labels < 0) or np.any(labels >= s.shape[1]):
        raise ValueError(f"domain label out of range [0, {s.shape[1]})")
    return float(np.mean(-np.log(s[np.arange(len(s)), labels] + EPS)))


def total_loss(task: float, balancing: float, lam: float) -> float:
    return task + lam * balancing


def _balancing_value_grad(kind: str, s: np.ndarray):
    """Value and gradient w.r.t. the ``[B, n]`` summary matrix."""
    b, n = s.shape
    if kind == "none":
        return 0.0, np.zeros_like(s)
    if kind == "sample_entropy":
        value = float(np.mean(math.log(n) + _xlogx(s).sum(axis=1)))
        return value, (np.log(np.maximum(s, EPS)) + 1.0) / b
    imp = s.sum(axis=0)
    if kind == "importance":
        mean, var = imp.mean(), imp.var()
        d_imp = 2.0 * (imp - mean) / (n * mean ** 2) - 2.0 * var / (n * mean ** 3)
        value = importance_loss(imp)
    else:
        p = _normalized(imp)
        logs = np.log(np.maximum(p, EPS))
        d_imp = (logs - np.sum(p * logs)) / imp.sum()
        value = kl_uniform_loss(imp) if kind == "kl" else batch_entropy_loss(imp)
    return value, np.broadcast_to(d_imp, s.shape).copy()


# -- detection surrogate ----------------------------------------------------

def _gt_fields(gt):
    box = gt.box
    coords = box.as_list() if hasattr(box, "as_list") else list(box)
    return int(gt.class_id), np.asarray(coords, dtype=np.float64)


def assign_targets(ground_truth: Sequence, cfg: AnchorConfig):
    """Map each ground-truth box to one (level, anchor, cy, cx) slot.

    The (level, anchor) pair with the best shape IoU against the box wins
    (ties go to the lower level, then lower anchor); the cell is the one
    containing the box centre.
    """
    img_h, img_w = cfg.image_size
    out = []
    for gt in ground_truth:
        cls, box = _gt_fields(gt)
        if not 0 <= cls < cfg.class_count:
            raise ConfigError(f"ground-truth class {cls} outside [0, {cfg.class_count})")
        if box[0] < 0 or box[1] < 0 or box[2] > img_w or box[3] > img_h:
            raise ConfigError(f"ground-truth box {box.tolist()} outside the image")
        gw, gh = box[2] - box[0], box[3] - box[1]
        best = (-1.0, 0, 0)
        for li, lv in enumerate(cfg.levels):
            for ai, (aw, ah) in enumerate(lv.anchors):
                inter = min(gw, aw) * min(gh, ah)
                union = gw * gh + aw * ah - inter
                shape_iou = inter / union if union > 0 else 0.0
                if shape_iou > best[0]:
                    best = (shape_iou, li, ai)
        _, li, ai = best
        stride = cfg.levels[li].stride
        rows, cols = cfg.grid_shape(li)
        cx = min(int((box[0] + box[2]) / 2.0 // stride), cols - 1)
        cy = min(int((box[1] + box[3]) / 2.0 // stride), rows - 1)
        out.append((li, ai, cy, cx, box, cls))
    return out


def _decode_one(t: np.ndarray, cfg: AnchorConfig, li: int, ai: int, cy: int, cx: int):
    """Decoded box of one anchor and its Jacobian w.r.t. (t_x, t_y, t_w, t_h)."""
    lv = cfg.levels[li]
    aw, ah = lv.anchors[ai]
    s = sigmoid(t[:4])
    ds = s * (1.0 - s)
    bx = (2.0 * s[0] - 0.5 + cx) * lv.stride
    by = (2.0 * s[1] - 0.5 + cy) * lv.stride
    bw = 4.0 * s[2] ** 2 * aw
    bh = 4.0 * s[3] ** 2 * ah
    dbx, dby = 2.0 * lv.stride * ds[0], 2.0 * lv.stride * ds[1]
    dbw, dbh = 8.0 * s[2] * ds[2] * aw, 8.0 * s[3] * ds[3] * ah
    raw = np.array([bx - bw / 2, by - bh / 2, bx + bw / 2, by + bh / 2])
    jac = np.array([
        [dbx, 0.0, -dbw / 2, 0.0],
        [0.0, dby, 0.0, -dbh / 2],
        [dbx, 0.0, dbw / 2, 0.0],
        [0.0, dby, 0.0, dbh / 2],
    ])
    img_h, img_w = cfg.image_size
    hi = np.array([img_w, img_h, img_w, img_h], dtype=np.float64)
    box = np.clip(raw, 0.0, hi)
    inside = ((raw > 0.0) & (raw < hi)).astype(np.float64)
    return box, jac * inside[:, None]


def _iou_grad(p: np.ndarray, g: np.ndarray):
    iw = min(p[2], g[2]) - max(p[0], g[0])
    ih = min(p[3], g[3]) - max(p[1], g[1])
    inter = max(iw, 0.0) * max(ih, 0.0)
    ap = (p[2] - p[0]) * (p[3] - p[1])
    ag = (g[2] - g[0]) * (g[3] - g[1])
    union = ap + ag - inter
    if union <= 0.0:
        return 0.0, np.zeros(4)
    value = inter / union
    if iw <= 0.0 or ih <= 0.0:
        return value, np.zeros(4)
    d_inter = np.array([-ih if p[0] > g[0] else 0.0, -iw if p[1] > g[1] else 0.0,
                        ih if p[2] < g[2] else 0.0, iw if p[3] < g[3] else 0.0])
    d_area = np.array([-(p[3] - p[1]), -(p[2] - p[0]), p[3] - p[1], p[2] - p[0]])
    grad = (union + inter) / union ** 2 * d_inter - inter / union ** 2 * d_area
    return value, grad


def _tensor_loss(levels: Sequence[np.ndarray], targets, cfg: AnchorConfig):
    """Loss of one expert tensor and its gradient w.r.t. every level."""
    n_anchor = cfg.anchor_total
    grads = [np.zeros(np.shape(lv)) for lv in levels]
    obj_targets = [np.zeros(np.shape(lv)[:3]) for lv in levels]
    for li, ai, cy, cx, _, _ in targets:
        obj_targets[li][ai, cy, cx] = 1.0
    obj = 0.0
    for lv, tgt, g in zip(levels, obj_targets, grads):
        z = np.asarray(lv[..., 4], dtype=np.float64)
        obj += float(np.sum(np.logaddexp(0.0, z) - tgt * z))
        g[..., 4] = (sigmoid(z) - tgt) / n_anchor
    obj /= n_anchor
    box_term = cls_term = 0.0
    if targets:
        m = len(targets)
        c = cfg.class_count
        for li, ai, cy, cx, gt_box, cls in targets:
            t = np.asarray(levels[li][ai, cy, cx], dtype=np.float64)
            pred, jac = _decode_one(t, cfg, li, ai, cy, cx)
            value, d_iou = _iou_grad(pred, gt_box)
            box_term += (1.0 - value) / m
            grads[li][ai, cy, cx, :4] += -(d_iou @ jac) / m
            zc = t[5:]
            onehot = np.zeros(c)
            onehot[cls] = 1.0
            cls_term += float(np.sum(np.logaddexp(0.0, zc) - onehot * zc)) / (c * m)
            grads[li][ai, cy, cx, 5:] += (sigmoid(zc) - onehot) / (c * m)
    return box_term + obj + cls_term, grads


def detection_loss(weighted_raws: Sequence[RawPredictionTensor], ground_truth: Sequence,
                   cfg: AnchorConfig) -> float:
    """Simplified YOLO-style loss averaged over expert tensors.

    Per tensor: mean ``1 - IoU`` over assigned anchors, mean objectness BCE
    over all anchors, and mean class BCE over assigned anchors.
    """
    targets = assign_targets(ground_truth, cfg)
    losses = [_tensor_loss([np.asarray(lv, dtype=np.float64) for lv in r.levels], targets, cfg)[0]
              for r in weighted_raws]
    return float(np.mean(losses))


def _detection_weight_grad(sample: TrainSample, out: GateOutput, cfg: AnchorConfig):
    """Detection loss of one sample and dL/d(gate weights) in the output's shape."""
    if sample.raws is None:
        raise ConfigError(f"{sample.image_id}: detection loss needs raw expert tensors")
    targets = assign_targets(sample.ground_truth, cfg)
    n = out.n_experts
    w = out.weights
    dw = np.zeros_like(w)
    total = 0.0
    for i, raw in enumerate(sample.raws):
        factors = G.weight_factors(out, cfg, i)
        ys = [np.asarray(lv, dtype=np.float64) for lv in raw.levels]
        weighted = [y * f for y, f in zip(ys, factors)]
        value, grads = _tensor_loss(weighted, targets, cfg)
        total += value / n
        for li, (y, g) in enumerate(zip(ys, grads)):
            prod = g * y / n
            if out.mode == "single":
                dw[i] += prod.sum()
            elif out.mode == "spatial":
                cell = prod.sum(axis=(0, 3))
                rh = G.resample_matrix(w.shape[0], cell.shape[0])
                rw = G.resample_matrix(w.shape[1], cell.shape[1])
                dw[:, :, i] += rh.T @ cell @ rw
            else:
                chan = prod.sum(axis=(0, 1, 2))
                dw[-1, i] += chan[:5].sum()
                dw[:-1, i] += chan[5:]
    return total, dw


# -- objective and gradient -------------------------------------------------

def batch_objective(params: GateParams, batch: Sequence[TrainSample], cfg: TrainConfig,
                    anchors: Optional[AnchorConfig] = None, lam: Optional[float] = None,
                    training: bool = True):
    """Evaluate the training objective on one batch.

    Returns a dict with ``total``, ``task``, ``balancing``, ``grads``,
    ``running_stats`` and the ``[B, n]`` ``summaries``.
    """
    lam = cfg.lam if lam is None else lam
    x = np.stack([np.asarray(s.features, dtype=np.float64) for s in batch])
    w, cache, stats = G.forward(params, x, training)
    b, n = len(batch), params.n_experts
    cells = int(np.prod(w.shape[1:-1])) if w.ndim > 2 else 1
    summaries = w.reshape(b, -1, n).mean(axis=1)
    d_summary = np.zeros((b, n))
    dw = np.zeros_like(w)
    if cfg.loss_mode == "domain_ce":
        labels = np.array([s.domain_label for s in batch])
        if any(s.domain_label is None for s in batch):
            raise ConfigError("domain_ce training needs a domain label on every sample")
        if np.any(labels < 0) or np.any(labels >= n):
            raise ConfigError(f"domain label out of range [0, {n})")
        picked = summaries[np.arange(b), labels]
        task = float(np.mean(-np.log(picked + EPS)))
        d_summary[np.arange(b), labels] = -1.0 / ((picked + EPS) * b)
    else:
        if anchors is None:
            raise ConfigError("detection loss needs an anchor configuration")
        task = 0.0
        for k, sample in enumerate(batch):
            out = GateOutput(params.mode, w[k], list(params.expert_ids))
            value, g = _detection_weight_grad(sample, out, anchors)
            task += value / b
            dw[k] += g / b
    bal, d_bal = _balancing_value_grad(cfg.balancing, summaries)
    d_summary = d_summary + lam * d_bal
    dw = dw + np.broadcast_to((d_summary / cells).reshape((b,) + (1,) * (w.ndim - 2) + (n,)), w.shape)
    grads = G.backward(params, cache, dw)
    return {
        "total": total_loss(task, bal, lam),
        "task": task,
        "balancing": bal,
        "grads": grads,
        "running_stats": stats,
        "summaries": summaries,
    }


def gate_gradient(params: GateParams, batch: Sequence[TrainSample], cfg: TrainConfig,
                  anchors: Optional[AnchorConfig] = None) -> dict[str, np.ndarray]:
    """Analytic gradient of the total loss w.r.t. every trainable tensor."""
    return batch_objective(params, batch, cfg, anchors)["grads"]


def train_gate(params: GateParams, dataset: Sequence[TrainSample], cfg: TrainConfig,
               anchors: Optional[AnchorConfig] = None,
               on_epoch: Optional[Callable[[dict], None]] = None):
    """SGD with momentum over seeded shuffles; expert tensors stay untouched.

    Returns ``(trained_params, metrics)`` with one metrics dict per epoch.
    """
    if not dataset:
        raise ConfigError("empty training set")
    params = params.copy()
    rng = np.random.default_rng(cfg.seed)
    names = params.trainable_names()
    velocity = {k: np.zeros_like(params.tensors[k]) for k in names}
    metrics = []
    n = params.n_experts
    for epoch in range(cfg.epochs):
        lam = cfg.lam * (cfg.lam_decay ** epoch if cfg.lam_decay is not None else 1.0)
        order = rng.permutation(len(dataset))
        task_sum = bal_sum = 0.0
        imp = np.zeros(n)
        correct = labelled = 0
        n_batches = 0
        for k, start in enumerate(range(0, len(order), cfg.batch_size)):
            batch = [dataset[i] for i in order[start:start + cfg.batch_size]]
            res = batch_objective(params, batch, cfg, anchors, lam)
            if not math.isfinite(res["total"]):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {k}")
            for name in names:
                velocity[name] = cfg.momentum * velocity[name] + res["grads"][name]
                params.tensors[name] = params.tensors[name] - cfg.learning_rate * velocity[name]
            params.tensors.update(res["running_stats"])
            task_sum += res["task"]
            bal_sum += res["balancing"]
            imp += res["summaries"].sum(axis=0)
            for s, row in zip(batch, res["summaries"]):
                if s.domain_label is not None:
                    labelled += 1
                    correct += int(np.argmax(row) == s.domain_label)
            n_batches += 1
        row = {
            "epoch": epoch,
            "task_loss": task_sum / n_batches,
            "balancing_loss": bal_sum / n_batches,
            "lambda": lam,
            "importance": imp.tolist(),
            "routing_accuracy": correct / labelled if labelled else None,
        }
        log.debug("epoch %d: %s", epoch, row)
        metrics.append(row)
        if on_epoch is not None:
            on_epoch(row)
    return params, metrics


def routing_accuracy(params: GateParams, dataset: Sequence[TrainSample]) -> float:
    """Fraction of labelled samples whose largest gate weight is their domain."""
    labelled = [s for s in dataset if s.domain_label is not None]
    if not labelled:
        raise ValueError("no labelled samples")
    x = np.stack([np.asarray(s.features, dtype=np.float64) for s in labelled])
    w, _, _ = G.forward(params, x, training=False)
    summ = w.reshape(len(labelled), -1, params.n_experts).mean(axis=1)
    return float(np.mean(np.argmax(summ, axis=1) == [s.domain_label for s in labelled]))
