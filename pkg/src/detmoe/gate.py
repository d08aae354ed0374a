"""Gating network mapping concatenated expert features to expert weights.

Four architectures are supported::

    fc1        pool -> FC(n) -> softmax
    fc2        pool -> FC(hidden) -> ReLU -> FC(n) -> softmax
    conv_fc2   Conv1x1 -> ReLU -> pool -> FC(hidden) -> ReLU -> FC(n) -> softmax
    conv2_fc2  Conv1x1 -> BN -> ReLU -> Conv3x3 -> BN -> ReLU -> pool -> FC(hidden)
               -> ReLU -> FC(n) -> softmax

``single`` mode produces one weight vector per image, ``spatial`` mode skips
the pool and applies the head at every feature cell, and ``classwise`` mode
runs ``class_count + 1`` heads on a shared trunk (one per class plus a
shared head for box coordinates and objectness, stored last).

Forward and backward passes are written out by hand on numpy arrays with a
leading batch axis; :func:`forward` returns a cache consumed by
:func:`backward`.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from detmoe.decode import AnchorConfig, RawPredictionTensor
from detmoe.errors import ConfigError

ARCHITECTURES = ("fc1", "fc2", "conv_fc2", "conv2_fc2")
MODES = ("single", "spatial", "classwise")
BN_EPS = 1e-5
BN_MOMENTUM = 0.1


@dataclass
class FeatureMap:
    image_id: str
    data: np.ndarray  # [C, H, W]
    expert_ids: list[str]
    provenance: str = "backbone-last"

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise ConfigError(f"feature map must be [C, H, W], got shape {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ConfigError(f"feature map {self.image_id} has non-finite entries")
        if not self.expert_ids or self.data.shape[0] % len(self.expert_ids):
            raise ConfigError(
                f"{self.data.shape[0]} channels cannot be split evenly over "
                f"{len(self.expert_ids)} experts")


@dataclass
class GateParams:
    architecture: str
    mode: str
    expert_ids: list[str]
    in_channels: int
    hidden: int = 512
    conv_channels: int = 64
    class_count: Optional[int] = None
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ConfigError(f"unknown gate architecture {self.architecture!r}")
        if self.mode not in MODES:
            raise ConfigError(f"unknown gate mode {self.mode!r}")
        if len(self.expert_ids) < 2:
            raise ConfigError("a gate needs at least two experts")
        if self.mode == "classwise" and not self.class_count:
            raise ConfigError("classwise gate requires class_count")

    @property
    def n_experts(self) -> int:
        return len(self.expert_ids)

    @property
    def n_heads(self) -> int:
        return self.class_count + 1 if self.mode == "classwise" else 1

    @property
    def trunk_channels(self) -> int:
        return self.in_channels if self.architecture in ("fc1", "fc2") else self.conv_channels

    def shapes(self) -> dict[str, tuple[int, ...]]:
        """Expected shape of every tensor, running statistics included."""
        n, d, k, hd = self.n_experts, self.trunk_channels, self.conv_channels, self.hidden
        out: dict[str, tuple[int, ...]] = {}
        if self.architecture in ("conv_fc2", "conv2_fc2"):
            out["conv1.weight"] = (k, self.in_channels)
            out["conv1.bias"] = (k,)
        if self.architecture == "conv2_fc2":
            for bn in ("bn1", "bn2"):
                for name in ("weight", "bias", "running_mean", "running_var"):
                    out[f"{bn}.{name}"] = (k,)
            out["conv2.weight"] = (k, k, 3, 3)
            out["conv2.bias"] = (k,)
        for h in range(self.n_heads):
            if self.architecture == "fc1":
                out[f"head{h}.out.weight"] = (n, d)
                out[f"head{h}.out.bias"] = (n,)
            else:
                out[f"head{h}.hidden.weight"] = (hd, d)
                out[f"head{h}.hidden.bias"] = (hd,)
                out[f"head{h}.out.weight"] = (n, hd)
                out[f"head{h}.out.bias"] = (n,)
        return out

    def trainable_names(self) -> list[str]:
        return [k for k in self.shapes() if "running_" not in k]

    def validate(self) -> None:
        shapes = self.shapes()
        missing = set(shapes) - set(self.tensors)
        extra = set(self.tensors) - set(shapes)
        if missing or extra:
            raise ConfigError(f"gate tensors mismatch: missing {sorted(missing)}, "
                              f"unexpected {sorted(extra)}")
        for k, shp in shapes.items():
            if tuple(self.tensors[k].shape) != shp:
                raise ConfigError(f"{k}: shape {self.tensors[k].shape}, expected {shp}")

    def copy(self) -> "GateParams":
        return copy.deepcopy(self)


@dataclass
class GateOutput:
    """Expert weights for one image.

    ``weights`` is ``[n]`` (single), ``[H, W, n]`` (spatial) or
    ``[C + 1, n]`` (classwise, shared row last).
    """
    mode: str
    weights: np.ndarray
    expert_ids: Optional[list[str]] = None

    @property
    def n_experts(self) -> int:
        return self.weights.shape[-1]

    def summary(self) -> np.ndarray:
        """One weight vector per image: mean over cells or heads."""
        return self.weights.reshape(-1, self.n_experts).mean(axis=0)


def init_gate(architecture: str, expert_ids: Sequence[str], in_channels: int,
              mode: str = "single", class_count: Optional[int] = None, hidden: int = 512,
              conv_channels: int = 64, seed: int = 0, zero: bool = False) -> GateParams:
    """Uniform fan-in initialisation (``U(-1/sqrt(fan_in), 1/sqrt(fan_in))``)."""
    p = GateParams(architecture, mode, list(expert_ids), in_channels, hidden,
                   conv_channels, class_count)
    rng = np.random.default_rng(seed)
    for name, shp in p.shapes().items():
        if name.endswith("running_var") or (name.startswith("bn") and name.endswith(".weight")):
            p.tensors[name] = np.ones(shp)
        elif name.startswith("bn") or zero:
            p.tensors[name] = np.zeros(shp)
        else:
            wshape = p.shapes()[name.replace(".bias", ".weight")]
            bound = 1.0 / np.sqrt(int(np.prod(wshape[1:])))
            p.tensors[name] = rng.uniform(-bound, bound, size=shp)
    return p


def softmax(logits, axis: int = -1) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


# -- layers -----------------------------------------------------------------

def _relu(x):
    return np.maximum(x, 0.0)


def _im2col3(a: np.ndarray) -> np.ndarray:
    """[B, K, H, W] -> [B, K, 3, 3, H, W] patches for a 3x3, pad-1 convolution."""
    b, k, h, w = a.shape
    ap = np.pad(a, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = np.empty((b, k, 3, 3, h, w))
    for i in range(3):
        for j in range(3):
            cols[:, :, i, j] = ap[:, :, i:i + h, j:j + w]
    return cols


def _col2im3(dcols: np.ndarray) -> np.ndarray:
    b, k, _, _, h, w = dcols.shape
    dap = np.zeros((b, k, h + 2, w + 2))
    for i in range(3):
        for j in range(3):
            dap[:, :, i:i + h, j:j + w] += dcols[:, :, i, j]
    return dap[:, :, 1:-1, 1:-1]


def _bn_forward(x, t, prefix, training):
    gamma = t[f"{prefix}.weight"][None, :, None, None]
    beta = t[f"{prefix}.bias"][None, :, None, None]
    if training:
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        count = x.shape[0] * x.shape[2] * x.shape[3]
        unbiased = var * count / (count - 1) if count > 1 else var
        new_stats = {
            f"{prefix}.running_mean": (1 - BN_MOMENTUM) * t[f"{prefix}.running_mean"] + BN_MOMENTUM * mean,
            f"{prefix}.running_var": (1 - BN_MOMENTUM) * t[f"{prefix}.running_var"] + BN_MOMENTUM * unbiased,
        }
    else:
        mean = t[f"{prefix}.running_mean"]
        var = t[f"{prefix}.running_var"]
        new_stats = {}
    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
    return gamma * xhat + beta, (xhat, inv_std, training), new_stats


def _bn_backward(dy, cache, gamma):
    xhat, inv_std, training = cache
    dgamma = (dy * xhat).sum(axis=(0, 2, 3))
    dbeta = dy.sum(axis=(0, 2, 3))
    dxhat = dy * gamma[None, :, None, None]
    if not training:
        return dxhat * inv_std[None, :, None, None], dgamma, dbeta
    m = dy.shape[0] * dy.shape[2] * dy.shape[3]
    dx = (inv_std[None, :, None, None] / m) * (
        m * dxhat
        - dxhat.sum(axis=(0, 2, 3), keepdims=True)
        - xhat * (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True))
    return dx, dgamma, dbeta


def _head_forward(t, arch, h, inp):
    if arch == "fc1":
        return inp @ t[f"head{h}.out.weight"].T + t[f"head{h}.out.bias"], None
    pre = inp @ t[f"head{h}.hidden.weight"].T + t[f"head{h}.hidden.bias"]
    act = _relu(pre)
    return act @ t[f"head{h}.out.weight"].T + t[f"head{h}.out.bias"], (pre, act)


def _head_backward(t, arch, h, inp, hcache, dlogits, grads):
    if arch == "fc1":
        grads[f"head{h}.out.weight"] = dlogits.T @ inp
        grads[f"head{h}.out.bias"] = dlogits.sum(axis=0)
        return dlogits @ t[f"head{h}.out.weight"]
    pre, act = hcache
    grads[f"head{h}.out.weight"] = dlogits.T @ act
    grads[f"head{h}.out.bias"] = dlogits.sum(axis=0)
    dpre = (dlogits @ t[f"head{h}.out.weight"]) * (pre > 0)
    grads[f"head{h}.hidden.weight"] = dpre.T @ inp
    grads[f"head{h}.hidden.bias"] = dpre.sum(axis=0)
    return dpre @ t[f"head{h}.hidden.weight"]


# -- network ----------------------------------------------------------------

def forward(params: GateParams, x: np.ndarray, training: bool = False):
    """Batched forward pass.

    Args:
        x: features ``[B, C, H, W]``.

    Returns:
        ``(weights, cache, running_stats)`` where ``weights`` is ``[B, n]``,
        ``[B, H, W, n]`` or ``[B, C + 1, n]`` depending on the mode and
        ``running_stats`` holds updated batch-norm statistics (training only;
        ``params`` is never modified).
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4 or x.shape[1] != params.in_channels:
        raise ConfigError(f"gate expects [B, {params.in_channels}, H, W] features, "
                          f"got shape {x.shape}")
    t, arch = params.tensors, params.architecture
    cache: dict = {"x": x}
    stats: dict = {}
    if arch in ("fc1", "fc2"):
        z = x
    else:
        u1 = np.einsum("kc,bchw->bkhw", t["conv1.weight"], x) + t["conv1.bias"][None, :, None, None]
        cache["u1"] = u1
        if arch == "conv_fc2":
            z = _relu(u1)
        else:
            v1, cache["bn1"], s1 = _bn_forward(u1, t, "bn1", training)
            a1 = _relu(v1)
            cols = _im2col3(a1)
            u2 = np.einsum("okij,bkijhw->bohw", t["conv2.weight"], cols) + t["conv2.bias"][None, :, None, None]
            v2, cache["bn2"], s2 = _bn_forward(u2, t, "bn2", training)
            z = _relu(v2)
            cache.update(v1=v1, cols=cols, v2=v2)
            stats.update(s1)
            stats.update(s2)
    b, d, gh, gw = z.shape
    if params.mode == "spatial":
        inp = z.transpose(0, 2, 3, 1).reshape(b * gh * gw, d)
    else:
        inp = z.mean(axis=(2, 3))
    cache.update(z_shape=z.shape, inp=inp, heads=[])
    logits = []
    for h in range(params.n_heads):
        lg, hc = _head_forward(t, arch, h, inp)
        cache["heads"].append(hc)
        logits.append(lg)
    if params.mode == "spatial":
        w = softmax(logits[0]).reshape(b, gh, gw, -1)
    elif params.mode == "classwise":
        w = softmax(np.stack(logits, axis=1))
    else:
        w = softmax(logits[0])
    cache["w"] = w
    return w, cache, stats


def backward(params: GateParams, cache: dict, dweights: np.ndarray) -> dict[str, np.ndarray]:
    """Gradient of a scalar loss w.r.t. every trainable tensor given dL/dweights."""
    t, arch = params.tensors, params.architecture
    w = cache["w"]
    dlogits = w * (dweights - (w * dweights).sum(axis=-1, keepdims=True))
    b, d, gh, gw = cache["z_shape"]
    inp = cache["inp"]
    grads: dict[str, np.ndarray] = {}
    if params.mode == "spatial":
        dinp = _head_backward(t, arch, 0, inp, cache["heads"][0],
                              dlogits.reshape(b * gh * gw, -1), grads)
        dz = dinp.reshape(b, gh, gw, d).transpose(0, 3, 1, 2)
    else:
        dinp = np.zeros_like(inp)
        for h in range(params.n_heads):
            dl = dlogits[:, h] if params.mode == "classwise" else dlogits
            dinp += _head_backward(t, arch, h, inp, cache["heads"][h], dl, grads)
        dz = np.broadcast_to(dinp[:, :, None, None] / (gh * gw), (b, d, gh, gw))
    if arch in ("fc1", "fc2"):
        return grads
    x, u1 = cache["x"], cache["u1"]
    if arch == "conv_fc2":
        du1 = dz * (u1 > 0)
    else:
        du2, grads["bn2.weight"], grads["bn2.bias"] = _bn_backward(
            dz * (cache["v2"] > 0), cache["bn2"], t["bn2.weight"])
        cols = cache["cols"]
        grads["conv2.weight"] = np.einsum("bohw,bkijhw->okij", du2, cols)
        grads["conv2.bias"] = du2.sum(axis=(0, 2, 3))
        da1 = _col2im3(np.einsum("okij,bohw->bkijhw", t["conv2.weight"], du2))
        du1, grads["bn1.weight"], grads["bn1.bias"] = _bn_backward(
            da1 * (cache["v1"] > 0), cache["bn1"], t["bn1.weight"])
    grads["conv1.weight"] = np.einsum("bkhw,bchw->kc", du1, x)
    grads["conv1.bias"] = du1.sum(axis=(0, 2, 3))
    return grads


def _stack_features(params: GateParams, features: Sequence[FeatureMap]) -> np.ndarray:
    for f in features:
        if list(f.expert_ids) != list(params.expert_ids):
            raise ConfigError(f"{f.image_id}: feature experts {f.expert_ids} do not match "
                              f"gate expert order {params.expert_ids}")
    shapes = {f.data.shape for f in features}
    if len(shapes) != 1:
        raise ConfigError(f"feature maps in one batch differ in shape: {sorted(shapes)}")
    return np.stack([f.data for f in features]).astype(np.float64)


def gate_forward(params: GateParams, features: Union[FeatureMap, Sequence[FeatureMap]],
                 training: bool = False):
    """Expert weights for one feature map, or a list of outputs for a batch."""
    single = isinstance(features, FeatureMap)
    batch = [features] if single else list(features)
    w, _, _ = forward(params, _stack_features(params, batch), training)
    outs = [GateOutput(params.mode, w[i], list(params.expert_ids)) for i in range(len(batch))]
    return outs[0] if single else outs


# -- applying weights -------------------------------------------------------

def resample_matrix(src: int, dst: int) -> np.ndarray:
    """[dst, src] bilinear weights, align-corners false, clamped at the edges."""
    pos = (np.arange(dst) + 0.5) * (src / dst) - 0.5
    pos = np.clip(pos, 0.0, src - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, src - 1)
    frac = pos - lo
    m = np.zeros((dst, src))
    m[np.arange(dst), lo] += 1.0 - frac
    m[np.arange(dst), hi] += frac
    return m


def bilinear_resample(grid: np.ndarray, target: tuple[int, int]) -> np.ndarray:
    """Resample an ``[H_g, W_g, n]`` grid to ``[H, W, n]``."""
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 3 or grid.shape[0] < 1 or grid.shape[1] < 1:
        raise ConfigError(f"grid must be [H, W, n] with H, W >= 1, got {grid.shape}")
    rh = resample_matrix(grid.shape[0], target[0])
    rw = resample_matrix(grid.shape[1], target[1])
    return np.einsum("ih,hwn,jw->ijn", rh, grid, rw)


def weight_factors(out: GateOutput, cfg: AnchorConfig, expert: int) -> list:
    """Per-level multipliers broadcastable to ``[A, H, W, 5 + C]`` for one expert."""
    w = np.asarray(out.weights, dtype=np.float64)
    factors = []
    for i in range(len(cfg.levels)):
        if out.mode == "single":
            factors.append(w[expert])
        elif out.mode == "spatial":
            grid = bilinear_resample(w[:, :, expert:expert + 1], cfg.grid_shape(i))
            factors.append(grid[None, :, :, :])
        else:
            if w.shape[0] != cfg.class_count + 1:
                raise ConfigError(f"classwise gate has {w.shape[0] - 1} class heads, "
                                  f"anchor config has {cfg.class_count} classes")
            vec = np.concatenate([np.full(5, w[-1, expert]), w[:-1, expert]])
            factors.append(vec[None, None, None, :])
    return factors


def apply_expert_weights(raws: Sequence[RawPredictionTensor], out: GateOutput,
                         cfg: AnchorConfig) -> list[RawPredictionTensor]:
    """Scale every expert's raw logits by its gate weight (``y~_i = w_i * y_i``)."""
    if len(raws) != out.n_experts:
        raise ConfigError(f"{len(raws)} expert tensors for a gate over {out.n_experts} experts")
    if out.expert_ids is not None:
        got = [r.expert_id for r in raws]
        if got != list(out.expert_ids):
            raise ConfigError(f"expert order {got} does not match gate order {out.expert_ids}")
    return [raw.scaled(weight_factors(out, cfg, i)) for i, raw in enumerate(raws)]


def fixed_weight_output(weights: Sequence[float], n: int,
                        expert_ids: Optional[Sequence[str]] = None) -> GateOutput:
    """Constant single-mode output, independent of the input image."""
    if len(weights) != n:
        raise ConfigError(f"{len(weights)} fixed weights for {n} experts")
    return GateOutput("single", np.asarray(weights, dtype=np.float64),
                      list(expert_ids) if expert_ids is not None else None)
