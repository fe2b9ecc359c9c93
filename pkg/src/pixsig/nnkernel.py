"""Minimal trainable neural-network kernel on plain numpy.

Supports dense layers, 2D convolution (valid or same padding), max
pooling, ReLU, flatten and residual blocks, with a softmax head,
cross-entropy loss and Adam. Arrays are NHWC float32; a float64 mode
exists for finite-difference gradient checking. There is no autodiff
graph: every layer implements a forward/backward pair by hand, which
keeps the kernel small, deterministic and fast enough to mass-produce
desk-scale classifiers.

``forward`` is a pure function of (params, batch) and safe to call from
many threads on shared read-only params. ``train`` is single-threaded
per model; parallelism belongs one level up, across models.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import tensorio
from .errors import ConfigError, NumericError

LAYER_KINDS = ("conv", "dense", "relu", "maxpool", "flatten", "resblock")


# ---------------------------------------------------------------------------
# Architecture description
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ArchSpec:
    """Ordered layer descriptors plus input/output contract.

    Each layer is a plain dict with a ``kind`` key:

    - ``{"kind": "conv", "out_channels": 8, "kernel": 5, "stride": 1,
       "padding": "valid"}`` (stride/padding optional)
    - ``{"kind": "dense", "units": 64}``
    - ``{"kind": "relu"}``, ``{"kind": "flatten"}``
    - ``{"kind": "maxpool", "k": 2}``
    - ``{"kind": "resblock", "channels": 16}`` (two 3x3 same-padding convs
      with a skip connection; 1x1 projection when channels change)

    The chain must end in a vector of length ``num_classes``; ``forward``
    applies the softmax head.
    """

    layers: tuple
    input_shape: tuple  # (H, W, C)
    num_classes: int
    name: str = "custom"

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(dict(l) for l in self.layers))
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        self.shape_chain()  # validates

    def shape_chain(self):
        """Per-layer output shapes; raises ConfigError on any mismatch."""
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ConfigError(f"input_shape must be (H, W, C) >= 1, got {self.input_shape}")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        shape = self.input_shape
        chain = []
        for idx, layer in enumerate(self.layers):
            kind = layer.get("kind")
            where = f"layer {idx} ({kind})"
            if kind == "conv":
                if len(shape) != 3:
                    raise ConfigError(f"{where}: expects (H, W, C) input, got {shape}")
                h, w, c = shape
                k = int(layer["kernel"])
                s = int(layer.get("stride", 1))
                pad = layer.get("padding", "valid")
                if pad == "same":
                    if k % 2 == 0:
                        raise ConfigError(f"{where}: same padding needs odd kernel")
                    p = (k - 1) // 2
                elif pad == "valid":
                    p = 0
                else:
                    raise ConfigError(f"{where}: unknown padding {pad!r}")
                if h + 2 * p < k or w + 2 * p < k:
                    raise ConfigError(f"{where}: kernel {k} larger than input {shape}")
                shape = ((h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1,
                         int(layer["out_channels"]))
            elif kind == "maxpool":
                if len(shape) != 3:
                    raise ConfigError(f"{where}: expects (H, W, C) input, got {shape}")
                k = int(layer["k"])
                if shape[0] % k or shape[1] % k:
                    raise ConfigError(f"{where}: input {shape[:2]} not divisible by {k}")
                shape = (shape[0] // k, shape[1] // k, shape[2])
            elif kind == "resblock":
                if len(shape) != 3:
                    raise ConfigError(f"{where}: expects (H, W, C) input, got {shape}")
                shape = (shape[0], shape[1], int(layer["channels"]))
            elif kind == "flatten":
                shape = (int(np.prod(shape)),)
            elif kind == "dense":
                if len(shape) != 1:
                    raise ConfigError(f"{where}: expects flat input, got {shape}")
                shape = (int(layer["units"]),)
            elif kind == "relu":
                pass
            else:
                raise ConfigError(f"{where}: unknown layer kind {kind!r}")
            chain.append(shape)
        if shape != (self.num_classes,):
            raise ConfigError(
                f"architecture ends in {shape}, expected ({self.num_classes},)")
        return chain

    def param_shapes(self):
        """List (one entry per layer) of name -> array-shape dicts."""
        shapes = []
        shape = self.input_shape
        for layer, out in zip(self.layers, self.shape_chain()):
            kind = layer["kind"]
            if kind == "conv":
                k = int(layer["kernel"])
                shapes.append({"w": (k * k * shape[2], out[2]), "b": (out[2],)})
            elif kind == "dense":
                shapes.append({"w": (shape[0], out[0]), "b": (out[0],)})
            elif kind == "resblock":
                cin, f = shape[2], out[2]
                d = {"w1": (9 * cin, f), "b1": (f,), "w2": (9 * f, f), "b2": (f,)}
                if cin != f:
                    d["wp"] = (cin, f)
                    d["bp"] = (f,)
                shapes.append(d)
            else:
                shapes.append({})
            shape = out
        return shapes

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "layers": [dict(l) for l in self.layers],
        }

    @staticmethod
    def from_json(obj: dict) -> "ArchSpec":
        return ArchSpec(
            layers=tuple(obj["layers"]),
            input_shape=tuple(obj["input_shape"]),
            num_classes=int(obj["num_classes"]),
            name=obj.get("name", "custom"),
        )


def preset(name: str, input_shape=(28, 28, 1), num_classes: int = 10) -> ArchSpec:
    """Fixed small architecture families used throughout the model zoos.

    ``mini-lenet``: 2 conv + 2 dense. ``mini-resnet``: strided conv, two
    residual blocks, dense. ``mini-vgg``: two stacks of 2 conv + 2 dense.
    ``mlp``: flatten + 2 dense. All sized for 28x28-family inputs.
    """
    k = num_classes
    if name == "mini-lenet":
        layers = (
            {"kind": "conv", "out_channels": 8, "kernel": 5, "padding": "same"},
            {"kind": "relu"},
            {"kind": "maxpool", "k": 2},
            {"kind": "conv", "out_channels": 16, "kernel": 5, "padding": "same"},
            {"kind": "relu"},
            {"kind": "maxpool", "k": 2},
            {"kind": "flatten"},
            {"kind": "dense", "units": 64},
            {"kind": "relu"},
            {"kind": "dense", "units": k},
        )
    elif name == "mini-resnet":
        layers = (
            {"kind": "conv", "out_channels": 8, "kernel": 3, "stride": 2, "padding": "same"},
            {"kind": "relu"},
            {"kind": "resblock", "channels": 8},
            {"kind": "resblock", "channels": 16},
            {"kind": "flatten"},
            {"kind": "dense", "units": k},
        )
    elif name == "mini-vgg":
        layers = (
            {"kind": "conv", "out_channels": 8, "kernel": 3, "padding": "same"},
            {"kind": "relu"},
            {"kind": "conv", "out_channels": 8, "kernel": 3, "padding": "same"},
            {"kind": "relu"},
            {"kind": "maxpool", "k": 2},
            {"kind": "conv", "out_channels": 16, "kernel": 3, "padding": "same"},
            {"kind": "relu"},
            {"kind": "conv", "out_channels": 16, "kernel": 3, "padding": "same"},
            {"kind": "relu"},
            {"kind": "maxpool", "k": 2},
            {"kind": "flatten"},
            {"kind": "dense", "units": 32},
            {"kind": "relu"},
            {"kind": "dense", "units": k},
        )
    elif name == "mlp":
        layers = (
            {"kind": "flatten"},
            {"kind": "dense", "units": 64},
            {"kind": "relu"},
            {"kind": "dense", "units": k},
        )
    else:
        raise ConfigError(f"unknown preset {name!r}")
    return ArchSpec(layers=layers, input_shape=input_shape, num_classes=k, name=name)


PRESET_NAMES = ("mini-lenet", "mini-resnet", "mini-vgg", "mlp")


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------

@dataclass
class ModelParams:
    arch: ArchSpec
    weights: list  # per layer: dict name -> ndarray ({} for stateless layers)
    rng_seed: int

    @property
    def dtype(self):
        for layer in self.weights:
            for arr in layer.values():
                return arr.dtype
        return np.dtype(np.float32)

    def num_params(self) -> int:
        return int(sum(a.size for layer in self.weights for a in layer.values()))

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(
            arch=self.arch,
            weights=[{k: v.astype(dtype) for k, v in layer.items()}
                     for layer in self.weights],
            rng_seed=self.rng_seed,
        )

    def copy(self) -> "ModelParams":
        return ModelParams(
            arch=self.arch,
            weights=[{k: v.copy() for k, v in layer.items()} for layer in self.weights],
            rng_seed=self.rng_seed,
        )


def init_params(arch: ArchSpec, seed: int, dtype=np.float32) -> ModelParams:
    """Uniform fan-in initialization, deterministic in ``seed``.

    Weights ~ U(-a, a) with a = sqrt(1/fan_in); biases start at zero.
    """
    rng = np.random.default_rng(seed)
    weights = []
    for shapes in arch.param_shapes():
        layer = {}
        for name in sorted(shapes):
            shape = shapes[name]
            if name.startswith("w"):
                fan_in = shape[0]
                a = np.sqrt(1.0 / fan_in)
                layer[name] = rng.uniform(-a, a, size=shape).astype(dtype)
            else:
                layer[name] = np.zeros(shape, dtype=dtype)
        weights.append(layer)
    return ModelParams(arch=arch, weights=weights, rng_seed=int(seed))


# ---------------------------------------------------------------------------
# Layer math
# ---------------------------------------------------------------------------

def _im2col(x, k, stride):
    """(B,H,W,C) -> (B,Ho,Wo,k*k*C) patch matrix (copies)."""
    b, h, w, c = x.shape
    ho = (h - k) // stride + 1
    wo = (w - k) // stride + 1
    s0, s1, s2, s3 = x.strides
    view = np.lib.stride_tricks.as_strided(
        x, (b, ho, wo, k, k, c), (s0, s1 * stride, s2 * stride, s1, s2, s3))
    return view.reshape(b, ho, wo, k * k * c)


def _col2im(dcols, x_shape, k, stride):
    """Scatter-add the im2col gradient back onto the input."""
    b, h, w, c = x_shape
    ho = (h - k) // stride + 1
    wo = (w - k) // stride + 1
    dcols = dcols.reshape(b, ho, wo, k, k, c)
    dx = np.zeros(x_shape, dtype=dcols.dtype)
    for di in range(k):
        for dj in range(k):
            dx[:, di:di + stride * ho:stride, dj:dj + stride * wo:stride, :] += \
                dcols[:, :, :, di, dj, :]
    return dx


def _conv_forward(x, w, b, k, stride, pad):
    if pad:
        x = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    cols = _im2col(x, k, stride)
    y = cols @ w + b
    return y, (cols, x.shape)


def _conv_backward(dy, w, cache, k, stride, pad):
    cols, xp_shape = cache
    bsz, ho, wo, cout = dy.shape
    dyf = dy.reshape(-1, cout)
    dw = cols.reshape(-1, cols.shape[-1]).T @ dyf
    db = dyf.sum(axis=0)
    dcols = dyf @ w.T
    dx = _col2im(dcols.reshape(bsz, ho, wo, -1), xp_shape, k, stride)
    if pad:
        dx = dx[:, pad:-pad, pad:-pad, :]
    return dx, dw, db


def _maxpool_forward(x, k):
    b, h, w, c = x.shape
    ho, wo = h // k, w // k
    xw = x.reshape(b, ho, k, wo, k, c).transpose(0, 1, 3, 2, 4, 5).reshape(b, ho, wo, k * k, c)
    idx = xw.argmax(axis=3)
    y = np.take_along_axis(xw, idx[:, :, :, None, :], axis=3)[:, :, :, 0, :]
    return y, (idx, x.shape)


def _maxpool_backward(dy, cache, k):
    idx, x_shape = cache
    b, h, w, c = x_shape
    ho, wo = h // k, w // k
    dxw = np.zeros((b, ho, wo, k * k, c), dtype=dy.dtype)
    np.put_along_axis(dxw, idx[:, :, :, None, :], dy[:, :, :, None, :], axis=3)
    return dxw.reshape(b, ho, wo, k, k, c).transpose(0, 1, 3, 2, 4, 5).reshape(x_shape)


def softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# Forward / backward over a whole network
# ---------------------------------------------------------------------------

def _run_layers(params: ModelParams, x, keep_cache: bool):
    caches = []
    for layer, wts in zip(params.arch.layers, params.weights):
        kind = layer["kind"]
        if kind == "conv":
            k = int(layer["kernel"])
            s = int(layer.get("stride", 1))
            pad = (k - 1) // 2 if layer.get("padding", "valid") == "same" else 0
            x, cache = _conv_forward(x, wts["w"], wts["b"], k, s, pad)
            caches.append(cache if keep_cache else None)
        elif kind == "dense":
            caches.append(x if keep_cache else None)
            x = x @ wts["w"] + wts["b"]
        elif kind == "relu":
            caches.append(x if keep_cache else None)
            x = np.maximum(x, 0)
        elif kind == "maxpool":
            x, cache = _maxpool_forward(x, int(layer["k"]))
            caches.append(cache if keep_cache else None)
        elif kind == "flatten":
            caches.append(x.shape if keep_cache else None)
            x = x.reshape(x.shape[0], -1)
        elif kind == "resblock":
            x, cache = _resblock_forward(x, wts)
            caches.append(cache if keep_cache else None)
    return x, caches


def _resblock_forward(x, wts):
    a1, c1 = _conv_forward(x, wts["w1"], wts["b1"], 3, 1, 1)
    h1 = np.maximum(a1, 0)
    a2, c2 = _conv_forward(h1, wts["w2"], wts["b2"], 3, 1, 1)
    if "wp" in wts:
        skip = x @ wts["wp"] + wts["bp"]  # 1x1 projection as channel matmul
    else:
        skip = x
    pre = a2 + skip
    y = np.maximum(pre, 0)
    return y, (x, a1, c1, h1, c2, pre)


def _resblock_backward(dy, wts, cache):
    x, a1, c1, h1, c2, pre = cache
    d_pre = dy * (pre > 0)
    grads = {}
    dh1, grads["w2"], grads["b2"] = _conv_backward(d_pre, wts["w2"], c2, 3, 1, 1)
    da1 = dh1 * (a1 > 0)
    dx, grads["w1"], grads["b1"] = _conv_backward(da1, wts["w1"], c1, 3, 1, 1)
    if "wp" in wts:
        grads["wp"] = np.tensordot(x, d_pre, axes=([0, 1, 2], [0, 1, 2]))
        grads["bp"] = d_pre.sum(axis=(0, 1, 2))
        dx += d_pre @ wts["wp"].T
    else:
        dx += d_pre
    return dx, grads


def _check_batch(params: ModelParams, batch):
    batch = np.asarray(batch)
    if batch.ndim != 4 or batch.shape[1:] != params.arch.input_shape:
        raise ConfigError(
            f"batch shape {batch.shape} does not match architecture input "
            f"(B, {', '.join(map(str, params.arch.input_shape))})")
    return batch


def forward(params: ModelParams, batch) -> np.ndarray:
    """Class probabilities, one row per image; rows sum to 1.

    Pure function; raises ConfigError on shape mismatch and NumericError
    (naming the layer) if an activation goes non-finite. The finiteness
    check runs on the logits only; on failure a layer-by-layer re-run
    locates the first offender. NaN and +Inf propagate through every
    layer kind here, so the fast path catches them wherever they start.
    """
    x = _check_batch(params, batch)
    logits, _ = _run_layers(params, x, keep_cache=False)
    if not np.isfinite(logits).all():
        y = x
        for idx, (layer, wts) in enumerate(zip(params.arch.layers, params.weights)):
            y = _apply_single(layer, wts, y)
            if not np.isfinite(y).all():
                raise NumericError(
                    f"non-finite activation after layer {idx} ({layer['kind']})")
        raise NumericError("non-finite logits")
    return softmax(logits)


def _apply_single(layer, wts, x):
    kind = layer["kind"]
    if kind == "conv":
        k = int(layer["kernel"])
        s = int(layer.get("stride", 1))
        pad = (k - 1) // 2 if layer.get("padding", "valid") == "same" else 0
        return _conv_forward(x, wts["w"], wts["b"], k, s, pad)[0]
    if kind == "dense":
        return x @ wts["w"] + wts["b"]
    if kind == "relu":
        return np.maximum(x, 0)
    if kind == "maxpool":
        return _maxpool_forward(x, int(layer["k"]))[0]
    if kind == "flatten":
        return x.reshape(x.shape[0], -1)
    if kind == "resblock":
        return _resblock_forward(x, wts)[0]
    raise ConfigError(f"unknown layer kind {kind!r}")


def loss_and_grads(params: ModelParams, batch, labels):
    """Mean cross-entropy and per-parameter gradients for one batch."""
    x = _check_batch(params, batch)
    labels = np.asarray(labels)
    logits, caches = _run_layers(params, x, keep_cache=True)
    probs = softmax(logits)
    n = x.shape[0]
    eps = np.finfo(probs.dtype).tiny
    loss = float(-np.log(np.maximum(probs[np.arange(n), labels], eps)).mean())

    dz = probs.copy()
    dz[np.arange(n), labels] -= 1
    dz /= n

    grads = [dict() for _ in params.weights]
    dy = dz
    for idx in range(len(params.arch.layers) - 1, -1, -1):
        layer = params.arch.layers[idx]
        wts = params.weights[idx]
        cache = caches[idx]
        kind = layer["kind"]
        if kind == "dense":
            xin = cache
            grads[idx]["w"] = xin.T @ dy
            grads[idx]["b"] = dy.sum(axis=0)
            dy = dy @ wts["w"].T
        elif kind == "relu":
            dy = dy * (cache > 0)
        elif kind == "flatten":
            dy = dy.reshape(cache)
        elif kind == "conv":
            k = int(layer["kernel"])
            s = int(layer.get("stride", 1))
            pad = (k - 1) // 2 if layer.get("padding", "valid") == "same" else 0
            dy, grads[idx]["w"], grads[idx]["b"] = _conv_backward(dy, wts["w"], cache, k, s, pad)
        elif kind == "maxpool":
            dy = _maxpool_backward(dy, cache, int(layer["k"]))
        elif kind == "resblock":
            dy, grads[idx] = _resblock_backward(dy, wts, cache)
    return loss, grads, probs


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 64
    epochs: int = 10
    accuracy_floor: float = 0.95
    holdout_fraction: float = 0.1
    stop_at_floor: bool = False
    # optional one-shot step decay: lr *= lr_step_factor from lr_step_epoch on
    lr_step_epoch: int | None = None
    lr_step_factor: float = 1.0

    def lr_at(self, epoch: int) -> float:
        if self.lr_step_epoch is not None and epoch >= self.lr_step_epoch:
            return self.lr * self.lr_step_factor
        return self.lr

    def to_json(self) -> dict:
        return dict(self.__dict__)


@dataclass
class OptimizerState:
    step: int
    m: list
    v: list

    @staticmethod
    def zeros_like(params: ModelParams) -> "OptimizerState":
        z = lambda: [{k: np.zeros_like(v) for k, v in layer.items()}
                     for layer in params.weights]
        return OptimizerState(step=0, m=z(), v=z())


def adam_step(params: ModelParams, grads, state: OptimizerState, cfg: TrainConfig,
              lr: float | None = None):
    """One in-place Adam update. Zero gradients leave params unchanged."""
    state.step += 1
    t = state.step
    b1, b2 = cfg.beta1, cfg.beta2
    corr1 = 1.0 - b1 ** t
    corr2 = 1.0 - b2 ** t
    lr = cfg.lr if lr is None else lr
    for layer_w, layer_g, layer_m, layer_v in zip(params.weights, grads, state.m, state.v):
        for name, g in layer_g.items():
            m = layer_m[name]
            v = layer_v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * np.square(g)
            update = (lr / corr1) * m / (np.sqrt(v / corr2) + cfg.eps)
            layer_w[name] -= update
            if not np.isfinite(layer_w[name]).all():
                raise NumericError(f"non-finite parameter {name!r} after Adam step {t}")


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    params: ModelParams
    eval_accuracy: float
    reached_floor: bool
    epochs_run: int
    history: list = field(default_factory=list)  # (epoch, mean_loss, eval_acc)


def evaluate(params: ModelParams, images, labels, batch_size: int = 512) -> float:
    """Top-1 accuracy of the model over an image/label array pair."""
    hits = 0
    n = len(labels)
    for lo in range(0, n, batch_size):
        probs = forward(params, images[lo:lo + batch_size])
        hits += int((probs.argmax(axis=1) == labels[lo:lo + batch_size]).sum())
    return hits / n


def train(arch: ArchSpec, data, cfg: TrainConfig, seed: int, eval_data=None,
          stop_when=None) -> TrainResult:
    """Train a fresh model; deterministic given (arch, data order, seed).

    ``data`` is a LabeledDataset (or anything with .images/.labels). The
    accuracy floor is checked on ``eval_data`` when given, otherwise on a
    held-out slice of ``data``. A run that never reaches the floor is not
    an exception: the result carries ``reached_floor=False`` and the
    achieved accuracy so the caller can retry or discard.

    ``stop_when(params, epoch, eval_acc) -> bool`` ends training early
    when it returns True (evaluated after each epoch); it overrides the
    ``stop_at_floor`` flag. Zoo building uses this to stop once both the
    accuracy floor and the attack-success gate are met.
    """
    images = np.asarray(data.images, dtype=np.float32)
    labels = np.asarray(data.labels)
    if len(labels) == 0:
        raise ConfigError("training dataset is empty")
    if labels.min() < 0 or labels.max() >= arch.num_classes:
        raise ConfigError("labels out of range for architecture num_classes")

    seq = np.random.SeedSequence(seed)
    init_seed, shuffle_seed, split_seed = [s.generate_state(1)[0] for s in seq.spawn(3)]
    params = init_params(arch, int(init_seed))
    state = OptimizerState.zeros_like(params)

    if eval_data is not None:
        eval_images = np.asarray(eval_data.images, dtype=np.float32)
        eval_labels = np.asarray(eval_data.labels)
    else:
        n_hold = max(1, int(round(cfg.holdout_fraction * len(labels))))
        order = np.random.default_rng(int(split_seed)).permutation(len(labels))
        hold, keep = order[:n_hold], order[n_hold:]
        if len(keep) == 0:
            raise ConfigError("holdout fraction leaves no training samples")
        eval_images, eval_labels = images[hold], labels[hold]
        images, labels = images[keep], labels[keep]

    rng = np.random.default_rng(int(shuffle_seed))
    history = []
    acc = 0.0
    epochs_run = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(labels))
        losses = []
        lr = cfg.lr_at(epoch)
        for lo in range(0, len(order), cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            loss, grads, _ = loss_and_grads(params, images[idx], labels[idx])
            adam_step(params, grads, state, cfg, lr=lr)
            losses.append(loss)
        acc = evaluate(params, eval_images, eval_labels)
        epochs_run = epoch + 1
        history.append((epoch, float(np.mean(losses)), acc))
        if stop_when is not None:
            if stop_when(params, epoch, acc):
                break
        elif cfg.stop_at_floor and acc >= cfg.accuracy_floor:
            break
    return TrainResult(
        params=params,
        eval_accuracy=acc,
        reached_floor=acc >= cfg.accuracy_floor,
        epochs_run=epochs_run,
        history=history,
    )


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------

def grad_check(params: ModelParams, batch, labels, step: float = 1e-4,
               max_entries_per_tensor: int = 12, seed: int = 0,
               analytic_grads=None) -> float:
    """Max relative error between analytic and central-difference grads.

    Runs entirely in float64. Samples up to ``max_entries_per_tensor``
    coordinates per parameter tensor. ``analytic_grads`` can be supplied
    to check an externally produced (possibly corrupted) gradient.
    """
    p64 = params.astype(np.float64)
    x = np.asarray(batch, dtype=np.float64)
    y = np.asarray(labels)
    if analytic_grads is None:
        _, analytic_grads, _ = loss_and_grads(p64, x, y)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for li, layer in enumerate(p64.weights):
        for name, tensor in layer.items():
            flat = tensor.reshape(-1)
            count = min(max_entries_per_tensor, flat.size)
            coords = rng.choice(flat.size, size=count, replace=False)
            for c in coords:
                orig = flat[c]
                flat[c] = orig + step
                lp, _, _ = loss_and_grads(p64, x, y)
                flat[c] = orig - step
                lm, _, _ = loss_and_grads(p64, x, y)
                flat[c] = orig
                numeric = (lp - lm) / (2 * step)
                analytic = float(analytic_grads[li][name].reshape(-1)[c])
                err = abs(analytic - numeric) / (abs(analytic) + abs(numeric) + 1e-8)
                worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# Persistence: JSON manifest + weights blob of tensor containers
# ---------------------------------------------------------------------------

def _ordered_items(params: ModelParams):
    for layer in params.weights:
        for name in sorted(layer):
            yield name, layer[name]


def save_model(model_dir, params: ModelParams, metrics: dict | None = None) -> str:
    """Write model.json + weights.bin under ``model_dir``; returns fingerprint."""
    os.makedirs(model_dir, exist_ok=True)
    blob_path = os.path.join(model_dir, "weights.bin")
    tensorio.save_tensors(blob_path, [a for _, a in _ordered_items(params)])
    fp = model_fingerprint(params)
    manifest = {
        "format": "pixsig-model-v1",
        "arch": params.arch.to_json(),
        "rng_seed": params.rng_seed,
        "metrics": metrics or {},
        "fingerprint": fp,
    }
    with open(os.path.join(model_dir, "model.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return fp


def load_model(model_dir):
    """Load (params, manifest) saved by ``save_model``; bit-exact."""
    with open(os.path.join(model_dir, "model.json")) as fh:
        manifest = json.load(fh)
    arch = ArchSpec.from_json(manifest["arch"])
    arrays = tensorio.load_tensors(os.path.join(model_dir, "weights.bin"))
    weights = []
    cursor = 0
    for shapes in arch.param_shapes():
        layer = {}
        for name in sorted(shapes):
            arr = arrays[cursor]
            cursor += 1
            if tuple(arr.shape) != tuple(shapes[name]):
                raise ConfigError(
                    f"weights blob mismatch for {name}: {arr.shape} vs {shapes[name]}")
            layer[name] = arr
        weights.append(layer)
    if cursor != len(arrays):
        raise ConfigError("weights blob has extra tensors")
    params = ModelParams(arch=arch, weights=weights, rng_seed=int(manifest["rng_seed"]))
    return params, manifest


def model_fingerprint(params: ModelParams) -> str:
    h = hashlib.sha256()
    h.update(json.dumps(params.arch.to_json(), sort_keys=True).encode())
    for name, arr in _ordered_items(params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()
