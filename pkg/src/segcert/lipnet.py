"""A small Lipschitz-bounded segmentation network in plain numpy.

Layers act on (N, C, H, W) float64 batches. Every linear layer carries a sound
upper bound on its l2 operator norm and the network bound is their product.
"""
from __future__ import annotations

import copy
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from segcert.tensor import Tensor, read_tensor, write_tensor

KINDS = ("dense_1x1", "conv3x3", "groupsort2", "batch_center", "residual_add")
LINEAR_KINDS = ("dense_1x1", "conv3x3")
MANIFEST_NAME = "manifest.json"
MANIFEST_FORMAT = "segcert-toy-model"


class TrainingDiverged(RuntimeError):
    def __init__(self, step, loss):
        super().__init__(f"loss became {loss} at step {step}")
        self.step = step


@dataclass
class LayerSpec:
    kind: str
    weight: np.ndarray | None = None
    bias: np.ndarray | None = None
    lip_bound: float = 1.0
    branch: list[LayerSpec] = field(default_factory=list)
    running_mean: np.ndarray | None = None
    momentum: float = 0.1

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")


@dataclass
class ToyModel:
    layers: list[LayerSpec]
    input_channels: int
    classes: int
    size: tuple[int, int] = (16, 16)

    @property
    def global_lip(self) -> float:
        return math.prod(layer.lip_bound for layer in self.layers)

    def copy(self) -> ToyModel:
        return copy.deepcopy(self)

    def as_float32(self) -> ToyModel:
        """Copy with parameters rounded to float32 and bounds recomputed on the result."""
        model = self.copy()
        for layer in iter_layers(model.layers):
            for name in ("weight", "bias", "running_mean"):
                value = getattr(layer, name)
                if value is not None:
                    setattr(layer, name, value.astype(np.float32).astype(np.float64))
        refresh_bounds(model)
        return model


def iter_layers(layers):
    for layer in layers:
        yield layer
        if layer.kind == "residual_add":
            yield from iter_layers(layer.branch)


# --- Lipschitz bounds ------------------------------------------------------


def dense_bound(w: np.ndarray) -> float:
    """min(Frobenius, sqrt(||W||_1 ||W||_inf)); both dominate the spectral norm."""
    w = np.asarray(w, dtype=np.float64)
    fro = float(np.sqrt(np.sum(w * w)))
    col = float(np.abs(w).sum(axis=0).max())
    row = float(np.abs(w).sum(axis=1).max())
    return min(fro, math.sqrt(col * row))


def conv_bound(w: np.ndarray) -> float:
    """Sum over the 9 taps of each tap's Frobenius norm."""
    w = np.asarray(w, dtype=np.float64)
    return float(np.sqrt(np.sum(w * w, axis=(0, 1))).sum())


def layer_bound(layer: LayerSpec) -> float:
    if layer.kind == "dense_1x1":
        return dense_bound(layer.weight)
    if layer.kind == "conv3x3":
        return conv_bound(layer.weight)
    if layer.kind == "residual_add":
        # (x + g(x)) / 2 with Lip(g) <= prod of branch bounds
        return 0.5 * (1.0 + math.prod(layer_bound(sub) for sub in layer.branch))
    return 1.0


def refresh_bounds(model: ToyModel) -> None:
    for layer in reversed(list(iter_layers(model.layers))):
        layer.lip_bound = layer_bound(layer)


def lipschitz_upper_bound(model: ToyModel) -> float:
    return math.prod(layer_bound(layer) for layer in model.layers)


# --- construction ----------------------------------------------------------


def _orthogonal(rng, rows, cols):
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    return q if rows >= cols else q.T


def dense_layer(rng, c_in, c_out) -> LayerSpec:
    w = _orthogonal(rng, c_out, c_in)
    layer = LayerSpec("dense_1x1", w, np.zeros(c_out))
    layer.lip_bound = layer_bound(layer)
    return layer


def conv_layer(rng, c_in, c_out, side_scale=0.1) -> LayerSpec:
    w = side_scale * rng.standard_normal((c_out, c_in, 3, 3)) / math.sqrt(c_in)
    w[:, :, 1, 1] = _orthogonal(rng, c_out, c_in)
    w /= conv_bound(w)
    layer = LayerSpec("conv3x3", w, np.zeros(c_out))
    layer.lip_bound = layer_bound(layer)
    return layer


def build_toy_model(input_channels=1, classes=2, width=8, blocks=2, size=(16, 16), seed=0) -> ToyModel:
    """conv -> groupsort -> center -> residual blocks -> conv -> groupsort -> 1x1 head."""
    if width % 2:
        raise ValueError("width must be even for groupsort2")
    rng = np.random.default_rng(seed)
    layers = [
        conv_layer(rng, input_channels, width),
        LayerSpec("groupsort2"),
        LayerSpec("batch_center", running_mean=np.zeros(width)),
    ]
    for _ in range(blocks):
        branch = [conv_layer(rng, width, width), LayerSpec("groupsort2")]
        res = LayerSpec("residual_add", branch=branch)
        res.lip_bound = layer_bound(res)
        layers.append(res)
    layers += [conv_layer(rng, width, width), LayerSpec("groupsort2"), dense_layer(rng, width, classes)]
    return ToyModel(layers, input_channels, classes, tuple(size))


# --- forward / backward ----------------------------------------------------


def _im2col(x):
    """(N, C, H, W) -> (N, H, W, C*9) neighbourhoods with zero padding."""
    n, c, h, w = x.shape
    xp = np.zeros((n, c, h + 2, w + 2))
    xp[:, :, 1:-1, 1:-1] = x
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n, h, w, c * 9)


def _conv_forward(w, b, x):
    cols = _im2col(x)
    y = cols @ w.reshape(w.shape[0], -1).T
    if b is not None:
        y += b
    return np.ascontiguousarray(y.transpose(0, 3, 1, 2)), cols


def _conv_backward(w, cols, g, need_weight):
    c_out, c_in = w.shape[:2]
    flipped = w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(c_in, c_out * 9)
    gx = (_im2col(g) @ flipped.T).transpose(0, 3, 1, 2)
    gw = None
    if need_weight:
        g_rows = g.transpose(0, 2, 3, 1).reshape(-1, c_out)
        gw = (g_rows.T @ cols.reshape(-1, c_in * 9)).reshape(w.shape)
    return np.ascontiguousarray(gx), gw


def _layer_forward(layer, x, train):
    kind = layer.kind
    if kind == "dense_1x1":
        y = np.einsum("oc,nchw->nohw", layer.weight, x)
        if layer.bias is not None:
            y += layer.bias[None, :, None, None]
        return y, x
    if kind == "conv3x3":
        return _conv_forward(layer.weight, layer.bias, x)
    if kind == "groupsort2":
        if x.shape[1] % 2:
            raise ValueError("groupsort2 needs an even channel count")
        n, c, h, w = x.shape
        pairs = x.reshape(n, c // 2, 2, h, w)
        swap = pairs[:, :, 0] > pairs[:, :, 1]
        out = np.stack([np.minimum(pairs[:, :, 0], pairs[:, :, 1]),
                        np.maximum(pairs[:, :, 0], pairs[:, :, 1])], axis=2)
        return out.reshape(x.shape), swap
    if kind == "batch_center":
        if train:
            mean = x.mean(axis=(0, 2, 3))
            layer.running_mean = (1 - layer.momentum) * layer.running_mean + layer.momentum * mean
        else:
            mean = layer.running_mean
        return x - mean[None, :, None, None], train
    if kind == "residual_add":
        out, caches = _forward(layer.branch, x, train)
        if out.shape != x.shape:
            raise ValueError("residual branch must preserve the feature shape")
        return 0.5 * (x + out), caches
    raise ValueError(kind)


def _layer_backward(layer, cache, g, grads):
    kind = layer.kind
    if kind == "dense_1x1":
        x = cache
        if grads is not None:
            grads[id(layer)] = {
                "weight": np.einsum("nohw,nchw->oc", g, x),
                "bias": g.sum(axis=(0, 2, 3)),
            }
        return np.einsum("oc,nohw->nchw", layer.weight, g)
    if kind == "conv3x3":
        gx, gw = _conv_backward(layer.weight, cache, g, grads is not None)
        if grads is not None:
            grads[id(layer)] = {"weight": gw, "bias": g.sum(axis=(0, 2, 3))}
        return gx
    if kind == "groupsort2":
        swap = cache
        n, c, h, w = g.shape
        gp = g.reshape(n, c // 2, 2, h, w)
        g_lo, g_hi = gp[:, :, 0], gp[:, :, 1]
        gx = np.stack([np.where(swap, g_hi, g_lo), np.where(swap, g_lo, g_hi)], axis=2)
        return gx.reshape(g.shape)
    if kind == "batch_center":
        if cache:
            return g - g.mean(axis=(0, 2, 3), keepdims=True)
        return g
    if kind == "residual_add":
        half = 0.5 * g
        return half + _backward(layer.branch, cache, half, grads)
    raise ValueError(kind)


def _forward(layers, x, train=False):
    caches = []
    for layer in layers:
        x, cache = _layer_forward(layer, x, train)
        caches.append(cache)
    return x, caches


def _backward(layers, caches, g, grads=None):
    for layer, cache in zip(reversed(layers), reversed(caches)):
        g = _layer_backward(layer, cache, g, grads)
    return g


def _as_batch(model, image):
    x = np.asarray(image, dtype=np.float64)
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.ndim != 4 or x.shape[1] != model.input_channels:
        raise ValueError(
            f"expected input of shape ({model.input_channels}, H, W) or a batch of those, got {np.shape(image)}"
        )
    return x, single


def forward(model: ToyModel, image) -> np.ndarray:
    """Logits (K, H, W) for one image, or (N, K, H, W) for a batch. Evaluation mode."""
    x, single = _as_batch(model, image)
    y, _ = _forward(model.layers, x, train=False)
    return y[0] if single else y


# --- objectives --------------------------------------------------------------


def _batch_labels(labels, shape):
    labels = np.asarray(labels)
    if labels.ndim == 2:
        labels = np.broadcast_to(labels, (shape[0],) + labels.shape)
    if labels.shape != (shape[0],) + tuple(shape[2:]):
        raise ValueError(f"labels shape {labels.shape} does not match logits {shape}")
    return labels


def _onehot(labels, k):
    return np.moveaxis(np.eye(k, dtype=np.float64)[labels], -1, 1)


@dataclass
class CrossEntropy:
    """Mean per-pixel cross-entropy of temperature-scaled logits.

    ``mask`` zeroes pixels out of the sum without changing the normaliser.
    """

    labels: np.ndarray
    temperature: float = 1.0
    mask: np.ndarray | None = None

    def __call__(self, logits):
        labels = _batch_labels(self.labels, logits.shape)
        z = self.temperature * logits
        z = z - z.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        onehot = _onehot(labels, logits.shape[1])
        per_pixel = -(onehot * logp).sum(axis=1)
        weight = np.ones(per_pixel.shape)
        if self.mask is not None:
            weight = weight * np.broadcast_to(self.mask, per_pixel.shape)
        count = per_pixel.size
        value = float((per_pixel * weight).sum() / count)
        grad = self.temperature * (np.exp(logp) - onehot) * weight[:, None] / count
        return value, grad


@dataclass
class SumMargin:
    """Sum over pixels of (true-class logit - best other logit)."""

    labels: np.ndarray
    mask: np.ndarray | None = None

    def __call__(self, logits):
        labels = _batch_labels(self.labels, logits.shape)
        onehot = _onehot(labels, logits.shape[1])
        true = (onehot * logits).sum(axis=1)
        others = np.where(onehot > 0, -np.inf, logits)
        rival = others.argmax(axis=1)
        margin = true - others.max(axis=1)
        weight = np.ones(margin.shape)
        if self.mask is not None:
            weight = weight * np.broadcast_to(self.mask, margin.shape)
        grad = (onehot - _onehot(rival, logits.shape[1])) * weight[:, None]
        return float((margin * weight).sum()), grad


def input_gradient(model: ToyModel, image, objective) -> np.ndarray:
    """Gradient of ``objective(logits)`` with respect to the input image."""
    x, single = _as_batch(model, image)
    y, caches = _forward(model.layers, x, train=False)
    _, gy = objective(y)
    gx = _backward(model.layers, caches, gy)
    return gx[0] if single else gx


def value_and_input_gradient(model: ToyModel, image, objective):
    x, single = _as_batch(model, image)
    y, caches = _forward(model.layers, x, train=False)
    value, gy = objective(y)
    gx = _backward(model.layers, caches, gy)
    return value, (y[0] if single else y), (gx[0] if single else gx)


# --- data --------------------------------------------------------------------


@dataclass
class SyntheticSample:
    image: np.ndarray  # (1, H, W) in [0, 1]
    mask: np.ndarray  # (H, W) class indices


# shape intensity per foreground class; background sits near 0.3
_LEVELS = {2: (0.8,), 3: (0.85, 0.58)}


def _shape_distance(rng, size):
    """Signed distance to a random rectangle or disk (negative inside)."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    cy, cx = rng.uniform(0.25 * size, 0.75 * size, size=2)
    if rng.random() < 0.5:
        hy, hx = rng.uniform(0.12 * size, 0.3 * size, size=2)
        return np.maximum(np.abs(yy - cy) - hy, np.abs(xx - cx) - hx)
    r = rng.uniform(0.15 * size, 0.3 * size)
    return np.hypot(yy - cy, xx - cx) - r


def generate_synthetic_dataset(seed: int, count: int, size: int = 16, classes: int = 2,
                               noise: float = 0.06) -> list[SyntheticSample]:
    """Soft-edged rectangles and disks on a noisy background."""
    if size < 8:
        raise ValueError("size must be at least 8")
    if classes not in _LEVELS:
        raise ValueError("classes must be 2 or 3")
    rng = np.random.default_rng(seed)
    samples = []
    for _ in range(count):
        image = 0.3 + 0.05 * rng.standard_normal((size, size))
        mask = np.zeros((size, size), dtype=np.int64)
        n_shapes = int(rng.integers(1, 3)) + (classes - 2)
        for i in range(n_shapes):
            cls = 1 + (i % (classes - 1))
            d = _shape_distance(rng, size)
            alpha = 0.5 * (1.0 - np.tanh(d / 0.8))
            image = (1 - alpha) * image + alpha * _LEVELS[classes][cls - 1]
            mask[d < 0] = cls
        image = np.clip(image + noise * rng.standard_normal((size, size)), 0.0, 1.0)
        samples.append(SyntheticSample(image[None], mask))
    return samples


def stack_dataset(samples):
    images = np.stack([s.image for s in samples])
    masks = np.stack([s.mask for s in samples])
    return images, masks


# --- training ----------------------------------------------------------------


def _normalise_linear(model: ToyModel) -> None:
    for layer in iter_layers(model.layers):
        if layer.kind in LINEAR_KINDS:
            bound = layer_bound(layer)
            if bound > 0:
                layer.weight = layer.weight / bound
    refresh_bounds(model)


def pixel_accuracy(model: ToyModel, images, masks) -> float:
    logits = forward(model, images)
    preds = logits.argmax(axis=1)
    return float(np.mean(preds == masks))


def train_toy(model: ToyModel, dataset, steps: int, lr: float = 0.01, temperature: float = 5.0,
              batch_size: int = 16, seed: int = 0, log_every: int = 0) -> ToyModel:
    """Adam on tau-scaled cross-entropy; linear layers renormalised to bound 1 after each step."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    model = model.copy()
    if steps <= 0:
        return model
    images, masks = stack_dataset(dataset)
    rng = np.random.default_rng(seed)
    params = [(layer, name) for layer in iter_layers(model.layers) if layer.kind in LINEAR_KINDS
              for name in ("weight", "bias") if getattr(layer, name) is not None]
    m1 = [np.zeros_like(getattr(l, n)) for l, n in params]
    m2 = [np.zeros_like(getattr(l, n)) for l, n in params]
    beta1, beta2 = 0.9, 0.999
    for step in range(1, steps + 1):
        idx = rng.choice(len(images), size=min(batch_size, len(images)), replace=False)
        x, y = images[idx], masks[idx]
        out, caches = _forward(model.layers, x, train=True)
        loss, gy = CrossEntropy(y, temperature)(out)
        if not math.isfinite(loss):
            raise TrainingDiverged(step, loss)
        grads: dict = {}
        _backward(model.layers, caches, gy, grads)
        for i, (layer, name) in enumerate(params):
            g = grads[id(layer)][name]
            m1[i] = beta1 * m1[i] + (1 - beta1) * g
            m2[i] = beta2 * m2[i] + (1 - beta2) * g * g
            mhat = m1[i] / (1 - beta1 ** step)
            vhat = m2[i] / (1 - beta2 ** step)
            setattr(layer, name, getattr(layer, name) - lr * mhat / (np.sqrt(vhat) + 1e-8))
        _normalise_linear(model)
        if log_every and step % log_every == 0:
            print(f"step {step:5d}  loss {loss:.4f}")
    return model


# --- persistence -------------------------------------------------------------


def _layer_to_json(layer, directory, prefix):
    entry = {"kind": layer.kind, "lip_bound": layer.lip_bound}
    for name in ("weight", "bias", "running_mean"):
        value = getattr(layer, name)
        if value is not None:
            fname = f"{prefix}_{name}.segt"
            write_tensor(Tensor.real32(value), os.path.join(directory, fname))
            entry[name] = fname
    if layer.kind == "batch_center":
        entry["momentum"] = layer.momentum
    if layer.branch:
        entry["branch"] = [_layer_to_json(sub, directory, f"{prefix}_{j}") for j, sub in enumerate(layer.branch)]
    return entry


def save_model(model: ToyModel, directory) -> str:
    """Write a JSON manifest plus one SEGT file per parameter array (stored as real32)."""
    os.makedirs(directory, exist_ok=True)
    manifest = {
        "format": MANIFEST_FORMAT,
        "version": 1,
        "input_channels": model.input_channels,
        "classes": model.classes,
        "size": list(model.size),
        "global_lip": model.global_lip,
        "layers": [_layer_to_json(layer, directory, f"layer{i:02d}") for i, layer in enumerate(model.layers)],
    }
    path = os.path.join(directory, MANIFEST_NAME)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2)
    return path


def _layer_from_json(entry, directory):
    layer = LayerSpec(entry["kind"])
    for name in ("weight", "bias", "running_mean"):
        if name in entry:
            data = read_tensor(os.path.join(directory, entry[name])).data.astype(np.float64)
            setattr(layer, name, data)
    layer.momentum = entry.get("momentum", layer.momentum)
    layer.branch = [_layer_from_json(sub, directory) for sub in entry.get("branch", [])]
    return layer


def load_model(directory) -> ToyModel:
    """Inverse of :func:`save_model`; bounds are recomputed from the stored weights."""
    with open(os.path.join(directory, MANIFEST_NAME), encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("format") != MANIFEST_FORMAT:
        raise ValueError(f"not a toy-model manifest: {manifest.get('format')!r}")
    layers = [_layer_from_json(entry, directory) for entry in manifest["layers"]]
    model = ToyModel(layers, manifest["input_channels"], manifest["classes"], tuple(manifest["size"]))
    refresh_bounds(model)
    return model
