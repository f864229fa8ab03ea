"""Evaluation heads over a frozen ViT: feature pyramids, linear probes and mIoU.

Feature maps are channels-last ``[..., h, w, D]``. Pyramid scales are relative
to the input image assuming the backbone runs at 1/16 (patch 16): the four
outputs sit at 1/4, 1/8, 1/16 and 1/32 of the input.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from nmidistill.errors import NumericError
from nmidistill.imageops import bilinear_resize
from nmidistill.toy.autograd import as_var, log_softmax, parameter
from nmidistill.toy.model import ModelConfig, forward
from nmidistill.toy.optim import AdamWState, Schedule, adamw_step, lr_at

MODES = ("multi-layer", "ll-fpn", "lp", "layerwise")
SCALES = (4, 8, 16, 32)


def default_layers(depth: int, mode: str, layer: int | None = None) -> list[int]:
    """Probed 1-based layers: depth/3, depth/2, 2*depth/3, depth for multi-layer modes
    (4, 6, 8, 12 at depth 12; 8, 12, 16, 24 at depth 24), four copies of the last layer
    for LL-FPN, and a single layer for layerwise probing."""
    if mode in ("multi-layer", "lp"):
        return [max(1, depth // 3), max(1, depth // 2), max(1, 2 * depth // 3), depth]
    if mode == "ll-fpn":
        return [depth] * 4
    if mode == "layerwise":
        if layer is None or not 1 <= layer <= depth:
            raise ValueError(f"layerwise probing needs a layer in 1..{depth}, got {layer}")
        return [layer]
    raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")


@dataclass(frozen=True)
class PyramidConfig:
    source_layers: tuple[int, int, int, int]
    depth: int
    last_layer_only: bool = False

    def __post_init__(self):
        object.__setattr__(self, "source_layers", tuple(self.source_layers))
        if len(self.source_layers) != 4:
            raise ValueError("a pyramid needs exactly four source layers")
        if any(not 1 <= l <= self.depth for l in self.source_layers):
            raise ValueError(f"source layers {self.source_layers} outside 1..{self.depth}")
        if self.last_layer_only and set(self.source_layers) != {self.depth}:
            raise ValueError("LL-FPN must take every branch from the last layer")

    @classmethod
    def for_mode(cls, depth: int, mode: str) -> "PyramidConfig":
        if mode not in ("multi-layer", "ll-fpn"):
            raise ValueError(f"pyramid mode must be 'multi-layer' or 'll-fpn', got {mode!r}")
        return cls(tuple(default_layers(depth, mode)), depth, mode == "ll-fpn")


def conv_transpose2x2(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Stride-2, kernel-2 transposed convolution; ``weight`` is [2, 2, C_in, C_out]."""
    *lead, h, w, _ = x.shape
    y = np.einsum("...hwc,abcd->...hawbd", x, weight)
    return y.reshape(*lead, 2 * h, 2 * w, weight.shape[-1]) + bias


def max_pool2x2(x: np.ndarray) -> np.ndarray:
    *lead, h, w, c = x.shape
    x = x[..., : h // 2 * 2, : w // 2 * 2, :]
    return x.reshape(*lead, h // 2, 2, w // 2, 2, c).max(axis=(-4, -2))


@dataclass
class PyramidWeights:
    """Transposed-convolution weights for the 1/4 (two stages) and 1/8 branches."""

    up4_a: tuple[np.ndarray, np.ndarray]
    up4_b: tuple[np.ndarray, np.ndarray]
    up8: tuple[np.ndarray, np.ndarray]

    @classmethod
    def identity(cls, dim: int) -> "PyramidWeights":
        """Each output pixel copies its source pixel (nearest-neighbour upsampling)."""
        w = np.broadcast_to(np.eye(dim), (2, 2, dim, dim)).copy()
        b = np.zeros(dim)
        return cls((w, b), (w.copy(), b.copy()), (w.copy(), b.copy()))

    @classmethod
    def random(cls, dim: int, seed: int = 0, std: float = 0.02) -> "PyramidWeights":
        rng = np.random.default_rng(seed)

        def one():
            return rng.normal(0.0, std, (2, 2, dim, dim)), np.zeros(dim)

        return cls(one(), one(), one())


def tokens_to_map(features: np.ndarray, grid: tuple[int, int]) -> np.ndarray:
    """[..., N, D] -> [..., h, w, D]."""
    h, w = grid
    if features.shape[-2] != h * w:
        raise NumericError(f"{features.shape[-2]} tokens do not fit a {h}x{w} grid")
    return features.reshape(*features.shape[:-2], h, w, features.shape[-1])


def build_pyramid(layer_features: np.ndarray, config: PyramidConfig, grid: tuple[int, int],
                  weights: PyramidWeights | None = None) -> list[np.ndarray]:
    """Four maps at 1/4, 1/8, 1/16, 1/32 of the input from a [..., L, N, D] feature stack."""
    feats = np.asarray(layer_features)
    if feats.shape[-3] < max(config.source_layers):
        raise NumericError(f"feature stack has {feats.shape[-3]} layers, config needs {max(config.source_layers)}")
    maps = [tokens_to_map(np.take(feats, l - 1, axis=-3), grid) for l in config.source_layers]
    if weights is None:
        weights = PyramidWeights.identity(feats.shape[-1])
    s4 = conv_transpose2x2(conv_transpose2x2(maps[0], *weights.up4_a), *weights.up4_b)
    s8 = conv_transpose2x2(maps[1], *weights.up8)
    s16 = maps[2]
    s32 = max_pool2x2(maps[3])
    return [s4, s8, s16, s32]


# ---------------------------------------------------------------------------
# linear probing


@dataclass
class ProbeHead:
    """Per-pixel linear map (a 1x1 convolution) from concatenated channels to classes."""

    weight: np.ndarray     # [C_in, K]
    bias: np.ndarray       # [K]

    @classmethod
    def zeros(cls, in_channels: int, num_classes: int) -> "ProbeHead":
        return cls(np.zeros((in_channels, num_classes), np.float32), np.zeros(num_classes, np.float32))

    @property
    def in_channels(self) -> int:
        return self.weight.shape[0]


def probe_features(layer_features: np.ndarray, probed_layers: Sequence[int], grid: tuple[int, int],
                   out_size: tuple[int, int]) -> np.ndarray:
    """Resize each probed layer's map to ``out_size`` and concatenate along channels."""
    if not probed_layers:
        raise ValueError("probed_layers must be non-empty")
    feats = np.asarray(layer_features)
    maps = [bilinear_resize(tokens_to_map(np.take(feats, l - 1, axis=-3), grid), *out_size)
            for l in probed_layers]
    return np.concatenate(maps, axis=-1)


def probe_forward(layer_features: np.ndarray, probed_layers: Sequence[int], head: ProbeHead,
                  grid: tuple[int, int], image: tuple[int, int]) -> np.ndarray:
    """Per-pixel class logits at 1/4 of the input resolution."""
    x = probe_features(layer_features, probed_layers, grid, (image[0] // 4, image[1] // 4))
    if x.shape[-1] != head.in_channels:
        raise NumericError(f"head expects {head.in_channels} channels, probed features have {x.shape[-1]}")
    return x @ head.weight + head.bias


def iou_report(pred: np.ndarray, target: np.ndarray, num_classes: int) -> dict:
    """Per-class IoU over the whole set; classes absent from both are excluded from the mean."""
    pred = np.asarray(pred).ravel()
    target = np.asarray(target).ravel()
    per_class: list[float | None] = []
    for c in range(num_classes):
        p, t = pred == c, target == c
        union = np.count_nonzero(p | t)
        per_class.append(None if union == 0 else np.count_nonzero(p & t) / union)
    present = [v for v in per_class if v is not None]
    return {
        "per_class_iou": per_class,
        "excluded_classes": [c for c, v in enumerate(per_class) if v is None],
        "miou": float(np.mean(present)) if present else float("nan"),
    }


def downsample_labels(labels: np.ndarray, factor: int, num_classes: int) -> np.ndarray:
    """Majority label per ``factor x factor`` block (ties to the lower class id)."""
    n, H, W = labels.shape
    h, w = H // factor, W // factor
    blocks = labels[:, : h * factor, : w * factor].reshape(n, h, factor, w, factor)
    counts = np.stack([(blocks == c).sum(axis=(2, 4)) for c in range(num_classes)], axis=-1)
    return counts.argmax(-1)


@dataclass
class ProbeResult:
    head: ProbeHead
    report: dict
    losses: list[float] = field(default_factory=list)
    layers: list[int] = field(default_factory=list)
    mode: str = "lp"


def extract_features(config: ModelConfig, params: dict, images: np.ndarray, batch: int = 64) -> np.ndarray:
    """[n, L, N, D] features of a frozen backbone (no graph is recorded)."""
    chunks = [forward(config, params, images[i:i + batch]).feature_array() for i in range(0, len(images), batch)]
    return np.concatenate(chunks, axis=0)


def probe_inputs(layer_features: np.ndarray, mode: str, layers: Sequence[int], grid: tuple[int, int],
                 out_size: tuple[int, int], weights: PyramidWeights | None = None) -> np.ndarray:
    """Channel-concatenated maps at ``out_size`` fed to the linear head.

    ``lp``/``layerwise`` resize the probed layers directly; ``multi-layer``/``ll-fpn``
    first build the four-scale pyramid (fixed weights) and resize its maps.
    """
    if mode in ("lp", "layerwise"):
        return probe_features(layer_features, layers, grid, out_size)
    depth = np.shape(layer_features)[-3]
    pyramid = build_pyramid(layer_features, PyramidConfig(tuple(layers), depth, mode == "ll-fpn"), grid, weights)
    return np.concatenate([bilinear_resize(m, *out_size) for m in pyramid], axis=-1)


def predict(inputs: np.ndarray, head: ProbeHead, image: tuple[int, int]) -> np.ndarray:
    """Full-resolution labels: head logits at 1/4 are bilinearly upsampled, then argmax."""
    if inputs.shape[-1] != head.in_channels:
        raise NumericError(f"head expects {head.in_channels} channels, inputs have {inputs.shape[-1]}")
    return bilinear_resize(inputs @ head.weight + head.bias, *image).argmax(-1)


def train_probe(config: ModelConfig, params: dict, train_images: np.ndarray, train_labels: np.ndarray,
                test_images: np.ndarray, test_labels: np.ndarray, num_classes: int,
                mode: str = "lp", layers: Sequence[int] | None = None, epochs: int = 30,
                batch_size: int = 64, lr: float = 1e-2, weight_decay: float = 0.0, seed: int = 0) -> ProbeResult:
    """Train only a linear head on frozen features; report held-out per-class IoU and mIoU.

    ``params`` is never modified: features are extracted once without gradients.
    """
    layers = list(layers) if layers is not None else default_layers(config.depth, mode)
    rng = np.random.default_rng(seed)
    image = config.image
    out_size = (image[0] // 4, image[1] // 4)
    train_x = probe_inputs(extract_features(config, params, train_images), mode, layers, config.grid, out_size)
    train_y = downsample_labels(train_labels, 4, num_classes)
    weights = {"weight": np.zeros((train_x.shape[-1], num_classes), np.float32),
               "bias": np.zeros(num_classes, np.float32)}
    n = len(train_x)
    steps_per_epoch = -(-n // batch_size)
    schedule = Schedule(lr * 256 / batch_size, batch_size, epochs * steps_per_epoch, 0)
    state = AdamWState(weight_decay=weight_decay)
    onehot = np.eye(num_classes, dtype=np.float32)
    losses = []
    step = 0
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = np.sort(order[start:start + batch_size])
            W, b = parameter(weights["weight"]), parameter(weights["bias"])
            logits = as_var(train_x[idx].astype(np.float32)) @ W + b
            loss = -(log_softmax(logits, axis=-1) * onehot[train_y[idx]]).sum(-1).mean()
            loss.backward()
            weights = adamw_step(weights, {"weight": W.grad, "bias": b.grad}, state, lr_at(step, schedule))
            losses.append(float(loss.value))
            step += 1
    head = ProbeHead(weights["weight"], weights["bias"])
    test_x = probe_inputs(extract_features(config, params, test_images), mode, layers, config.grid, out_size)
    pred = predict(test_x, head, image)
    return ProbeResult(head, iou_report(pred, test_labels, num_classes), losses, layers, mode)
