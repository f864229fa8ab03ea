"""Minimal pre-norm ViT encoder without a class token.

Images are channels-last ``[B, H, W, C]``. Parameters live in a flat
``name -> ndarray`` dict so they round-trip through the checkpoint codec
unchanged. Block ``i`` (0-based in parameter names) is layer ``i + 1``
everywhere else in the package.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import numpy as np

from nmidistill.errors import NumericError
from nmidistill.toy.autograd import Var, as_var, gelu, layer_norm, softmax

LN_EPS = 1e-6
INIT_STD = 0.02


@dataclass(frozen=True)
class ModelConfig:
    depth: int
    dim: int
    heads: int
    patch: int
    image: tuple[int, int]
    mlp_ratio: int = 4
    in_chans: int = 3
    learnable_pos: bool = False
    # head count used by the last block only (adaptive-head alignment); None = ``heads``
    last_layer_heads: int | None = None
    # extra attention-only layer appended for alignment; None = absent
    extra_attention_heads: int | None = None
    num_classes: int = 0

    def __post_init__(self):
        object.__setattr__(self, "image", tuple(self.image))
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} is not divisible by heads {self.heads}")
        for h in (self.last_layer_heads, self.extra_attention_heads):
            if h is not None and self.dim % h:
                raise ValueError(f"dim {self.dim} is not divisible by {h} heads")
        H, W = self.image
        if H % self.patch or W % self.patch:
            raise ValueError(f"image {H}x{W} is not divisible by patch {self.patch}")
        if not self.learnable_pos and self.dim % 4:
            raise ValueError("fixed 2-D sin-cos position embeddings need dim divisible by 4")

    @property
    def grid(self) -> tuple[int, int]:
        return self.image[0] // self.patch, self.image[1] // self.patch

    @property
    def tokens(self) -> int:
        h, w = self.grid
        return h * w

    def heads_at(self, layer: int) -> int:
        """Head count of 1-based ``layer``."""
        if layer == self.depth and self.last_layer_heads is not None:
            return self.last_layer_heads
        return self.heads

    def to_dict(self) -> dict:
        d = asdict(self)
        d["image"] = list(self.image)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def sincos_pos_embed(dim: int, grid: tuple[int, int]) -> np.ndarray:
    """Fixed 2-D sine-cosine embedding, [h*w, dim]; half the channels encode rows, half columns."""
    h, w = grid
    rows, cols = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")

    def one_axis(pos, d):
        omega = 1.0 / 10000 ** (np.arange(d // 2, dtype=np.float64) / (d / 2.0))
        out = pos.reshape(-1)[:, None] * omega[None, :]
        return np.concatenate([np.sin(out), np.cos(out)], axis=1)

    return np.concatenate([one_axis(rows, dim // 2), one_axis(cols, dim // 2)], axis=1)


def _trunc_normal(rng: np.random.Generator, shape, std=INIT_STD) -> np.ndarray:
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def _block_shapes(prefix: str, d: int, hidden: int) -> dict[str, tuple]:
    return {
        f"{prefix}.norm1.w": (d,), f"{prefix}.norm1.b": (d,),
        f"{prefix}.attn.qkv.w": (d, 3 * d), f"{prefix}.attn.qkv.b": (3 * d,),
        f"{prefix}.attn.proj.w": (d, d), f"{prefix}.attn.proj.b": (d,),
        f"{prefix}.norm2.w": (d,), f"{prefix}.norm2.b": (d,),
        f"{prefix}.mlp.fc1.w": (d, hidden), f"{prefix}.mlp.fc1.b": (hidden,),
        f"{prefix}.mlp.fc2.w": (hidden, d), f"{prefix}.mlp.fc2.b": (d,),
    }


def param_shapes(config: ModelConfig) -> dict[str, tuple]:
    d = config.dim
    shapes = {
        "patch_embed.w": (config.patch * config.patch * config.in_chans, d),
        "patch_embed.b": (d,),
    }
    if config.learnable_pos:
        shapes["pos_embed"] = (config.tokens, d)
    for i in range(config.depth):
        shapes.update(_block_shapes(f"blocks.{i}", d, d * config.mlp_ratio))
    if config.extra_attention_heads is not None:
        shapes.update({"extra.norm.w": (d,), "extra.norm.b": (d,),
                       "extra.attn.qkv.w": (d, 2 * d), "extra.attn.qkv.b": (2 * d,)})
    if config.num_classes:
        shapes.update({"head.norm.w": (d,), "head.norm.b": (d,),
                       "head.w": (d, config.num_classes), "head.b": (config.num_classes,)})
    return shapes


def init_params(config: ModelConfig, seed: int = 0, dtype=np.float32) -> dict[str, np.ndarray]:
    """Truncated-normal(0.02) weights, zero biases, unit norm gains."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".norm1.w") or name.endswith(".norm2.w") or name.endswith("norm.w"):
            value = np.ones(shape)
        elif name.endswith(".b"):
            value = np.zeros(shape)
        else:
            value = _trunc_normal(rng, shape)
        params[name] = value.astype(dtype)
    return params


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """[B, H, W, C] -> [B, N, patch*patch*C] in row-major token order."""
    B, H, W, C = images.shape
    h, w = H // patch, W // patch
    x = images.reshape(B, h, patch, w, patch, C).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(B, h * w, patch * patch * C)


@dataclass
class ForwardOutput:
    features: list[Var]                 # per layer, [B, N, d] residual stream after the block
    attention: list[Var]                # per layer, [B, M_l, N, N] softmax output
    logits: list[Var]                   # per layer, [B, M_l, N, N] pre-softmax scores
    extra_attention: Var | None = None
    extra_logits: Var | None = None
    class_logits: Var | None = None     # [B, N, num_classes] when a token head exists
    config: ModelConfig | None = field(default=None, repr=False)

    def last_attention_logits(self) -> Var:
        """Logits of the attention the student is trained on (extra layer if present)."""
        return self.extra_logits if self.extra_logits is not None else self.logits[-1]

    def feature_array(self) -> np.ndarray:
        """[B, L, N, d] copy of all layer features."""
        return np.stack([f.value for f in self.features], axis=1)

    def attention_array(self) -> np.ndarray:
        """[B, L, M, N, N]; requires a uniform head count across layers."""
        heads = {a.shape[1] for a in self.attention}
        if len(heads) != 1:
            raise ValueError(f"layers have different head counts {sorted(heads)}; index .attention per layer")
        return np.stack([a.value for a in self.attention], axis=1)


def _attention_scores(y: Var, w: Var, b: Var, heads: int, with_values: bool):
    B, N, d = y.shape
    dh = d // heads
    proj = y @ w + b
    parts = 3 if with_values else 2

    def split(i):
        return proj[:, :, i * d:(i + 1) * d].reshape(B, N, heads, dh).transpose(0, 2, 1, 3)

    q, k = split(0), split(1)
    scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / float(np.sqrt(dh)))
    v = split(2) if parts == 3 else None
    return scores, v


def _check_params(config: ModelConfig, params: dict) -> None:
    shapes = param_shapes(config)
    missing = sorted(set(shapes) - set(params))
    if missing:
        raise NumericError(f"missing parameter(s): {', '.join(missing[:5])}{' ...' if len(missing) > 5 else ''}")
    for name, shape in shapes.items():
        if tuple(params[name].shape) != shape:
            raise NumericError(f"parameter {name!r} has shape {tuple(params[name].shape)}, expected {shape}")


def forward(config: ModelConfig, params: dict, images) -> ForwardOutput:
    """Run the encoder. ``params`` values may be ndarrays or :class:`Var` leaves."""
    _check_params(config, {k: (v.value if isinstance(v, Var) else v) for k, v in params.items()})
    P = {k: as_var(v) for k, v in params.items()}
    images = np.asarray(images)
    if images.ndim != 4 or images.shape[1:] != (*config.image, config.in_chans):
        raise NumericError(f"images must be [B, {config.image[0]}, {config.image[1]}, {config.in_chans}], "
                           f"got {images.shape}")
    dtype = P["patch_embed.w"].value.dtype
    x = as_var(patchify(images.astype(dtype), config.patch)) @ P["patch_embed.w"] + P["patch_embed.b"]
    if config.learnable_pos:
        x = x + P["pos_embed"]
    else:
        x = x + as_var(sincos_pos_embed(config.dim, config.grid).astype(dtype))
    B, N, d = x.shape
    out = ForwardOutput([], [], [], config=config)
    for i in range(config.depth):
        pre = f"blocks.{i}"
        heads = config.heads_at(i + 1)
        y = layer_norm(x, P[f"{pre}.norm1.w"], P[f"{pre}.norm1.b"], LN_EPS)
        scores, v = _attention_scores(y, P[f"{pre}.attn.qkv.w"], P[f"{pre}.attn.qkv.b"], heads, True)
        attn = softmax(scores, axis=-1)
        ctx = (attn @ v).transpose(0, 2, 1, 3).reshape(B, N, d)
        x = x + (ctx @ P[f"{pre}.attn.proj.w"] + P[f"{pre}.attn.proj.b"])
        y = layer_norm(x, P[f"{pre}.norm2.w"], P[f"{pre}.norm2.b"], LN_EPS)
        hidden = gelu(y @ P[f"{pre}.mlp.fc1.w"] + P[f"{pre}.mlp.fc1.b"])
        x = x + (hidden @ P[f"{pre}.mlp.fc2.w"] + P[f"{pre}.mlp.fc2.b"])
        out.logits.append(scores)
        out.attention.append(attn)
        out.features.append(x)
    if config.extra_attention_heads is not None:
        y = layer_norm(x, P["extra.norm.w"], P["extra.norm.b"], LN_EPS)
        scores, _ = _attention_scores(y, P["extra.attn.qkv.w"], P["extra.attn.qkv.b"],
                                      config.extra_attention_heads, False)
        out.extra_logits = scores
        out.extra_attention = softmax(scores, axis=-1)
    if config.num_classes:
        y = layer_norm(x, P["head.norm.w"], P["head.norm.b"], LN_EPS)
        out.class_logits = y @ P["head.w"] + P["head.b"]
    return out


def with_heads(config: ModelConfig, **changes) -> ModelConfig:
    return replace(config, **changes)
