"""NMI-guided attention distillation: losses, head alignment and the training loop."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from nmidistill.attention_metrics import DEFAULT_S, nmi_heads, select_target_layer
from nmidistill.errors import DivergenceError, NumericError
from nmidistill.imageops import bilinear_resize
from nmidistill.toy.autograd import Var, as_var, log_softmax, parameter
from nmidistill.toy.model import INIT_STD, ModelConfig, _trunc_normal, forward, init_params
from nmidistill.toy.optim import AdamWState, Schedule, adamw_step, lr_at

TEACHER_LOG_FLOOR = 1e-12
LOSS_KINDS = ("attention_kl", "feature_cosine", "attention_kl_multilayer")
ALIGNMENTS = ("adaptive_heads", "extra_attention_layer")


# ---------------------------------------------------------------------------
# losses


def attention_kl(teacher, student_logits: Var) -> Var:
    """Differentiable KL(teacher || student) over attention rows.

    ``teacher`` holds probabilities and ``student_logits`` pre-softmax scores,
    both ``[..., M, N, N]``. Rows are averaged, then heads (and any leading
    batch axes).
    """
    T = np.asarray(teacher.value if isinstance(teacher, Var) else teacher)
    S = as_var(student_logits)
    if T.ndim < 3 or S.ndim < 3:
        raise NumericError("attention tensors need at least [M, N, N] axes")
    if T.shape[-3] != S.shape[-3]:
        raise NumericError(f"teacher has {T.shape[-3]} heads but student has {S.shape[-3]}; "
                           "align them first with align_student_heads")
    if T.shape[-2:] != S.shape[-2:]:
        raise NumericError(f"token count mismatch: teacher {T.shape[-2:]} vs student {S.shape[-2:]}")
    if T.shape != S.shape:
        raise NumericError(f"teacher shape {T.shape} does not match student shape {S.shape}")
    T = T.astype(S.value.dtype, copy=False)
    teacher_log = np.log(np.maximum(T, TEACHER_LOG_FLOOR))
    self_term = float((T * teacher_log).sum(axis=-1).mean())
    cross = (log_softmax(S, axis=-1) * as_var(T)).sum(axis=-1).mean()
    return (-cross) + self_term


def attention_kl_loss(teacher, student, *, student_is_logits: bool = False) -> float:
    """Scalar KL loss. ``student`` is probabilities unless ``student_is_logits``."""
    S = np.asarray(student, dtype=np.float64)
    if not student_is_logits:
        S = np.log(np.maximum(S, np.finfo(np.float64).tiny))
    return float(attention_kl(np.asarray(teacher, dtype=np.float64), Var(S)).value)


def feature_cosine(teacher_feats, student_proj: Var) -> Var:
    """Mean over tokens of ``1 - cos(teacher, student)`` along the channel axis."""
    T = np.asarray(teacher_feats.value if isinstance(teacher_feats, Var) else teacher_feats)
    S = as_var(student_proj)
    if T.shape != S.shape:
        raise NumericError(f"feature shapes differ: teacher {T.shape} vs projected student {S.shape}")
    t_norm = np.sqrt((T * T).sum(-1, keepdims=True))
    s_norm = (S * S).sum(-1, keepdims=True).sqrt()
    if np.any(t_norm == 0) or np.any(s_norm.value == 0):
        raise NumericError("zero-norm token feature: cosine similarity is undefined")
    t_unit = T / t_norm
    cos = ((S / s_norm) * as_var(t_unit.astype(S.value.dtype))).sum(-1)
    return (1.0 - cos).mean()


def feature_cosine_loss(teacher_feats, student_proj) -> float:
    return float(feature_cosine(np.asarray(teacher_feats, dtype=np.float64),
                                Var(np.asarray(student_proj, dtype=np.float64))).value)


def concat_multilayer_targets(teacher_attention: Sequence[np.ndarray], layers: Sequence[int]) -> np.ndarray:
    """Concatenate the heads of 1-based ``layers`` (in the listed order) into one target.

    ``teacher_attention`` is indexable by 0-based layer, each entry ``[..., M, N, N]``.
    """
    layers = list(layers)
    if not layers:
        raise ValueError("need at least one layer to concatenate")
    blocks = [np.asarray(teacher_attention[l - 1]) for l in layers]
    n = blocks[0].shape[-1]
    for l, b in zip(layers, blocks):
        if b.shape[-1] != n or b.shape[-2] != n:
            raise NumericError(f"layer {l} has {b.shape[-1]} tokens, expected {n}")
    return np.concatenate(blocks, axis=-3)


# ---------------------------------------------------------------------------
# head alignment


def align_student_heads(config: ModelConfig, teacher_heads: int,
                        mode: str = "adaptive_heads") -> ModelConfig:
    """Give the student's distilled attention ``teacher_heads`` heads.

    ``adaptive_heads`` re-splits the last block (head dim = dim / teacher_heads,
    no new parameters); ``extra_attention_layer`` appends an attention-only layer.
    """
    if config.dim % teacher_heads:
        raise ValueError(f"student dim {config.dim} is not divisible by {teacher_heads} teacher heads")
    if mode == "adaptive_heads":
        if teacher_heads == config.heads:
            return replace(config, last_layer_heads=None)
        return replace(config, last_layer_heads=teacher_heads)
    if mode == "extra_attention_layer":
        return replace(config, extra_attention_heads=teacher_heads)
    raise ValueError(f"unknown head alignment {mode!r}; expected one of {ALIGNMENTS}")


def restore_student_heads(config: ModelConfig) -> ModelConfig:
    """Undo :func:`align_student_heads` for downstream use."""
    return replace(config, last_layer_heads=None, extra_attention_heads=None)


def export_student(params: dict[str, np.ndarray], config: ModelConfig):
    """Drop distillation-only parameters; returns ``(params, restored config)``."""
    keep = {k: v for k, v in params.items() if not k.startswith(("extra.", "distill."))}
    return keep, restore_student_heads(config)


# ---------------------------------------------------------------------------
# plan / log


@dataclass
class DistillPlan:
    teacher_target_layer: int | None = None      # 1-based; None selects by NMI
    s: float = DEFAULT_S
    restrict_to_latter_half: bool = True
    loss_kind: str = "attention_kl"
    multilayer_targets: list[int] | None = None
    head_alignment: str = "adaptive_heads"
    epochs: int = 100
    batch_size: int = 256
    base_lr: float = 1e-4
    warmup_epochs: int = 5
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.95
    seed: int = 0
    hflip: bool = True
    crop_scale: tuple[float, float] | None = (0.2, 1.0)
    selection_images: int = 64                   # images used to estimate teacher NMI

    def __post_init__(self):
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"loss_kind must be one of {LOSS_KINDS}, got {self.loss_kind!r}")
        if self.head_alignment not in ALIGNMENTS:
            raise ValueError(f"head_alignment must be one of {ALIGNMENTS}, got {self.head_alignment!r}")
        multi = self.loss_kind == "attention_kl_multilayer"
        if multi != bool(self.multilayer_targets):
            raise ValueError("multilayer_targets must be non-empty exactly for attention_kl_multilayer")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.crop_scale is not None:
            self.crop_scale = tuple(self.crop_scale)

    @classmethod
    def from_dict(cls, d: dict) -> "DistillPlan":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown plan field(s): {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["crop_scale"] is not None:
            d["crop_scale"] = list(d["crop_scale"])
        return d


@dataclass
class DistillLog:
    metric: str
    target_layers: list[int]
    teacher_target_nmi: float | None
    initial_heldout: float | None = None
    initial_student_nmi: float | None = None
    step_loss: list[float] = field(default_factory=list)
    step_lr: list[float] = field(default_factory=list)
    epoch_heldout: list[float] = field(default_factory=list)
    epoch_student_nmi: list[float] = field(default_factory=list)

    def to_jsonl(self) -> str:
        def dump(obj):
            return json.dumps(obj, sort_keys=True, separators=(",", ":")) + "\n"

        lines = [dump({"kind": "meta", "metric": self.metric, "target_layers": self.target_layers,
                       "teacher_target_nmi": self.teacher_target_nmi,
                       "initial_heldout": self.initial_heldout,
                       "initial_student_nmi": self.initial_student_nmi})]
        for i, (loss, lr) in enumerate(zip(self.step_loss, self.step_lr)):
            lines.append(dump({"kind": "step", "step": i, "loss": loss, "lr": lr}))
        for e, (h, nmi) in enumerate(zip(self.epoch_heldout, self.epoch_student_nmi), start=1):
            lines.append(dump({"kind": "epoch", "epoch": e, "heldout": h, "student_nmi": nmi}))
        return "".join(lines)

    @classmethod
    def from_jsonl(cls, text: str) -> "DistillLog":
        log = None
        for line in text.splitlines():
            if not line.strip():
                continue
            obj = json.loads(line)
            kind = obj.pop("kind")
            if kind == "meta":
                log = cls(**obj)
            elif log is None:
                raise ValueError("log must start with a meta line")
            elif kind == "step":
                log.step_loss.append(obj["loss"])
                log.step_lr.append(obj["lr"])
            elif kind == "epoch":
                log.epoch_heldout.append(obj["heldout"])
                log.epoch_student_nmi.append(obj["student_nmi"])
            else:
                raise ValueError(f"unknown log line kind {kind!r}")
        if log is None:
            raise ValueError("empty log")
        return log


@dataclass
class DistillResult:
    params: dict[str, np.ndarray]       # includes distillation-only tensors; see export_student
    config: ModelConfig                 # aligned student config used in training
    log: DistillLog
    plan: DistillPlan


# ---------------------------------------------------------------------------
# augmentation


def augment(images: np.ndarray, rng: np.random.Generator, hflip: bool,
            crop_scale: tuple[float, float] | None) -> np.ndarray:
    """Random resized crop (square-ish aspect 3/4..4/3) then random horizontal flip."""
    out = np.empty_like(images)
    B, H, W, _ = images.shape
    for i in range(B):
        img = images[i]
        if crop_scale is not None:
            area = H * W * rng.uniform(*crop_scale)
            ratio = np.exp(rng.uniform(np.log(3 / 4), np.log(4 / 3)))
            ch = int(round(min(H, max(1, np.sqrt(area / ratio)))))
            cw = int(round(min(W, max(1, np.sqrt(area * ratio)))))
            top = int(rng.integers(0, H - ch + 1))
            left = int(rng.integers(0, W - cw + 1))
            img = bilinear_resize(img[top:top + ch, left:left + cw], H, W)
        if hflip and rng.random() < 0.5:
            img = img[:, ::-1]
        out[i] = img
    return out


# ---------------------------------------------------------------------------
# training


def _cast(params: dict, dtype) -> dict:
    return {k: v.astype(dtype) for k, v in params.items()}


def teacher_layer_nmi(teacher_config: ModelConfig, teacher_params: dict, images: np.ndarray,
                      batch: int = 32) -> np.ndarray:
    """Per-layer teacher NMI (mean over heads, then images), computed in float64."""
    p64 = _cast(teacher_params, np.float64)
    total = np.zeros(teacher_config.depth)
    for start in range(0, len(images), batch):
        out = forward(teacher_config, p64, images[start:start + batch].astype(np.float64))
        for l, a in enumerate(out.attention):
            total[l] += nmi_heads(a.value).mean(axis=-1).sum()
    return total / len(images)


def _student_target_logits(out) -> Var:
    return out.last_attention_logits()


def _student_attention(out) -> np.ndarray:
    return out.extra_attention.value if out.extra_attention is not None else out.attention[-1].value


class _Objective:
    """Builds teacher targets and the differentiable loss for one plan."""

    def __init__(self, plan: DistillPlan, teacher_config, teacher_params, target_layers, teacher_dim):
        self.plan = plan
        self.teacher_config = teacher_config
        self.teacher_params = teacher_params
        self.target_layers = target_layers
        self.teacher_dim = teacher_dim

    def targets(self, images: np.ndarray, params=None) -> np.ndarray:
        params = self.teacher_params if params is None else params
        out = forward(self.teacher_config, params, images)
        if self.plan.loss_kind == "feature_cosine":
            return out.features[self.target_layers[0] - 1].value
        return concat_multilayer_targets([a.value for a in out.attention], self.target_layers)

    def loss(self, student_config, P, images, target) -> Var:
        out = forward(student_config, P, images)
        if self.plan.loss_kind == "feature_cosine":
            proj = out.features[-1] @ P["distill.proj.w"] + P["distill.proj.b"]
            return feature_cosine(target, proj)
        return attention_kl(target, _student_target_logits(out))


def run_distillation(teacher_config: ModelConfig, teacher_params: dict, student_config: ModelConfig,
                     train_images: np.ndarray, heldout_images: np.ndarray, plan: DistillPlan,
                     student_init: dict | None = None, selection_images: np.ndarray | None = None,
                     teacher_targets: np.ndarray | None = None, progress=None) -> DistillResult:
    """Distil teacher attention (or features) into a randomly initialised student.

    Images are standardised float arrays ``[n, H, W, C]``. ``teacher_targets``
    optionally supplies pre-computed per-image targets ``[n, M, N, N]`` for
    ``train_images`` (augmentation is then disabled since targets are fixed).
    """
    train_images = np.asarray(train_images, dtype=np.float32)
    heldout_images = np.asarray(heldout_images, dtype=np.float32)
    if selection_images is None:
        selection_images = train_images[: plan.selection_images]

    # target layer(s)
    teacher_nmi = None
    if plan.loss_kind == "attention_kl_multilayer":
        target_layers = list(plan.multilayer_targets)
    elif plan.teacher_target_layer is not None:
        target_layers = [plan.teacher_target_layer]
    else:
        teacher_nmi = teacher_layer_nmi(teacher_config, teacher_params, selection_images)
        target_layers = [select_target_layer(teacher_nmi, plan.s, plan.restrict_to_latter_half)]
    for l in target_layers:
        if not 1 <= l <= teacher_config.depth:
            raise ValueError(f"target layer {l} outside teacher depth {teacher_config.depth}")
    if teacher_nmi is None and plan.loss_kind != "feature_cosine":
        teacher_nmi = teacher_layer_nmi(teacher_config, teacher_params, selection_images)
    target_nmi = float(np.mean([teacher_nmi[l - 1] for l in target_layers])) if teacher_nmi is not None else None

    # student config and parameters
    rng = np.random.default_rng(plan.seed)
    if plan.loss_kind == "feature_cosine":
        cfg = student_config
    else:
        total_heads = sum(teacher_config.heads_at(l) for l in target_layers)
        cfg = align_student_heads(student_config, total_heads, plan.head_alignment)
    params = init_params(cfg, seed=plan.seed) if student_init is None else {
        k: np.array(v, dtype=np.float32) for k, v in student_init.items()}
    fresh = init_params(cfg, seed=plan.seed)
    for k, v in fresh.items():
        params.setdefault(k, v)
    if plan.loss_kind == "feature_cosine":
        params.setdefault("distill.proj.w",
                          _trunc_normal(rng, (cfg.dim, teacher_config.dim), INIT_STD).astype(np.float32))
        params.setdefault("distill.proj.b", np.zeros(teacher_config.dim, dtype=np.float32))

    objective = _Objective(plan, teacher_config, _cast(teacher_params, np.float32), target_layers,
                           teacher_config.dim)
    teacher64 = _cast(teacher_params, np.float64)
    heldout64 = heldout_images.astype(np.float64)
    heldout_targets = objective.targets(heldout64, teacher64) if len(heldout64) else None

    def evaluate(p):
        if heldout_targets is None:
            return float("nan"), float("nan")
        p64 = _cast(p, np.float64)
        loss = float(objective.loss(cfg, p64, heldout64, heldout_targets).value)
        if plan.loss_kind == "feature_cosine":
            return loss, float("nan")
        out = forward(cfg, p64, heldout64)
        nmi = float(nmi_heads(_student_attention(out)).mean())
        return loss, nmi

    metric = "feature_cosine" if plan.loss_kind == "feature_cosine" else "attention_kl"
    log = DistillLog(metric=metric, target_layers=target_layers, teacher_target_nmi=target_nmi)
    if plan.epochs == 0:
        return DistillResult(params, cfg, log, plan)
    log.initial_heldout, log.initial_student_nmi = evaluate(params)

    n = len(train_images)
    steps_per_epoch = -(-n // plan.batch_size)
    schedule = Schedule(plan.base_lr, plan.batch_size, plan.epochs * steps_per_epoch,
                        plan.warmup_epochs * steps_per_epoch)
    state = AdamWState(beta1=plan.beta1, beta2=plan.beta2, weight_decay=plan.weight_decay)
    step = 0
    for epoch in range(plan.epochs):
        order = rng.permutation(n)
        for start in range(0, n, plan.batch_size):
            idx = np.sort(order[start:start + plan.batch_size])
            if teacher_targets is not None:
                batch = train_images[idx]
                target = np.asarray(teacher_targets[idx], dtype=np.float32)
            else:
                batch = augment(train_images[idx], rng, plan.hflip, plan.crop_scale)
                target = objective.targets(batch)
            leaves = {k: parameter(v, name=k) for k, v in params.items()}
            loss = objective.loss(cfg, leaves, batch, target)
            value = float(loss.value)
            if not np.isfinite(value):
                raise DivergenceError(step, value)
            loss.backward()
            grads = {k: (v.grad if v.grad is not None else np.zeros_like(v.value)) for k, v in leaves.items()}
            lr = lr_at(step, schedule)
            params = adamw_step(params, grads, state, lr)
            log.step_loss.append(value)
            log.step_lr.append(lr)
            step += 1
        heldout, nmi = evaluate(params)
        log.epoch_heldout.append(heldout)
        log.epoch_student_nmi.append(nmi)
        if progress is not None:
            progress(epoch + 1, heldout, nmi)
    return DistillResult(params, cfg, log, plan)
