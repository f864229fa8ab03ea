"""Desk-scale distillation fixture: synthetic corpus, a supervised teacher, and the pinned plan."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from nmidistill.distill import DistillPlan, augment
from nmidistill.shapes import SHAPE_CLASSES, make_shapes, normalize_images, patch_labels
from nmidistill.toy.autograd import log_softmax, parameter
from nmidistill.toy.model import ModelConfig, forward, init_params
from nmidistill.toy.optim import AdamWState, Schedule, adamw_step, lr_at

IMAGE = (32, 32)
PATCH = 4

TEACHER_CONFIG = ModelConfig(depth=8, dim=64, heads=8, patch=PATCH, image=IMAGE,
                             num_classes=len(SHAPE_CLASSES))
STUDENT_CONFIG = ModelConfig(depth=4, dim=32, heads=4, patch=PATCH, image=IMAGE)


@dataclass(frozen=True)
class TeacherRecipe:
    steps: int = 300
    batch_size: int = 32
    base_lr: float = 0.04          # peak lr = base_lr * batch / 256 = 5e-3
    warmup_steps: int = 30
    weight_decay: float = 0.05
    input_noise: float = 0.5       # std of Gaussian noise on standardised pixels
    patch_drop: float = 0.0        # fraction of patches zeroed per image
    seed: int = 0


def token_cross_entropy(class_logits, labels: np.ndarray):
    """Mean per-token cross entropy; ``labels`` is [B, N] integer classes."""
    ls = log_softmax(class_logits, axis=-1)
    onehot = np.eye(class_logits.shape[-1], dtype=class_logits.value.dtype)[labels]
    return -(ls * onehot).sum(-1).mean()


def train_teacher(config: ModelConfig, images: np.ndarray, labels: np.ndarray,
                  recipe: TeacherRecipe = TeacherRecipe()) -> dict[str, np.ndarray]:
    """Supervised per-token shape segmentation at patch resolution."""
    rng = np.random.default_rng(recipe.seed)
    params = init_params(config, seed=recipe.seed)
    state = AdamWState(weight_decay=recipe.weight_decay)
    schedule = Schedule(recipe.base_lr, recipe.batch_size, recipe.steps, recipe.warmup_steps)
    tokens = patch_labels(labels, config.patch)
    x = normalize_images(images)
    for step in range(recipe.steps):
        idx = np.sort(rng.choice(len(x), size=recipe.batch_size, replace=False))
        batch, target = x[idx], tokens[idx]
        flip = rng.random(len(idx)) < 0.5
        batch = np.where(flip[:, None, None, None], batch[:, :, ::-1], batch)
        grid = target.reshape(len(idx), *config.grid)
        target = np.where(flip[:, None, None], grid[:, :, ::-1], grid).reshape(len(idx), -1)
        batch = _corrupt(batch, config, recipe, rng)
        leaves = {k: parameter(v) for k, v in params.items()}
        loss = token_cross_entropy(forward(config, leaves, batch).class_logits, target)
        loss.backward()
        grads = {k: (v.grad if v.grad is not None else np.zeros_like(v.value)) for k, v in leaves.items()}
        params = adamw_step(params, grads, state, lr_at(step, schedule))
    return params


def _corrupt(batch: np.ndarray, config: ModelConfig, recipe: TeacherRecipe, rng: np.random.Generator):
    """Noise and patch dropout make per-token labels depend on neighbouring tokens."""
    if recipe.input_noise:
        batch = batch + rng.normal(0.0, recipe.input_noise, batch.shape).astype(batch.dtype)
    if recipe.patch_drop:
        h, w = config.grid
        keep = (rng.random((len(batch), h, w)) >= recipe.patch_drop).astype(batch.dtype)
        keep = np.repeat(np.repeat(keep, config.patch, axis=1), config.patch, axis=2)
        batch = batch * keep[..., None]
    return batch


def token_accuracy(config: ModelConfig, params: dict, images: np.ndarray, labels: np.ndarray) -> float:
    out = forward(config, params, normalize_images(images))
    pred = out.class_logits.value.argmax(-1)
    return float((pred == patch_labels(labels, config.patch)).mean())


@dataclass
class DeskFixture:
    teacher_config: ModelConfig
    teacher_params: dict
    student_config: ModelConfig
    train_images: np.ndarray       # standardised float32
    heldout_images: np.ndarray
    plan: DistillPlan


DESK_PLAN = DistillPlan(
    loss_kind="attention_kl",
    epochs=10,
    batch_size=32,
    base_lr=0.08,                  # peak lr 1e-2 after batch/256 scaling
    warmup_epochs=1,
    weight_decay=0.05,
    seed=0,
    hflip=True,
    crop_scale=None,
    selection_images=64,
)


def build_desk_fixture(n_train: int = 640, n_heldout: int = 64, seed: int = 0,
                       recipe: TeacherRecipe = TeacherRecipe(), plan: DistillPlan = DESK_PLAN) -> DeskFixture:
    """Generate the corpus and train the teacher; deterministic for a given seed."""
    images, labels = make_shapes(n_train + n_heldout, IMAGE, seed=seed)
    teacher = train_teacher(TEACHER_CONFIG, images[:n_train], labels[:n_train], replace(recipe, seed=seed))
    x = normalize_images(images)
    return DeskFixture(TEACHER_CONFIG, teacher, STUDENT_CONFIG, x[:n_train], x[n_train:], plan)
