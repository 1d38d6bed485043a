"""Distillation training: teacher pre-training, four student modes, logging.

Modes
-----
``baseline``      supervised segmentation only, no teacher involved.
``kl``            softened KL on the raw supervision maps, both scales.
``attention_kd``  softened KL on attention maps, both scales.
``full``          attention matching plus symmetric-structure matching
                  (structures from the fine scale only).

The optimizer is decoupled-weight-decay Adam with bias correction. The
teacher is loaded once, never mutated, and its supervision views are
precomputed per dataset since its forward pass is deterministic.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import kdmath as km
from . import metrics
from .data import batch_iterator, stack_samples
from .models import (
    Checkpoint,
    ModelConfig,
    SegModel,
    build_model,
    load_checkpoint,
    save_checkpoint,
)

MODES = ("baseline", "kl", "attention_kd", "full")
SEG_LOSS_KINDS = ("bce_dice", "jaccard")


class DivergedError(Exception):
    """Training produced a non-finite loss; the message names the step."""


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "full"
    epochs: int = 120
    batch_size: int = 16
    learning_rate: float = 1e-4
    weight_decay: float = 1e-4
    temperature: float = 2.0
    kd_weight: float = 0.2
    seg_weight: float = 0.8
    seed: int = 0
    gradient_clip: float | None = None
    seg_loss_kind: str = "bce_dice"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.learning_rate <= 0.0 or self.weight_decay < 0.0:
            raise ValueError("learning_rate must be positive, weight_decay nonnegative")
        if not (math.isfinite(self.temperature) and self.temperature > 0.0):
            raise ValueError("temperature must be a positive finite number")
        if abs(self.kd_weight + self.seg_weight - 1.0) > 1e-12:
            raise ValueError("kd_weight + seg_weight must equal 1")
        if self.gradient_clip is not None and self.gradient_clip <= 0.0:
            raise ValueError("gradient_clip must be positive when set")
        if self.seg_loss_kind not in SEG_LOSS_KINDS:
            raise ValueError(f"seg_loss_kind must be one of {SEG_LOSS_KINDS}")


@dataclass
class TrainHistory:
    """Per-step loss records plus per-epoch validation and timing."""

    steps: list = field(default_factory=list)          # (epoch, step, LossBreakdown)
    val: list = field(default_factory=list)            # (epoch, MetricReport)
    epoch_seconds: list = field(default_factory=list)  # wall-clock, in memory only

    def final_breakdown(self) -> km.LossBreakdown:
        return self.steps[-1][2]


class AdamW:
    """Adam with decoupled weight decay and bias correction."""

    def __init__(self, params, learning_rate, weight_decay,
                 beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = learning_rate
        self.wd = weight_decay
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params, grads):
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in params.items():
            g = grads[name]
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * (g * g)
            m_hat = self.m[name] / bc1
            v_hat = self.v[name] / bc2
            params[name] = p - self.lr * (m_hat / (np.sqrt(v_hat) + self.eps) + self.wd * p)


def clip_gradients(grads: dict, max_norm: float) -> dict:
    """Scale gradients so their global L2 norm is at most max_norm."""
    total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if total <= max_norm or total == 0.0:
        return grads
    scale = max_norm / total
    return {k: g * scale for k, g in grads.items()}


# -------------------------------------------------- teacher supervision views

@dataclass
class TeacherViews:
    """Precomputed teacher-side targets, index-aligned with the dataset."""

    raw: dict | None = None     # {scale: (N, h, w)}
    attn: dict | None = None
    struct: np.ndarray | None = None  # (N, s2, s2), fine scale only


def derive_teacher_views(raw_maps, mode: str) -> TeacherViews:
    """Build the per-mode targets from raw teacher supervision maps."""
    if mode == "baseline":
        return TeacherViews()
    if mode == "kl":
        return TeacherViews(raw=raw_maps)
    attn = {i: km.attention_map(raw_maps[i]) for i in (1, 2)}
    if mode == "attention_kd":
        return TeacherViews(attn=attn)
    return TeacherViews(attn=attn, struct=km.symmetric_structure(attn[2]))


def teacher_views_for_samples(teacher: SegModel, samples, mode: str,
                              batch_size: int = 32) -> TeacherViews:
    """Run the frozen teacher over the dataset once and cache its targets."""
    if mode == "baseline" or not samples:
        return TeacherViews()
    parts = {1: [], 2: []}
    for images, _, _ in batch_iterator(samples, batch_size, shuffle=False):
        maps = teacher.forward(images)
        parts[1].append(maps[1])
        parts[2].append(maps[2])
    raw = {i: np.concatenate(parts[i]) for i in (1, 2)}
    return derive_teacher_views(raw, mode)


def _slice_views(views: TeacherViews, idx: np.ndarray) -> TeacherViews:
    take = lambda d: None if d is None else {i: d[i][idx] for i in d}
    return TeacherViews(
        raw=take(views.raw),
        attn=take(views.attn),
        struct=None if views.struct is None else views.struct[idx],
    )


# ------------------------------------------------------------ loss dispatch

def _mode_losses(student_maps, views: TeacherViews, ground_truth,
                 config: TrainConfig, want_grads: bool):
    """Per-mode losses and (optionally) gradients w.r.t. the student maps."""
    t = config.temperature
    l_seg = km.seg_loss(student_maps, ground_truth, config.seg_loss_kind)
    d_maps = None
    if want_grads:
        d_seg = km.seg_loss_grad(student_maps, ground_truth, config.seg_loss_kind)
        d_maps = {i: config.seg_weight * d_seg[i] for i in (1, 2)}

    l_at = 0.0
    l_sgm = 0.0
    if config.mode == "kl":
        l_at = km.attention_kd_loss(views.raw, student_maps, t)
        if want_grads:
            d_kd = km.attention_kd_loss_grad(views.raw, student_maps, t)
            for i in (1, 2):
                d_maps[i] += config.kd_weight * d_kd[i]
    elif config.mode in ("attention_kd", "full"):
        a_s = {i: km.attention_map(student_maps[i]) for i in (1, 2)}
        l_at = km.attention_kd_loss(views.attn, a_s, t)
        d_attn = km.attention_kd_loss_grad(views.attn, a_s, t) if want_grads else None
        if config.mode == "full":
            s_s = km.symmetric_structure(a_s[2])
            l_sgm = km.sgm_loss(views.struct, s_s, t)
            if want_grads:
                d_struct = km.sgm_loss_grad(views.struct, s_s, t)
                d_attn[2] = d_attn[2] + km.symmetric_structure_vjp(a_s[2], d_struct)
        if want_grads:
            for i in (1, 2):
                d_maps[i] += config.kd_weight * km.attention_map_vjp(
                    student_maps[i], d_attn[i]
                )

    breakdown = km.total_kdas_loss(l_at, l_sgm, l_seg, config.kd_weight, config.seg_weight)
    return breakdown, d_maps


def loss_step(teacher_maps, student_maps, ground_truth, config: TrainConfig) -> km.LossBreakdown:
    """Evaluate the mode's LossBreakdown for one batch of supervision maps.

    ``teacher_maps`` are raw supervision logit maps keyed by scale; they
    may be None in baseline mode, which never reads them.
    """
    if config.mode == "baseline":
        views = TeacherViews()
    else:
        if teacher_maps is None:
            raise ValueError(f"mode {config.mode!r} requires teacher maps")
        raw = {i: np.asarray(teacher_maps[i], dtype=np.float64) for i in (1, 2)}
        views = derive_teacher_views(raw, config.mode)
    breakdown, _ = _mode_losses(student_maps, views, ground_truth, config, want_grads=False)
    return breakdown


# ------------------------------------------------------------ training loop

def predict_logits(model: SegModel, images) -> np.ndarray:
    """Full-resolution logits: the fine-scale map upsampled to input size."""
    maps = model.forward(images)
    if not np.all(np.isfinite(maps[2])):
        raise DivergedError("model emitted non-finite logits")
    return km.bilinear_resize(maps[2], np.asarray(images).shape[1])


def evaluate_model(model: SegModel, samples, batch_size: int = 32) -> metrics.MetricReport:
    """mDice/mIoU of binarized full-resolution predictions over samples."""
    preds = []
    gts = []
    for images, masks, _ in batch_iterator(samples, batch_size, shuffle=False):
        preds.append(metrics.binarize(predict_logits(model, images)))
        gts.append(masks.astype(bool))
    return metrics.evaluate(np.concatenate(preds), np.concatenate(gts))


def _train(model: SegModel, views: TeacherViews, samples, config: TrainConfig,
           val_samples) -> TrainHistory:
    """Optimize ``model`` in place; returns history. Best-epoch parameters
    (by validation mDice) are restored into the model afterward."""
    opt = AdamW(model.params, config.learning_rate, config.weight_decay)
    history = TrainHistory()
    images_all, masks_all, ids = stack_samples(samples)
    index_of = {sid: k for k, sid in enumerate(ids)}
    if len(index_of) != len(ids):
        raise ValueError("sample ids must be unique for training")

    best_dice = -1.0
    best_params = {k: v.copy() for k, v in model.params.items()}
    best_epoch = 0
    for epoch in range(config.epochs):
        started = time.perf_counter()
        step = 0
        for _, _, batch_ids in batch_iterator(samples, config.batch_size,
                                              seed=[config.seed, epoch]):
            idx = np.array([index_of[sid] for sid in batch_ids])
            batch_views = _slice_views(views, idx)
            maps, cache = model.forward_with_cache(images_all[idx])
            # beyond ~1e150 the attention scores z@z.T overflow float64
            ok = all(np.all(np.isfinite(maps[i]))
                     and np.max(np.abs(maps[i])) < 1e150 for i in (1, 2))
            if not ok:
                raise DivergedError(
                    f"non-finite supervision maps at epoch {epoch}, step {step}"
                )
            breakdown, d_maps = _mode_losses(
                maps, batch_views, masks_all[idx], config, want_grads=True
            )
            if not math.isfinite(breakdown.total):
                raise DivergedError(
                    f"non-finite loss at epoch {epoch}, step {step}: {breakdown}"
                )
            grads = model.backward(cache, d_maps)
            if config.gradient_clip is not None:
                grads = clip_gradients(grads, config.gradient_clip)
            opt.step(model.params, grads)
            if not all(np.all(np.isfinite(p)) for p in model.params.values()):
                raise DivergedError(
                    f"parameters became non-finite at epoch {epoch}, step {step}"
                )
            history.steps.append((epoch, step, breakdown))
            step += 1

        try:
            report = evaluate_model(model, val_samples)
        except DivergedError as exc:
            raise DivergedError(f"{exc} (validation after epoch {epoch})") from None
        history.val.append((epoch, report))
        history.epoch_seconds.append(time.perf_counter() - started)
        if report.m_dice > best_dice:
            best_dice = report.m_dice
            best_epoch = epoch
            best_params = {k: v.copy() for k, v in model.params.items()}

    model.params = best_params
    model.meta = dict(model.meta)
    model.meta.update({"best_epoch": best_epoch, "best_val_m_dice": best_dice})
    return history


def train_teacher(model_config: ModelConfig, dataset, train_config: TrainConfig,
                  val_samples=None, out_path=None):
    """Supervised teacher training (mode forced to baseline).

    Returns (Checkpoint, TrainHistory); the checkpoint holds the best
    validation-mDice epoch and is written to ``out_path`` when given.
    """
    config = replace(train_config, mode="baseline")
    model = build_model(model_config)
    model.meta = {"role": "teacher", "mode": config.mode, "epochs": config.epochs}
    history = _train(model, TeacherViews(), dataset, config,
                     val_samples if val_samples is not None else dataset)
    ckpt = _save(model, out_path)
    return ckpt, history


def distill(teacher_ckpt, student_config: ModelConfig, dataset,
            train_config: TrainConfig, val_samples=None, out_path=None):
    """Train a student against a frozen teacher checkpoint.

    ``teacher_ckpt`` is a checkpoint path (or an already loaded model).
    Teacher supervision views are computed once up front; the teacher is
    never mutated. Returns (Checkpoint, TrainHistory).
    """
    teacher = teacher_ckpt if isinstance(teacher_ckpt, SegModel) else load_checkpoint(teacher_ckpt)
    student = build_model(student_config)
    if train_config.mode != "baseline" and teacher.map_sides() != student.map_sides():
        raise ValueError(
            f"teacher emits map sides {teacher.map_sides()}, student {student.map_sides()}"
        )
    student.meta = {"role": "student", "mode": train_config.mode,
                    "epochs": train_config.epochs,
                    "temperature": train_config.temperature}
    views = teacher_views_for_samples(teacher, dataset, train_config.mode,
                                      batch_size=max(train_config.batch_size, 32))
    history = _train(student, views, dataset, train_config,
                     val_samples if val_samples is not None else dataset)
    ckpt = _save(student, out_path)
    return ckpt, history


def _save(model: SegModel, out_path) -> Checkpoint:
    if out_path is None:
        import tempfile

        with tempfile.TemporaryDirectory() as tmp:
            return save_checkpoint(model, Path(tmp) / "model.kdas")
    Path(out_path).parent.mkdir(parents=True, exist_ok=True)
    return save_checkpoint(model, out_path)


# ------------------------------------------------------------ file emission

def write_history(history: TrainHistory, path) -> None:
    """Line-delimited JSON, one record per training step."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for epoch, step, lb in history.steps:
            fh.write(json.dumps({
                "epoch": epoch, "step": step,
                "l_at": lb.l_at, "l_sgm": lb.l_sgm,
                "l_seg": lb.l_seg, "total": lb.total,
            }) + "\n")


def write_validation(history: TrainHistory, path) -> None:
    """Line-delimited JSON, one record per validation epoch."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for epoch, report in history.val:
            fh.write(json.dumps({
                "epoch": epoch, "m_dice": report.m_dice, "m_iou": report.m_iou,
            }) + "\n")
