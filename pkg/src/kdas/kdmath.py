"""Differentiable math for attention-guided segmentation distillation.

Plain numpy on float64 arrays. Supervision maps are square logit
matrices ``(s, s)``; batched variants are ``(n, s, s)``. Batch-level
losses take a mapping ``{scale: maps}`` with scale 1 (coarse) and
scale 2 (fine). Every loss has a ``*_grad`` companion returning the
analytic gradient with respect to the student-side argument only;
teacher-side inputs are constants.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Mapping

import numpy as np

SCALES = (1, 2)

_SIG_LO = np.finfo(np.float64).tiny
_SIG_HI = 1.0 - np.finfo(np.float64).epsneg  # largest double below 1.0


@dataclass(frozen=True)
class LossBreakdown:
    """The four scalars of one objective evaluation."""

    l_at: float
    l_sgm: float
    l_seg: float
    total: float


def _check_temperature(t: float) -> float:
    t = float(t)
    if not math.isfinite(t) or t <= 0.0:
        raise ValueError(f"temperature must be a positive finite number, got {t}")
    return t


def _as_map(m, name: str) -> np.ndarray:
    a = np.asarray(m, dtype=np.float64)
    if a.ndim not in (2, 3):
        raise ValueError(f"{name} must be a matrix or a batch of matrices, got ndim={a.ndim}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite entries")
    return a


def _as_square_map(m, name: str) -> np.ndarray:
    a = _as_map(m, name)
    if a.shape[-1] != a.shape[-2]:
        raise ValueError(f"{name} must be square, got shape {a.shape}")
    return a


def _batched(a: np.ndarray) -> np.ndarray:
    """View a single matrix as a batch of one."""
    return a[None] if a.ndim == 2 else a


def sigmoid(x):
    """Numerically stable logistic function."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def row_softmax(m, t: float = 1.0) -> np.ndarray:
    """Softmax of each row of ``m`` after dividing logits by ``t``.

    Row maxima are subtracted before exponentiation, so arbitrary logit
    magnitudes are safe. Shared kernel for the attention scores and the
    temperature softening inside the KL losses.
    """
    t = _check_temperature(t)
    a = np.asarray(m, dtype=np.float64)
    if a.ndim < 1:
        raise ValueError("row_softmax expects at least a vector")
    if not np.all(np.isfinite(a)):
        raise ValueError("row_softmax input contains non-finite entries")
    z = a / t
    z -= z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def row_softmax_vjp(p: np.ndarray, dp: np.ndarray, t: float = 1.0) -> np.ndarray:
    """Backward through row_softmax given its output ``p``."""
    inner = (dp * p).sum(axis=-1, keepdims=True)
    return p * (dp - inner) / t


def _log_softmax(rows: np.ndarray, t: float) -> np.ndarray:
    z = rows / t
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _kl_rows(teacher_rows: np.ndarray, student_rows: np.ndarray, t: float) -> np.ndarray:
    """Per-row KL(softmax(teacher/t) || softmax(student/t)) for (n, k) arrays."""
    lp = _log_softmax(teacher_rows, t)
    lq = _log_softmax(student_rows, t)
    p = np.exp(lp)
    terms = np.where(p > 0.0, p * (lp - lq), 0.0)
    # float cancellation can leave a ~-1e-16 residue when p == q
    return np.maximum(terms.sum(axis=-1), 0.0)


def _kl_rows_grad(teacher_rows: np.ndarray, student_rows: np.ndarray, t: float) -> np.ndarray:
    p = np.exp(_log_softmax(teacher_rows, t))
    q = np.exp(_log_softmax(student_rows, t))
    return (q - p) / t


def kl_softened(teacher_logits, student_logits, t: float = 1.0) -> float:
    """Temperature-softened KL divergence between two logit vectors.

    Both vectors are divided by ``t`` and pushed through a softmax; the
    result is KL(teacher || student). The teacher is the reference
    distribution and is treated as a constant by ``kl_softened_grad``.
    The conventional t^2 rescaling is applied by the callers, not here.
    """
    t = _check_temperature(t)
    u = np.asarray(teacher_logits, dtype=np.float64).ravel()
    v = np.asarray(student_logits, dtype=np.float64).ravel()
    if u.shape != v.shape:
        raise ValueError(f"logit length mismatch: {u.shape[0]} vs {v.shape[0]}")
    if u.size < 1:
        raise ValueError("kl_softened needs at least one logit")
    if not (np.all(np.isfinite(u)) and np.all(np.isfinite(v))):
        raise ValueError("kl_softened inputs must be finite")
    return float(_kl_rows(u[None], v[None], t)[0])


def kl_softened_grad(teacher_logits, student_logits, t: float = 1.0) -> np.ndarray:
    """Gradient of kl_softened with respect to the student logits."""
    t = _check_temperature(t)
    u = np.asarray(teacher_logits, dtype=np.float64)
    v = np.asarray(student_logits, dtype=np.float64)
    if u.ravel().shape != v.ravel().shape:
        raise ValueError(f"logit length mismatch: {u.size} vs {v.size}")
    return _kl_rows_grad(u.ravel()[None], v.ravel()[None], t)[0].reshape(v.shape)


def attention_map(z) -> np.ndarray:
    """Self-attention transform of a square supervision map.

    ``A = row_softmax(z z^T / sqrt(d_k)) z`` with ``d_k`` equal to the
    column count of ``z``. Each output row is a convex combination of
    the rows of ``z``. Accepts a single map or a batch ``(n, s, s)``.
    """
    a = _as_square_map(z, "supervision map")
    d_k = a.shape[-1]
    scores = a @ np.swapaxes(a, -1, -2) / math.sqrt(d_k)
    p = row_softmax(scores, 1.0)
    return p @ a


def attention_map_vjp(z, d_attn: np.ndarray) -> np.ndarray:
    """Backward through attention_map: gradient w.r.t. the source map."""
    a = _as_square_map(z, "supervision map")
    d_attn = np.asarray(d_attn, dtype=np.float64)
    d_k = a.shape[-1]
    at = np.swapaxes(a, -1, -2)
    scores = a @ at / math.sqrt(d_k)
    p = row_softmax(scores, 1.0)
    dz = np.swapaxes(p, -1, -2) @ d_attn          # value path
    dp = d_attn @ at
    dscores = row_softmax_vjp(p, dp, 1.0)
    dz += (dscores + np.swapaxes(dscores, -1, -2)) @ a / math.sqrt(d_k)
    return dz


def _check_scale_pairs(teacher_maps: Mapping, student_maps: Mapping):
    if set(teacher_maps) != set(SCALES) or set(student_maps) != set(SCALES):
        raise ValueError(
            f"scale sets must both be {set(SCALES)}, got teacher={sorted(teacher_maps)} "
            f"student={sorted(student_maps)}"
        )
    pairs = {}
    batch = None
    for i in SCALES:
        tm = _batched(_as_map(teacher_maps[i], f"teacher maps at scale {i}"))
        sm = _batched(_as_map(student_maps[i], f"student maps at scale {i}"))
        if tm.shape != sm.shape:
            raise ValueError(
                f"teacher/student shape mismatch at scale {i}: {tm.shape} vs {sm.shape}"
            )
        if batch is None:
            batch = tm.shape[0]
        elif tm.shape[0] != batch:
            raise ValueError("batch size differs between scales")
        pairs[i] = (tm, sm)
    return pairs, batch


def attention_kd_loss(teacher_maps: Mapping, student_maps: Mapping, t: float = 1.0) -> float:
    """Attention-matching distillation loss over both supervision scales.

    Mean over the batch, summed over scales, of the softened KL between
    flattened teacher and student attention maps, rescaled by t^2.
    """
    t = _check_temperature(t)
    pairs, batch = _check_scale_pairs(teacher_maps, student_maps)
    total = 0.0
    for tm, sm in pairs.values():
        kls = _kl_rows(tm.reshape(batch, -1), sm.reshape(batch, -1), t)
        total += float(kls.mean())
    return total * t * t


def attention_kd_loss_grad(teacher_maps: Mapping, student_maps: Mapping, t: float = 1.0) -> dict:
    """Gradients of attention_kd_loss w.r.t. the student maps, per scale."""
    t = _check_temperature(t)
    pairs, batch = _check_scale_pairs(teacher_maps, student_maps)
    out = {}
    for i, (tm, sm) in pairs.items():
        g = _kl_rows_grad(tm.reshape(batch, -1), sm.reshape(batch, -1), t)
        g = g.reshape(tm.shape) * (t * t / batch)
        out[i] = g if np.asarray(student_maps[i]).ndim == 3 else g[0]
    return out


def symmetric_structure(a) -> np.ndarray:
    """Sigmoid-squashed symmetrization ``sigma(A + A^T)`` of an attention map.

    The sum is exactly symmetric in floating point, so the output equals
    its own transpose bit for bit. Values are clipped into the open
    interval (0, 1) so the bound survives sigmoid saturation.
    """
    m = _as_square_map(a, "attention map")
    s = sigmoid(m + np.swapaxes(m, -1, -2))
    return np.clip(s, _SIG_LO, _SIG_HI)


def symmetric_structure_vjp(a, d_struct: np.ndarray) -> np.ndarray:
    m = _as_square_map(a, "attention map")
    s = symmetric_structure(m)
    dx = np.asarray(d_struct, dtype=np.float64) * s * (1.0 - s)
    return dx + np.swapaxes(dx, -1, -2)


def _check_structure_pair(s_teacher, s_student):
    st = _as_square_map(s_teacher, "teacher structures")
    ss = _as_square_map(s_student, "student structures")
    if st.shape != ss.shape:
        raise ValueError(f"structure shape mismatch: {st.shape} vs {ss.shape}")
    return st, ss


def sgm_loss(s_teacher, s_student, t: float = 1.0) -> float:
    """Symmetric-structure matching loss (built from the fine scale only).

    Mean over the batch of the softened KL between flattened teacher and
    student structures, rescaled by t^2.
    """
    t = _check_temperature(t)
    st, ss = _check_structure_pair(s_teacher, s_student)
    bt, bs = _batched(st), _batched(ss)
    n = bt.shape[0]
    kls = _kl_rows(bt.reshape(n, -1), bs.reshape(n, -1), t)
    return float(kls.mean()) * t * t


def sgm_loss_grad(s_teacher, s_student, t: float = 1.0) -> np.ndarray:
    t = _check_temperature(t)
    st, ss = _check_structure_pair(s_teacher, s_student)
    bt, bs = _batched(st), _batched(ss)
    n = bt.shape[0]
    g = _kl_rows_grad(bt.reshape(n, -1), bs.reshape(n, -1), t)
    g = g.reshape(bt.shape) * (t * t / n)
    return g if ss.ndim == 3 else g[0]


def _check_binary_target(target, like: np.ndarray) -> np.ndarray:
    g = np.asarray(target, dtype=np.float64)
    if g.shape != like.shape:
        raise ValueError(f"logit/target shape mismatch: {like.shape} vs {g.shape}")
    if not np.all((g == 0.0) | (g == 1.0)):
        raise ValueError("target must be binary (entries in {0, 1})")
    return g


def bce_loss(logits, target) -> float:
    """Mean binary cross-entropy of logits against a {0,1} target map.

    Uses the log-sum-exp-stable form ``max(x,0) - x*g + log(1+exp(-|x|))``.
    """
    x = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("bce_loss logits must be finite")
    g = _check_binary_target(target, x)
    vals = np.maximum(x, 0.0) - x * g + np.log1p(np.exp(-np.abs(x)))
    return float(vals.mean())


def bce_loss_grad(logits, target) -> np.ndarray:
    x = np.asarray(logits, dtype=np.float64)
    g = _check_binary_target(target, x)
    return (sigmoid(x) - g) / x.size


def dice_loss(logits, target, eps: float = 1.0) -> float:
    """Soft dice loss ``1 - (2*sum(p*g)+eps) / (sum(p)+sum(g)+eps)``.

    ``p`` is the sigmoid of the logits; ``eps`` keeps empty-vs-empty at
    a perfect 0.
    """
    x = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("dice_loss logits must be finite")
    g = _check_binary_target(target, x)
    p = sigmoid(x)
    inter = float((p * g).sum())
    denom = float(p.sum() + g.sum())
    return 1.0 - (2.0 * inter + eps) / (denom + eps)


def dice_loss_grad(logits, target, eps: float = 1.0) -> np.ndarray:
    x = np.asarray(logits, dtype=np.float64)
    g = _check_binary_target(target, x)
    p = sigmoid(x)
    inter = (p * g).sum()
    denom = p.sum() + g.sum() + eps
    dp = ((2.0 * inter + eps) - 2.0 * g * denom) / (denom * denom)
    return dp * p * (1.0 - p)


def jaccard_loss(logits, target, eps: float = 1.0) -> float:
    """Soft Jaccard loss, the configuration alternative to bce+dice."""
    x = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("jaccard_loss logits must be finite")
    g = _check_binary_target(target, x)
    p = sigmoid(x)
    inter = float((p * g).sum())
    union = float(p.sum() + g.sum()) - inter
    return 1.0 - (inter + eps) / (union + eps)


def jaccard_loss_grad(logits, target, eps: float = 1.0) -> np.ndarray:
    x = np.asarray(logits, dtype=np.float64)
    g = _check_binary_target(target, x)
    p = sigmoid(x)
    inter = (p * g).sum()
    union = p.sum() + g.sum() - inter + eps
    dp = -(g * union - (inter + eps) * (1.0 - g)) / (union * union)
    return dp * p * (1.0 - p)


@lru_cache(maxsize=64)
def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """1-D linear interpolation operator (half-pixel centers, edge clamp)."""
    m = np.zeros((n_out, n_in), dtype=np.float64)
    ratio = n_in / n_out
    for i in range(n_out):
        x = (i + 0.5) * ratio - 0.5
        x0 = math.floor(x)
        f = x - x0
        lo = min(max(x0, 0), n_in - 1)
        hi = min(max(x0 + 1, 0), n_in - 1)
        m[i, lo] += 1.0 - f
        m[i, hi] += f
    m.setflags(write=False)
    return m


def bilinear_resize(m, out_side: int) -> np.ndarray:
    """Bilinear resize of square maps to ``out_side``; exact identity when sides match."""
    a = _as_square_map(m, "map")
    side = a.shape[-1]
    if side == int(out_side):
        return a.copy()
    w = _interp_matrix(side, int(out_side))
    return w @ a @ w.T


def bilinear_resize_vjp(d_out: np.ndarray, in_side: int) -> np.ndarray:
    """Adjoint of bilinear_resize back to an ``in_side`` map."""
    d = np.asarray(d_out, dtype=np.float64)
    if d.shape[-1] == int(in_side):
        return d.copy()
    w = _interp_matrix(int(in_side), d.shape[-1])
    return w.T @ d @ w


def _check_seg_inputs(student_maps: Mapping, ground_truth):
    if set(student_maps) != set(SCALES):
        raise ValueError(
            f"seg_loss needs maps for scales {set(SCALES)}, got {sorted(student_maps)}"
        )
    gt = _batched(_as_square_map(ground_truth, "ground truth"))
    if not np.all((gt == 0.0) | (gt == 1.0)):
        raise ValueError("ground truth must be binary (entries in {0, 1})")
    maps = {}
    for i in SCALES:
        m = _batched(_as_square_map(student_maps[i], f"student maps at scale {i}"))
        if m.shape[0] != gt.shape[0]:
            raise ValueError(
                f"batch mismatch at scale {i}: {m.shape[0]} maps vs {gt.shape[0]} truths"
            )
        maps[i] = m
    return maps, gt


def _per_sample_seg(up: np.ndarray, gt: np.ndarray, kind: str):
    """Per-sample loss terms for one scale of upsampled logits."""
    n = up.shape[0]
    vals = np.empty(n)
    for k in range(n):
        if kind == "bce_dice":
            vals[k] = bce_loss(up[k], gt[k]) + dice_loss(up[k], gt[k])
        elif kind == "jaccard":
            vals[k] = jaccard_loss(up[k], gt[k])
        else:
            raise ValueError(f"unknown seg loss kind {kind!r}")
    return vals


def seg_loss(student_maps: Mapping, ground_truth, kind: str = "bce_dice") -> float:
    """Supervised segmentation loss over both scales.

    Each scale's logit maps are bilinearly upsampled to the ground-truth
    resolution (exact bypass when already there), scored per sample with
    bce+dice (or jaccard), averaged over the batch and summed over scales.
    """
    maps, gt = _check_seg_inputs(student_maps, ground_truth)
    side = gt.shape[-1]
    total = 0.0
    for m in maps.values():
        up = bilinear_resize(m, side)
        total += float(_per_sample_seg(up, gt, kind).mean())
    return total


def seg_loss_grad(student_maps: Mapping, ground_truth, kind: str = "bce_dice") -> dict:
    """Gradients of seg_loss w.r.t. each scale's logit maps."""
    maps, gt = _check_seg_inputs(student_maps, ground_truth)
    side = gt.shape[-1]
    n = gt.shape[0]
    out = {}
    for i, m in maps.items():
        up = bilinear_resize(m, side)
        d_up = np.empty_like(up)
        for k in range(n):
            if kind == "bce_dice":
                d_up[k] = bce_loss_grad(up[k], gt[k]) + dice_loss_grad(up[k], gt[k])
            elif kind == "jaccard":
                d_up[k] = jaccard_loss_grad(up[k], gt[k])
            else:
                raise ValueError(f"unknown seg loss kind {kind!r}")
        d_m = bilinear_resize_vjp(d_up / n, m.shape[-1])
        out[i] = d_m if np.asarray(student_maps[i]).ndim == 3 else d_m[0]
    return out


def total_kdas_loss(
    l_at: float,
    l_sgm: float,
    l_seg: float,
    kd_weight: float = 0.2,
    seg_weight: float = 0.8,
) -> LossBreakdown:
    """Weighted composite objective: kd_weight*(l_at+l_sgm) + seg_weight*l_seg."""
    parts = {"l_at": float(l_at), "l_sgm": float(l_sgm), "l_seg": float(l_seg)}
    for name, v in parts.items():
        if not math.isfinite(v):
            raise ValueError(f"{name} must be finite, got {v}")
        if v < 0.0:
            raise ValueError(f"{name} must be nonnegative, got {v}")
    total = kd_weight * (parts["l_at"] + parts["l_sgm"]) + seg_weight * parts["l_seg"]
    return LossBreakdown(parts["l_at"], parts["l_sgm"], parts["l_seg"], total)
