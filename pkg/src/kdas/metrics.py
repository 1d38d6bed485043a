"""Segmentation quality metrics: mean dice and mean IoU."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class MetricReport:
    m_dice: float
    m_iou: float
    per_sample: tuple  # ((dice, iou), ...) per sample


def binarize(logit_map) -> np.ndarray:
    """Foreground where the logistic output exceeds 0.5, i.e. logit > 0.

    The inequality is strict: a logit of exactly 0 is background.
    """
    a = np.asarray(logit_map, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise ValueError("binarize expects finite logits")
    return a > 0.0


def _as_mask_batch(m, name: str) -> np.ndarray:
    a = np.asarray(m)
    if a.dtype != bool:
        af = a.astype(np.float64)
        if not np.all((af == 0.0) | (af == 1.0)):
            raise ValueError(f"{name} must be binary")
        a = af.astype(bool)
    if a.ndim == 2:
        a = a[None]
    if a.ndim != 3:
        raise ValueError(f"{name} must be a mask or batch of masks, got ndim={a.ndim}")
    return a


def evaluate(preds, gts) -> MetricReport:
    """Per-sample dice/IoU and their means over the batch.

    Empty prediction against empty ground truth counts as a perfect 1.0
    for both metrics.
    """
    p = _as_mask_batch(preds, "preds")
    g = _as_mask_batch(gts, "gts")
    if p.shape != g.shape:
        raise ValueError(f"pred/gt shape mismatch: {p.shape} vs {g.shape}")
    pairs = []
    for k in range(p.shape[0]):
        inter = int(np.count_nonzero(p[k] & g[k]))
        n_p = int(np.count_nonzero(p[k]))
        n_g = int(np.count_nonzero(g[k]))
        union = n_p + n_g - inter
        if n_p == 0 and n_g == 0:
            pairs.append((1.0, 1.0))
        else:
            pairs.append((2.0 * inter / (n_p + n_g), inter / union))
    dices = [d for d, _ in pairs]
    ious = [i for _, i in pairs]
    return MetricReport(
        m_dice=float(np.mean(dices)),
        m_iou=float(np.mean(ious)),
        per_sample=tuple(pairs),
    )
