"""Synthetic blob-segmentation data and a directory loader for real corpora.

Samples hold float64 images ``(S, S, 3)`` scaled to [0, 1] and binary
masks ``(S, S)``. Synthetic masks are unions of 1-3 rotated filled
ellipses; images are a smooth textured background, brightened inside the
mask, plus seeded pixel noise. Samples are a pure function of
(DatasetSpec, index), so any split regenerates bit-identically.

On-disk layout for file corpora: ``<root>/images/*.png|jpg`` and
``<root>/masks/*.png`` with matching stems; masks are foreground where
the 8-bit value exceeds 127.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .kdmath import bilinear_resize


class DatasetError(Exception):
    """Raised for unusable corpora: missing pairs, unreadable files."""


@dataclass(frozen=True)
class Sample:
    image: np.ndarray  # (S, S, 3) float64 in [0, 1]
    mask: np.ndarray   # (S, S) float64 in {0, 1}
    id: str


@dataclass(frozen=True)
class DatasetSpec:
    """Recipe for a synthetic dataset; the desk-scale side is 64."""

    count: int
    image_side: int = 64
    seed: int = 0
    blob_count_range: tuple = (1, 3)
    radius_range: tuple = (0.10, 0.28)  # fractions of the image side
    contrast: float = 0.30
    noise_sigma: float = 0.05

    def __post_init__(self):
        if self.count < 0:
            raise ValueError("count must be nonnegative")
        if self.image_side <= 0 or self.image_side % 8 != 0:
            raise ValueError("image_side must be a positive multiple of 8")
        lo, hi = self.blob_count_range
        if not (1 <= lo <= hi):
            raise ValueError("blob_count_range must satisfy 1 <= lo <= hi")
        r_lo, r_hi = self.radius_range
        if not (0.0 < r_lo <= r_hi < 0.5):
            raise ValueError("radius_range fractions must lie in (0, 0.5)")
        if self.contrast < 0.0 or self.noise_sigma < 0.0:
            raise ValueError("contrast and noise_sigma must be nonnegative")


def _ellipse_mask(side: int, cx: float, cy: float, rx: float, ry: float, theta: float):
    ys, xs = np.mgrid[0:side, 0:side]
    dx = xs - cx
    dy = ys - cy
    ct, st = math.cos(theta), math.sin(theta)
    u = (dx * ct + dy * st) / rx
    v = (-dx * st + dy * ct) / ry
    return u * u + v * v <= 1.0


def _smooth_background(rng: np.random.Generator, side: int) -> np.ndarray:
    coarse = rng.uniform(0.25, 0.75, size=(max(side // 8, 2), max(side // 8, 2), 3))
    chans = [bilinear_resize(coarse[:, :, c], side) for c in range(3)]
    return np.stack(chans, axis=-1)


def generate_sample(spec: DatasetSpec, index: int) -> Sample:
    """One deterministic sample; the rng stream is keyed by (seed, index)."""
    rng = np.random.default_rng([spec.seed, index])
    side = spec.image_side

    image = _smooth_background(rng, side)
    image += rng.uniform(-0.05, 0.05, size=3)

    lo, hi = spec.blob_count_range
    n_blobs = int(rng.integers(lo, hi + 1))
    mask = np.zeros((side, side), dtype=bool)
    for _ in range(n_blobs):
        cx = rng.uniform(0.25, 0.75) * side
        cy = rng.uniform(0.25, 0.75) * side
        rx = rng.uniform(*spec.radius_range) * side
        ry = rng.uniform(*spec.radius_range) * side
        theta = rng.uniform(0.0, math.pi)
        mask |= _ellipse_mask(side, cx, cy, rx, ry, theta)

    image += mask[:, :, None] * (spec.contrast * rng.uniform(0.6, 1.0))
    image += rng.normal(0.0, spec.noise_sigma, size=image.shape)
    image = np.clip(image, 0.0, 1.0)
    return Sample(image=image, mask=mask.astype(np.float64), id=f"synth-{index:05d}")


def generate_dataset(spec: DatasetSpec) -> list:
    return [generate_sample(spec, k) for k in range(spec.count)]


# ------------------------------------------------------------------ file I/O

def save_dataset(samples, root) -> None:
    """Write samples as 8-bit PNGs under <root>/images and <root>/masks."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    for s in samples:
        img = np.clip(np.round(s.image * 255.0), 0, 255).astype(np.uint8)
        msk = (s.mask > 0.5).astype(np.uint8) * 255
        Image.fromarray(img, mode="RGB").save(root / "images" / f"{s.id}.png")
        Image.fromarray(msk, mode="L").save(root / "masks" / f"{s.id}.png")


_IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg"}


def load_directory(images_dir, masks_dir, target_side: int) -> list:
    """Load an image/mask corpus, resizing to ``target_side``.

    Images resize bilinearly and scale to [0, 1]; masks resize
    nearest-neighbor and binarize (foreground where 8-bit value > 127).
    Ordering is lexicographic by stem.
    """
    if target_side <= 0 or target_side % 8 != 0:
        raise ValueError("target_side must be a positive multiple of 8")
    images_dir, masks_dir = Path(images_dir), Path(masks_dir)
    for d in (images_dir, masks_dir):
        if not d.is_dir():
            raise DatasetError(f"not a directory: {d}")
    image_paths = sorted(
        (p for p in images_dir.glob("*") if p.suffix.lower() in _IMAGE_SUFFIXES),
        key=lambda p: p.stem,
    )
    samples = []
    for img_path in image_paths:
        mask_path = masks_dir / f"{img_path.stem}.png"
        if not mask_path.exists():
            raise DatasetError(f"no mask for image stem {img_path.stem!r}")
        try:
            with Image.open(img_path) as im:
                rgb = im.convert("RGB").resize((target_side, target_side), Image.BILINEAR)
        except OSError as exc:
            raise DatasetError(f"unreadable image {img_path}: {exc}") from exc
        try:
            with Image.open(mask_path) as mm:
                gray = mm.convert("L").resize((target_side, target_side), Image.NEAREST)
        except OSError as exc:
            raise DatasetError(f"unreadable mask {mask_path}: {exc}") from exc
        image = np.asarray(rgb, dtype=np.float64) / 255.0
        mask = (np.asarray(gray) > 127).astype(np.float64)
        samples.append(Sample(image=image, mask=mask, id=img_path.stem))
    return samples


# ----------------------------------------------------------------- batching

def stack_samples(samples) -> tuple:
    """Stack a list of samples into (images, masks, ids) arrays."""
    images = np.stack([s.image for s in samples])
    masks = np.stack([s.mask for s in samples])
    return images, masks, [s.id for s in samples]


def batch_iterator(samples, batch_size: int, seed=None, shuffle: bool = True):
    """Yield (images, masks, ids) batches; the final partial batch is kept.

    With shuffle on, the order is one deterministic permutation drawn
    from ``seed``; callers wanting fresh epoch orders pass a new seed
    per epoch.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = np.arange(len(samples))
    if shuffle:
        order = np.random.default_rng(seed).permutation(len(samples))
    for start in range(0, len(samples), batch_size):
        chunk = [samples[i] for i in order[start : start + batch_size]]
        yield stack_samples(chunk)
