"""Synthetic "smoke on forest" images with known masks and tight boxes.

Two blob families are available. ``soft_box`` blobs are Gaussian-blurred
rectangles: their true mask fills its tight box almost completely, so a
box-filling teacher is a good (but not exact) teacher. ``gaussian`` blobs are
elliptical Gaussians, whose masks cover only about pi/4 of their boxes.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.special import ndtr

from .data import BoxAnnotation, DatasetManifest, ImageSample, SegMask, Source, Split, save_image, save_manifest, write_mask

# gaussian blobs: a pixel belongs to the blob where its Mahalanobis radius is <= this
MASK_RADIUS = 1.5
# soft_box blobs: a pixel belongs to the blob where the blurred indicator is >= this
SOFT_BOX_LEVEL = 0.5
PEAK_ALPHA = 0.85
SMOKE_RGB = np.array([205.0, 205.0, 212.0])


@dataclass(frozen=True)
class SyntheticImage:
    image: np.ndarray
    mask: SegMask
    boxes: tuple[BoxAnnotation, ...]


def _background(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    coarse = ndimage.gaussian_filter(rng.normal(size=(h, w)), sigma=6)
    coarse = coarse / (np.abs(coarse).max() + 1e-9)
    fine = rng.normal(scale=0.25, size=(h, w))
    base = np.array([50.0, 85.0, 45.0]) + rng.uniform(-15, 15, size=3)
    shade = 35.0 * coarse + 20.0 * fine
    return np.clip(base[None, None, :] + shade[:, :, None], 0, 255)


def _gaussian_density(rng, xs, ys, height, width):
    sx = rng.uniform(0.06, 0.14) * width
    sy = rng.uniform(0.06, 0.14) * height
    cx = rng.uniform(MASK_RADIUS * sx, width - MASK_RADIUS * sx)
    cy = rng.uniform(MASK_RADIUS * sy, height - MASK_RADIUS * sy)
    r2 = ((xs + 0.5 - cx) / sx) ** 2 + ((ys + 0.5 - cy) / sy) ** 2
    return np.exp(-0.5 * r2), r2 <= MASK_RADIUS ** 2


def _soft_box_density(rng, xs, ys, height, width):
    bw = rng.uniform(0.15, 0.4) * width
    bh = rng.uniform(0.15, 0.4) * height
    x0 = rng.uniform(2, width - bw - 2)
    y0 = rng.uniform(2, height - bh - 2)
    soft = rng.uniform(0.08, 0.15) * min(bw, bh)

    def step(u, lo, hi):
        return ndtr((u + 0.5 - lo) / soft) - ndtr((u + 0.5 - hi) / soft)

    density = step(xs, x0, x0 + bw) * step(ys, y0, y0 + bh)
    return density, density >= SOFT_BOX_LEVEL


def render_blob_image(rng: np.random.Generator, height: int, width: int, n_blobs: int,
                      shape: str = "soft_box") -> SyntheticImage:
    density_fn = {"soft_box": _soft_box_density, "gaussian": _gaussian_density}[shape]
    img = _background(rng, height, width)
    union = np.zeros((height, width), dtype=bool)
    boxes = []
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    for _ in range(n_blobs):
        density, blob = density_fn(rng, xs, ys, height, width)
        alpha = PEAK_ALPHA * density
        smoke = SMOKE_RGB + rng.normal(scale=6.0, size=(height, width, 1))
        img = img * (1 - alpha[..., None]) + smoke * alpha[..., None]
        if not blob.any():
            continue
        rows = np.flatnonzero(blob.any(axis=1))
        cols = np.flatnonzero(blob.any(axis=0))
        boxes.append(BoxAnnotation(int(cols[0]), int(rows[0]), int(cols[-1]) + 1, int(rows[-1]) + 1))
        union |= blob
    return SyntheticImage(np.clip(img, 0, 255).astype(np.uint8), SegMask(union), tuple(boxes))


def make_blob_dataset(out_dir: str | Path, n_samples: int = 50, size: tuple[int, int] = (96, 96),
                      seed: int = 0, split_counts: tuple[int, int, int] | None = None,
                      smokeless_fraction: float = 0.06, max_blobs: int = 2,
                      shape: str = "soft_box") -> tuple[DatasetManifest, Path]:
    """Write images, true masks and a manifest under ``out_dir``.

    Returns the manifest (with splits assigned in order train/val/test) and the
    directory of ground-truth masks, which are named ``<id>.png``.
    """
    out_dir = Path(out_dir)
    height, width = size
    if split_counts is None:
        n_test = max(1, round(0.2 * n_samples))
        n_val = max(1, round(0.2 * n_samples))
        split_counts = (n_samples - n_val - n_test, n_val, n_test)
    if sum(split_counts) != n_samples:
        raise ValueError(f"split counts {split_counts} do not add up to {n_samples}")
    split_of = [Split.TRAIN] * split_counts[0] + [Split.VAL] * split_counts[1] + [Split.TEST] * split_counts[2]
    rng = np.random.default_rng(seed)
    gt_dir = out_dir / "gt"
    samples = []
    for i in range(n_samples):
        smokeless = rng.random() < smokeless_fraction
        n_blobs = 0 if smokeless else int(rng.integers(1, max_blobs + 1))
        syn = render_blob_image(rng, height, width, n_blobs, shape)
        sid = f"syn{i:04d}"
        save_image(syn.image, out_dir / "images" / f"{sid}.png")
        write_mask(syn.mask, gt_dir / f"{sid}.png")
        uav = i % 2 == 0
        samples.append(ImageSample(
            id=sid, image_path=f"images/{sid}.png", width=width, height=height, boxes=syn.boxes,
            source=Source.UAV if uav else Source.FIXED_CAMERA, group_key=f"g{i:04d}",
            timestamp=float(i * 300) if uav else None, split=split_of[i],
        ))
    manifest = DatasetManifest(tuple(samples))
    save_manifest(manifest, out_dir / "manifest.jsonl")
    return manifest, gt_dir
