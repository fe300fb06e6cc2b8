"""TrivialAugment-style joint augmentation of image and label mask.

One op from a fixed set of ten is drawn uniformly per sample together with a
uniform strength in [0, 1]; a horizontal flip is drawn independently with
probability 0.5. Geometric ops move the mask with the image (nearest-neighbour,
so it stays binary); photometric ops and erasing leave the mask alone. Edge
targets are always recomputed from the final mask.
"""

from __future__ import annotations

import enum
from dataclasses import asdict, dataclass

import cv2
import numpy as np
from PIL import Image, ImageEnhance

from .data import SegMask
from .edges import DEFAULT_EDGE_WIDTH, EdgeMap, boundary_map


class AugOp(str, enum.Enum):
    CROP = "CROP"
    VFLIP = "VFLIP"
    ROTATION = "ROTATION"
    PERSPECTIVE = "PERSPECTIVE"
    ERASING = "ERASING"
    GRAYSCALE = "GRAYSCALE"
    GAUSSIAN_BLUR = "GAUSSIAN_BLUR"
    INVERSION = "INVERSION"
    SHARPNESS = "SHARPNESS"
    COLOR_JITTER = "COLOR_JITTER"


OPS = tuple(AugOp)
GEOMETRIC = frozenset({AugOp.CROP, AugOp.VFLIP, AugOp.ROTATION, AugOp.PERSPECTIVE})

# strength -> parameter caps
CROP_MIN_SCALE = 0.4      # kept area fraction in [1 - 0.4 s, 1]
MAX_ROTATION_DEG = 30.0
MAX_PERSPECTIVE = 0.3
MAX_BLUR_SIGMA = 2.0
MAX_JITTER = 0.5
MAX_ERASE_AREA = 0.2


@dataclass(frozen=True)
class AugSpec:
    op: AugOp | None
    strength: float
    hflip: bool
    rng_seed: int

    def __post_init__(self) -> None:
        if self.op is not None:
            object.__setattr__(self, "op", AugOp(self.op))
        if not 0.0 <= self.strength <= 1.0:
            raise ValueError(f"strength must be in [0, 1], got {self.strength}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["op"] = None if self.op is None else self.op.value
        return d


@dataclass(frozen=True, eq=False)
class AugmentedSample:
    image: np.ndarray
    mask: SegMask
    edges: EdgeMap
    spec: AugSpec


def sample_policy(rng: np.random.Generator | int) -> AugSpec:
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    op = OPS[int(rng.integers(len(OPS)))]
    strength = float(rng.uniform(0.0, 1.0))
    hflip = bool(rng.random() < 0.5)
    seed = int(rng.integers(0, 2**31 - 1))
    return AugSpec(op, strength, hflip, seed)


def _warp_affine(image, mask, matrix):
    h, w = mask.shape
    img = cv2.warpAffine(image, matrix, (w, h), flags=cv2.INTER_LINEAR, borderMode=cv2.BORDER_REPLICATE)
    msk = cv2.warpAffine(mask, matrix, (w, h), flags=cv2.INTER_NEAREST,
                         borderMode=cv2.BORDER_CONSTANT, borderValue=0)
    return img, msk


def _crop(image, mask, s, rng):
    h, w = mask.shape
    scale = rng.uniform(1.0 - CROP_MIN_SCALE * s, 1.0)
    side = np.sqrt(scale)
    ch, cw = max(1, int(round(h * side))), max(1, int(round(w * side)))
    y0 = int(rng.integers(0, h - ch + 1))
    x0 = int(rng.integers(0, w - cw + 1))
    img = cv2.resize(image[y0:y0 + ch, x0:x0 + cw], (w, h), interpolation=cv2.INTER_LINEAR)
    msk = cv2.resize(mask[y0:y0 + ch, x0:x0 + cw], (w, h), interpolation=cv2.INTER_NEAREST)
    return img, msk


def _rotate(image, mask, s, rng):
    h, w = mask.shape
    angle = MAX_ROTATION_DEG * s * (1 if rng.random() < 0.5 else -1)
    matrix = cv2.getRotationMatrix2D(((w - 1) / 2.0, (h - 1) / 2.0), angle, 1.0)
    return _warp_affine(image, mask, matrix)


def _perspective(image, mask, s, rng):
    h, w = mask.shape
    dx, dy = MAX_PERSPECTIVE * s * w / 2.0, MAX_PERSPECTIVE * s * h / 2.0
    src = np.float32([[0, 0], [w - 1, 0], [w - 1, h - 1], [0, h - 1]])
    inward = np.float32([[1, 1], [-1, 1], [-1, -1], [1, -1]])
    offsets = rng.uniform(0.0, 1.0, size=(4, 2)) * np.float32([dx, dy])
    dst = (src + inward * offsets).astype(np.float32)
    matrix = cv2.getPerspectiveTransform(src, dst)
    img = cv2.warpPerspective(image, matrix, (w, h), flags=cv2.INTER_LINEAR, borderMode=cv2.BORDER_REPLICATE)
    msk = cv2.warpPerspective(mask, matrix, (w, h), flags=cv2.INTER_NEAREST,
                              borderMode=cv2.BORDER_CONSTANT, borderValue=0)
    return img, msk


def _erase(image, s, rng):
    h, w = image.shape[:2]
    area = MAX_ERASE_AREA * s * rng.uniform(0.5, 1.0) * h * w
    aspect = np.exp(rng.uniform(np.log(0.3), np.log(3.3)))
    eh = min(h, int(round(np.sqrt(area * aspect))))
    ew = min(w, int(round(np.sqrt(area / aspect))))
    out = image.copy()
    if eh > 0 and ew > 0:
        y0 = int(rng.integers(0, h - eh + 1))
        x0 = int(rng.integers(0, w - ew + 1))
        out[y0:y0 + eh, x0:x0 + ew] = 0
    return out


def _color_jitter(image, s, rng):
    pil = Image.fromarray(image)
    for enhancer in (ImageEnhance.Brightness, ImageEnhance.Contrast, ImageEnhance.Color):
        factor = rng.uniform(1.0 - MAX_JITTER * s, 1.0 + MAX_JITTER * s)
        pil = enhancer(pil).enhance(factor)
    return np.asarray(pil).copy()


def _photometric(op: AugOp, image: np.ndarray, s: float, rng: np.random.Generator) -> np.ndarray:
    if op is AugOp.ERASING:
        return _erase(image, s, rng)
    if op is AugOp.GRAYSCALE:
        gray = cv2.cvtColor(image, cv2.COLOR_RGB2GRAY)
        return np.repeat(gray[:, :, None], 3, axis=2)
    if op is AugOp.GAUSSIAN_BLUR:
        sigma = MAX_BLUR_SIGMA * s
        if sigma < 0.1:
            return image.copy()
        return cv2.GaussianBlur(image, (0, 0), sigmaX=sigma, borderType=cv2.BORDER_REFLECT)
    if op is AugOp.INVERSION:
        return 255 - image
    if op is AugOp.SHARPNESS:
        return np.asarray(ImageEnhance.Sharpness(Image.fromarray(image)).enhance(1.0 + s)).copy()
    if op is AugOp.COLOR_JITTER:
        return _color_jitter(image, s, rng)
    raise ValueError(f"not a photometric op: {op}")


def apply_joint_augmentation(image: np.ndarray, mask: SegMask, spec: AugSpec,
                             edge_width: int = DEFAULT_EDGE_WIDTH) -> AugmentedSample:
    image = np.ascontiguousarray(image, dtype=np.uint8)
    if image.shape[:2] != mask.data.shape:
        raise ValueError(f"image {image.shape[:2]} and mask {mask.data.shape} sizes differ")
    msk = np.array(mask.data, dtype=np.uint8)
    img = image
    rng = np.random.default_rng(spec.rng_seed)
    s = spec.strength
    op = spec.op
    if op is AugOp.CROP:
        img, msk = _crop(img, msk, s, rng)
    elif op is AugOp.VFLIP:
        img, msk = img[::-1], msk[::-1]
    elif op is AugOp.ROTATION:
        img, msk = _rotate(img, msk, s, rng)
    elif op is AugOp.PERSPECTIVE:
        img, msk = _perspective(img, msk, s, rng)
    elif op is not None:
        img = _photometric(op, img, s, rng)
    if spec.hflip:
        img, msk = img[:, ::-1], msk[:, ::-1]
    img = np.ascontiguousarray(img, dtype=np.uint8)
    out_mask = SegMask(np.ascontiguousarray(msk))
    return AugmentedSample(img, out_mask, boundary_map(out_mask, edge_width), spec)
