"""Mask-consistent augmentation.

Geometric transforms move image and mask through the same coordinate map,
sampling the image bilinearly and the mask nearest-neighbor with
out-of-frame pixels filled with background (class 0, image value 0).
Photometric and noise transforms never touch the mask. Per-sample
reproducibility comes from seeding each sample with global_seed XOR its
index, so any parallel schedule yields the same dataset.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import LabeledSample
from .errors import ConfigError

GEOMETRIC_KINDS = ("hflip", "vflip", "rotation", "shear_h", "shear_v", "zoom")
PHOTOMETRIC_KINDS = ("brightness", "gaussian_blur", "salt_pepper", "speckle")
ALL_KINDS = GEOMETRIC_KINDS + PHOTOMETRIC_KINDS

# (lo, hi) parameter ranges; flips ignore the value.
DEFAULT_RANGES = {
    "hflip": (0.0, 0.0),
    "vflip": (0.0, 0.0),
    "rotation": (-25.0, 25.0),
    "shear_h": (-0.2, 0.2),
    "shear_v": (-0.2, 0.2),
    "zoom": (0.8, 1.2),
    "brightness": (0.7, 1.3),
    "gaussian_blur": (0.3, 1.5),
    "salt_pepper": (0.0, 0.02),
    "speckle": (0.02, 0.1),
}


@dataclass(frozen=True)
class TransformSpec:
    kind: str
    lo: float
    hi: float
    prob: float

    def __post_init__(self):
        if self.kind not in ALL_KINDS:
            raise ConfigError(f"unknown transform '{self.kind}'; choose from {ALL_KINDS}")
        if not 0.0 <= self.prob <= 1.0:
            raise ConfigError(f"transform probability must be in [0,1], got {self.prob}")


@dataclass(frozen=True)
class AugmentSpec:
    transforms: tuple

    @classmethod
    def default(cls, kinds=None, prob: float = 0.5) -> "AugmentSpec":
        kinds = tuple(kinds) if kinds else ALL_KINDS
        return cls(
            tuple(TransformSpec(k, DEFAULT_RANGES[k][0], DEFAULT_RANGES[k][1], prob) for k in kinds)
        )


def sample_seed(global_seed: int, index: int) -> int:
    return (int(global_seed) ^ int(index)) & 0x7FFFFFFF


def _inverse_affine_map(h, w, matrix):
    """Source coordinates for every destination pixel, mapping about the center."""
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    rows, cols = np.meshgrid(
        np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij"
    )
    dy, dx = rows - cy, cols - cx
    src_r = matrix[0][0] * dy + matrix[0][1] * dx + cy
    src_c = matrix[1][0] * dy + matrix[1][1] * dx + cx
    return src_r, src_c


def _sample_bilinear(image, src_r, src_c):
    h, w = image.shape[:2]
    r0 = np.floor(src_r).astype(np.int64)
    c0 = np.floor(src_c).astype(np.int64)
    fr = (src_r - r0).astype(np.float32)
    fc = (src_c - c0).astype(np.float32)
    out = np.zeros_like(image)
    for ri, wr in ((r0, 1.0 - fr), (r0 + 1, fr)):
        for ci, wc in ((c0, 1.0 - fc), (c0 + 1, fc)):
            ok = (ri >= 0) & (ri < h) & (ci >= 0) & (ci < w)
            vals = image[np.clip(ri, 0, h - 1), np.clip(ci, 0, w - 1)]
            weight = (wr * wc * ok)[..., None]
            out += vals * weight
    return out


def _sample_nearest(mask, src_r, src_c):
    h, w = mask.shape
    rn = np.rint(src_r).astype(np.int64)
    cn = np.rint(src_c).astype(np.int64)
    ok = (rn >= 0) & (rn < h) & (cn >= 0) & (cn < w)
    vals = mask[np.clip(rn, 0, h - 1), np.clip(cn, 0, w - 1)]
    return np.where(ok, vals, 0).astype(mask.dtype)


def _geometry_matrix(kind, value):
    if kind == "rotation":
        th = math.radians(value)
        # inverse of a rotation by value degrees
        return ((math.cos(th), math.sin(th)), (-math.sin(th), math.cos(th)))
    if kind == "shear_h":
        return ((1.0, 0.0), (-value, 1.0))
    if kind == "shear_v":
        return ((1.0, -value), (0.0, 1.0))
    if kind == "zoom":
        if value <= 0:
            raise ConfigError(f"zoom factor must be positive, got {value}")
        return ((1.0 / value, 0.0), (0.0, 1.0 / value))
    raise ConfigError(f"'{kind}' has no affine matrix")


def transform_mask(mask: np.ndarray, kind: str, value: float = 0.0) -> np.ndarray:
    """Apply one geometric transform to a standalone index grid."""
    if kind == "hflip":
        return mask[:, ::-1].copy()
    if kind == "vflip":
        return mask[::-1, :].copy()
    if kind not in GEOMETRIC_KINDS:
        raise ConfigError(f"'{kind}' is not a geometric transform")
    if kind == "rotation" and value == 0.0:
        return mask.copy()
    if kind == "zoom" and value == 1.0:
        return mask.copy()
    if kind in ("shear_h", "shear_v") and value == 0.0:
        return mask.copy()
    src_r, src_c = _inverse_affine_map(*mask.shape, _geometry_matrix(kind, value))
    return _sample_nearest(mask, src_r, src_c)


def apply_transform(image, mask, kind, value, rng=None):
    """Apply one transform to an image/mask pair; returns new arrays."""
    if kind == "hflip":
        return image[:, ::-1].copy(), mask[:, ::-1].copy()
    if kind == "vflip":
        return image[::-1, :].copy(), mask[::-1, :].copy()
    if kind in GEOMETRIC_KINDS:
        neutral = (kind == "rotation" and value == 0.0) or (
            kind == "zoom" and value == 1.0
        ) or (kind in ("shear_h", "shear_v") and value == 0.0)
        if neutral:
            return image.copy(), mask.copy()
        src_r, src_c = _inverse_affine_map(*mask.shape, _geometry_matrix(kind, value))
        return (
            np.clip(_sample_bilinear(image, src_r, src_c), 0.0, 1.0),
            _sample_nearest(mask, src_r, src_c),
        )
    if kind == "brightness":
        return np.clip(image * np.float32(value), 0.0, 1.0), mask.copy()
    if kind == "gaussian_blur":
        return _gaussian_blur(image, value), mask.copy()
    if kind == "salt_pepper":
        if rng is None:
            raise ConfigError("salt_pepper needs a random generator")
        return _salt_pepper(image, value, rng), mask.copy()
    if kind == "speckle":
        if rng is None:
            raise ConfigError("speckle needs a random generator")
        noise = rng.normal(0.0, value, size=image.shape).astype(np.float32)
        return np.clip(image + image * noise, 0.0, 1.0), mask.copy()
    raise ConfigError(f"unknown transform '{kind}'")


def _gaussian_blur(image, sigma):
    if sigma <= 0:
        return image.copy()
    radius = max(1, int(math.ceil(3.0 * sigma)))
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-0.5 * (xs / sigma) ** 2)
    kernel = (kernel / kernel.sum()).astype(np.float32)
    out = image.astype(np.float32)
    padded = np.pad(out, ((radius, radius), (0, 0), (0, 0)), mode="reflect")
    out = sum(
        padded[k : k + image.shape[0]] * kernel[k] for k in range(kernel.size)
    )
    padded = np.pad(out, ((0, 0), (radius, radius), (0, 0)), mode="reflect")
    out = sum(
        padded[:, k : k + image.shape[1]] * kernel[k] for k in range(kernel.size)
    )
    return np.clip(out, 0.0, 1.0)


def _salt_pepper(image, density, rng):
    u = rng.random(size=image.shape[:2])
    out = image.copy()
    out[u < density / 2.0] = 1.0
    out[(u >= density / 2.0) & (u < density)] = 0.0
    return out


def augment(sample: LabeledSample, spec: AugmentSpec, seed: int) -> LabeledSample:
    """Run the spec's transforms in order under one per-sample generator.

    Every transform draws its coin flip and parameter whether or not it
    fires, so the random stream (and thus the whole pipeline) is a pure
    function of the seed.
    """
    rng = np.random.default_rng(seed)
    image, mask = sample.image.copy(), sample.mask.copy()
    for t in spec.transforms:
        fire = rng.random() < t.prob
        value = rng.uniform(t.lo, t.hi)
        if not fire:
            continue
        image, mask = apply_transform(image, mask, t.kind, value, rng=rng)
    return LabeledSample(stem=sample.stem, image=image, mask=mask)
