"""Synthetic ripeness scenes for desk-scale experiments.

Each image is a textured green background with 1-6 non-overlapping
ellipses: green-hued for unripened, orange for half-ripened, red for fully
ripened fruit. Class frequencies are skewed roughly 18 : 1 : 3.7 to echo
the real-world imbalance. Masks are exact by construction.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .data import DEFAULT_CLASS_MAP, LabeledSample, save_sample, write_class_map
from .errors import ConfigError

# occurrence counts 3557 / 196 / 724 normalized
CLASS_PROBS = np.array([3557.0, 196.0, 724.0])
CLASS_PROBS = CLASS_PROBS / CLASS_PROBS.sum()

CLASS_COLORS = {
    1: (0.42, 0.62, 0.18),  # unripened: bright green
    2: (0.88, 0.52, 0.10),  # half-ripened: orange
    3: (0.82, 0.12, 0.10),  # fully ripened: red
}

MIN_DIM = 32


def _smooth_field(rng, h, w, coarse=6):
    """Low-frequency noise in [-1, 1] via bilinear upsampling of a coarse grid."""
    grid = rng.uniform(-1.0, 1.0, size=(coarse, coarse))
    ys = np.linspace(0, coarse - 1, h)
    xs = np.linspace(0, coarse - 1, w)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, coarse - 1)
    x1 = np.minimum(x0 + 1, coarse - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    return (
        grid[np.ix_(y0, x0)] * (1 - fy) * (1 - fx)
        + grid[np.ix_(y0, x1)] * (1 - fy) * fx
        + grid[np.ix_(y1, x0)] * fy * (1 - fx)
        + grid[np.ix_(y1, x1)] * fy * fx
    )


def _ellipse_mask(h, w, cy, cx, a, b, phi):
    rows, cols = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    dy, dx = rows - cy, cols - cx
    u = dy * np.cos(phi) + dx * np.sin(phi)
    v = -dy * np.sin(phi) + dx * np.cos(phi)
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def generate_scene(rng: np.random.Generator, h: int, w: int):
    """One (image, mask) pair."""
    base = np.array([0.12, 0.30, 0.10]) + rng.uniform(-0.02, 0.02, size=3)
    image = np.empty((h, w, 3), dtype=np.float64)
    blotch = _smooth_field(rng, h, w)
    for ch in range(3):
        image[:, :, ch] = base[ch] * (1.0 + 0.35 * blotch)
    image += rng.normal(0.0, 0.015, size=image.shape)
    mask = np.zeros((h, w), dtype=np.int64)

    occupied = np.zeros((h, w), dtype=bool)
    n_ellipses = int(rng.integers(1, 7))
    rmin, rmax = 0.08 * min(h, w), 0.18 * min(h, w)
    placed = 0
    attempts = 0
    while placed < n_ellipses and attempts < 60 * n_ellipses:
        attempts += 1
        a = rng.uniform(rmin, rmax)
        b = rng.uniform(rmin, rmax)
        margin = max(a, b) + 1.0
        if 2 * margin >= min(h, w):
            continue
        cy = rng.uniform(margin, h - 1 - margin)
        cx = rng.uniform(margin, w - 1 - margin)
        phi = rng.uniform(0.0, np.pi)
        ell = _ellipse_mask(h, w, cy, cx, a, b, phi)
        if not ell.any() or (ell & occupied).any():
            continue
        cls = int(rng.choice((1, 2, 3), p=CLASS_PROBS))
        color = np.array(CLASS_COLORS[cls])
        rows, cols = np.nonzero(ell)
        d2 = (((rows - cy) / max(a, b)) ** 2 + ((cols - cx) / max(a, b)) ** 2).clip(0, 1)
        shade = 0.72 + 0.38 * (1.0 - d2)
        image[rows, cols] = color[None, :] * shade[:, None]
        image[rows, cols] += rng.normal(0.0, 0.01, size=(rows.size, 3))
        mask[rows, cols] = cls
        occupied |= ell
        placed += 1

    return np.clip(image, 0.0, 1.0).astype(np.float32), mask


def synth_generate(n: int, dims=(64, 64), seed: int = 0, root=None):
    """Generate ``n`` labeled scenes; write a loadable dataset when ``root`` is given."""
    if n < 1:
        raise ConfigError(f"need at least one sample, got n={n}")
    h, w = (int(dims[0]), int(dims[1])) if not isinstance(dims, int) else (int(dims), int(dims))
    if h < MIN_DIM or w < MIN_DIM:
        raise ConfigError(f"dims ({h},{w}) too small for ellipse placement; need >= {MIN_DIM}")
    samples = []
    for i in range(n):
        rng = np.random.default_rng((int(seed) << 20) + i)
        image, mask = generate_scene(rng, h, w)
        samples.append(LabeledSample(stem=f"synth_{i:04d}", image=image, mask=mask))
    if root is not None:
        root = Path(root)
        root.mkdir(parents=True, exist_ok=True)
        write_class_map(root / "classmap.txt", DEFAULT_CLASS_MAP)
        for s in samples:
            save_sample(root, s)
    return samples
