"""Dataset layout, loading, and deterministic splitting.

On disk a dataset is::

    root/images/<stem>.png   8-bit RGB
    root/masks/<stem>.png    8-bit single-channel class indices
    root/classmap.txt        lines "<index> <name>"

Images load as float32 in [0, 1]; masks as int64 index grids validated
against the class map. Ordering is always by stem so every run sees the
same sequence.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError, LabelError, ManifestError

DEFAULT_CLASS_MAP = {0: "background", 1: "unripened", 2: "half_ripened", 3: "fully_ripened"}
IMAGE_EXTS = (".png", ".bmp")


@dataclass
class LabeledSample:
    stem: str
    image: np.ndarray
    mask: np.ndarray


@dataclass
class DatasetManifest:
    root: Path
    entries: list = field(default_factory=list)  # (stem, image path, mask path)
    class_map: dict = field(default_factory=lambda: dict(DEFAULT_CLASS_MAP))

    @property
    def classes(self) -> int:
        return len(self.class_map)


def read_class_map(path: Path) -> dict:
    class_map = {}
    for ln, line in enumerate(path.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split(None, 1)
        if len(parts) != 2 or not parts[0].isdigit():
            raise ManifestError(f"{path}:{ln}: expected '<index> <name>', got {line!r}")
        class_map[int(parts[0])] = parts[1].strip()
    if not class_map or sorted(class_map) != list(range(len(class_map))):
        raise ManifestError(f"{path}: class indices must be contiguous from 0")
    return class_map


def write_class_map(path: Path, class_map: dict) -> None:
    lines = [f"{idx} {name}" for idx, name in sorted(class_map.items())]
    path.write_text("\n".join(lines) + "\n")


def discover(root) -> DatasetManifest:
    root = Path(root)
    images_dir = root / "images"
    masks_dir = root / "masks"
    if not images_dir.is_dir():
        raise ManifestError(f"missing images directory: {images_dir}")
    if not masks_dir.is_dir():
        raise ManifestError(f"missing masks directory: {masks_dir}")
    classmap_path = root / "classmap.txt"
    if not classmap_path.is_file():
        raise ManifestError(f"missing class map: {classmap_path}")
    class_map = read_class_map(classmap_path)
    entries = []
    for img_path in sorted(images_dir.iterdir()):
        if img_path.suffix.lower() not in IMAGE_EXTS:
            continue
        stem = img_path.stem
        mask_path = None
        for ext in IMAGE_EXTS:
            cand = masks_dir / f"{stem}{ext}"
            if cand.is_file():
                mask_path = cand
                break
        if mask_path is None:
            raise ManifestError(f"no mask for image stem '{stem}'")
        entries.append((stem, img_path, mask_path))
    if not entries:
        raise ManifestError(f"no images found under {images_dir}")
    entries.sort(key=lambda e: e[0])
    return DatasetManifest(root=root, entries=entries, class_map=class_map)


def load_sample(stem, img_path, mask_path, classes: int) -> LabeledSample:
    image = np.asarray(Image.open(img_path).convert("RGB"), dtype=np.float32) / 255.0
    mask = np.asarray(Image.open(mask_path).convert("L"), dtype=np.int64)
    if image.shape[:2] != mask.shape:
        raise ManifestError(
            f"stem '{stem}': image {image.shape[:2]} and mask {mask.shape} dims disagree"
        )
    if mask.max(initial=0) >= classes or mask.min(initial=0) < 0:
        raise LabelError(
            f"stem '{stem}': mask value {int(mask.max())} outside the {classes}-class map"
        )
    return LabeledSample(stem=stem, image=image, mask=mask)


def load_dataset(manifest: DatasetManifest) -> list:
    return [
        load_sample(stem, img, msk, manifest.classes) for stem, img, msk in manifest.entries
    ]


def save_sample(root: Path, sample: LabeledSample) -> None:
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    img8 = np.clip(np.rint(sample.image * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(img8, mode="RGB").save(root / "images" / f"{sample.stem}.png")
    Image.fromarray(sample.mask.astype(np.uint8), mode="L").save(
        root / "masks" / f"{sample.stem}.png"
    )


def split(samples: list, fractions=(0.75, 0.125, 0.125), seed: int = 0):
    """Deterministic shuffle then partition into (train, val, test).

    Sizes are floor(fraction * n) for val and test with the remainder going
    to train, so nothing is ever dropped.
    """
    if len(fractions) != 3:
        raise ConfigError(f"need (train, val, test) fractions, got {fractions}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"split fractions must sum to 1, got {fractions}")
    if any(f < 0 for f in fractions):
        raise ConfigError(f"split fractions must be nonnegative, got {fractions}")
    n = len(samples)
    n_val = int(fractions[1] * n)
    n_test = int(fractions[2] * n)
    n_train = n - n_val - n_test
    perm = np.random.default_rng(seed).permutation(n)
    train = [samples[i] for i in perm[:n_train]]
    val = [samples[i] for i in perm[n_train : n_train + n_val]]
    test = [samples[i] for i in perm[n_train + n_val :]]
    return train, val, test
