"""Synthetic 32x32 shape-classification data with exact foreground masks.

Each class owns one shape family (bars at several orientations, disk,
cross, ring, ...).  A sample is one bright class shape at a random position
and size on top of structured clutter: a smooth random texture plus dim,
partially erased fragments of *other* classes' shapes.  The mask marks
exactly the pixels of the class shape.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ConfigError, GenerationError

FAMILIES = ("hbar", "vbar", "disk", "cross", "ring", "dbar", "abar", "xcross")
MAX_ATTEMPTS = 100
FG_FRACTION = (0.05, 0.60)


@dataclass
class MaskedSample:
    image: np.ndarray      # [1, h, w] in [0, 1]
    label: int
    mask: np.ndarray       # [h, w] bool, True on the class shape

    def cell_mask(self, grid=(4, 4)) -> np.ndarray:
        return cell_mask(self.mask, grid)


@dataclass
class LabeledDataset:
    images: np.ndarray     # [n, 1, h, w]
    labels: np.ndarray     # [n] int
    masks: np.ndarray      # [n, h, w] bool
    n_classes: int

    def __len__(self):
        return len(self.labels)

    def __getitem__(self, i) -> MaskedSample:
        return MaskedSample(self.images[i], int(self.labels[i]), self.masks[i])

    def subset(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx)
        return LabeledDataset(self.images[idx], self.labels[idx], self.masks[idx], self.n_classes)

    def cell_masks(self, grid=(4, 4)) -> np.ndarray:
        return np.stack([cell_mask(m, grid) for m in self.masks])


def cell_mask(mask: np.ndarray, grid=(4, 4)) -> np.ndarray:
    """A cell is foreground iff strictly more than half of its pixels are."""
    h, w = mask.shape
    gh, gw = grid
    if h % gh or w % gw:
        raise ConfigError(f"grid {grid} does not divide {h}x{w}")
    return mask.reshape(h // gh, gh, w // gw, gw).mean(axis=(1, 3)) > 0.5


def _bar(yy, xx, cy, cx, length, width, angle):
    c, s = np.cos(angle), np.sin(angle)
    u = (xx - cx) * c + (yy - cy) * s
    v = -(xx - cx) * s + (yy - cy) * c
    return (np.abs(u) <= length / 2) & (np.abs(v) <= width / 2)


def _centre(rng, lo, hi):
    # lo/hi are the half-extents; a shape too large for the canvas is centred
    return rng.uniform(lo, hi) if hi > lo else 0.5 * (lo + hi)


def shape_mask(family: str, size: int, rng: np.random.Generator, scale: float = 1.0) -> np.ndarray:
    """Draw one shape of ``family`` at a random position inside the canvas.

    ``scale`` multiplies every extent (lengths, widths, radii); sizes are
    quoted for a 32-pixel canvas and follow ``size`` proportionally.
    """
    yy, xx = np.mgrid[0:size, 0:size].astype(float)
    u = scale * size / 32.0
    if family in ("hbar", "vbar", "dbar", "abar"):
        length, width = rng.uniform(16, 24) * u, rng.uniform(5, 8) * u
        angle = {"hbar": 0.0, "vbar": np.pi / 2, "dbar": np.pi / 4, "abar": -np.pi / 4}[family]
        reach = 0.5 * (length * abs(np.cos(angle)) + width * abs(np.sin(angle)))
        reach_y = 0.5 * (length * abs(np.sin(angle)) + width * abs(np.cos(angle)))
        cx = _centre(rng, reach, size - 1 - reach)
        cy = _centre(rng, reach_y, size - 1 - reach_y)
        return _bar(yy, xx, cy, cx, length, width, angle)
    if family == "disk":
        r = rng.uniform(5, 8) * u
        cy, cx = _centre(rng, r, size - 1 - r), _centre(rng, r, size - 1 - r)
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    if family == "ring":
        r = rng.uniform(8, 11) * u
        t = rng.uniform(4, 5.5) * u
        cy, cx = _centre(rng, r, size - 1 - r), _centre(rng, r, size - 1 - r)
        d2 = (yy - cy) ** 2 + (xx - cx) ** 2
        return (d2 <= r * r) & (d2 >= (r - t) ** 2)
    if family in ("cross", "xcross"):
        length, width = rng.uniform(16, 22) * u, rng.uniform(5, 7) * u
        base = 0.0 if family == "cross" else np.pi / 4
        reach = length / 2 if family == "cross" else (length / 2 + width / 2) / np.sqrt(2) + width / 2
        cy, cx = _centre(rng, reach, size - 1 - reach), _centre(rng, reach, size - 1 - reach)
        return (_bar(yy, xx, cy, cx, length, width, base)
                | _bar(yy, xx, cy, cx, length, width, base + np.pi / 2))
    raise ConfigError(f"unknown shape family {family!r}")


def _clutter(label: int, n_classes: int, size: int, rng: np.random.Generator, scale: float = 1.0) -> np.ndarray:
    tex = gaussian_filter(rng.standard_normal((size, size)), sigma=rng.uniform(2.5, 4.0), mode="wrap")
    tex = (tex - tex.min()) / max(np.ptp(tex), 1e-12)
    bg = 0.1 + 0.3 * tex
    others = [k for k in range(n_classes) if k != label]
    yy, xx = np.mgrid[0:size, 0:size].astype(float)
    for _ in range(rng.integers(1, 4)):
        frag = shape_mask(FAMILIES[rng.choice(others)], size, rng, scale)
        # keep one side of a random line through the fragment
        ang = rng.uniform(0, 2 * np.pi)
        py, px = np.argwhere(frag)[rng.integers(frag.sum())]
        frag &= (np.cos(ang) * (xx - px) + np.sin(ang) * (yy - py)) >= 0
        bg = np.where(frag, bg + rng.uniform(0.15, 0.3), bg)
    return bg


def make_sample(label: int, n_classes: int, rng: np.random.Generator, size: int = 32,
                grid=(4, 4), scale: float = 1.0) -> MaskedSample:
    family = FAMILIES[label]
    for _ in range(MAX_ATTEMPTS):
        mask = shape_mask(family, size, rng, scale)
        frac = mask.mean()
        cells = cell_mask(mask, grid)
        if not FG_FRACTION[0] <= frac <= FG_FRACTION[1] or cells.all() or not cells.any():
            continue
        img = _clutter(label, n_classes, size, rng, scale)
        img = np.where(mask, rng.uniform(0.75, 1.0) + 0.05 * rng.standard_normal((size, size)), img)
        return MaskedSample(np.clip(img, 0.0, 1.0)[None], int(label), mask)
    raise GenerationError(f"could not place a {family} shape after {MAX_ATTEMPTS} attempts")


def gen_dataset(seed: int, n_per_class: int, classes: int, size: int = 32, grid=(4, 4),
                split: str = "train", scale: float = 1.0) -> LabeledDataset:
    """Deterministic dataset of ``n_per_class * classes`` shuffled samples.

    Different ``split`` names draw from independent streams of the same seed,
    which is how the held-out probe set is produced.
    """
    if classes < 2:
        raise ConfigError("need at least two classes")
    if classes > len(FAMILIES):
        raise ConfigError(f"at most {len(FAMILIES)} classes are available")
    if n_per_class < 1:
        raise ConfigError("n_per_class must be positive")
    rng = np.random.default_rng([int(seed), 0xDA7A, zlib.crc32(split.encode())])
    labels = np.repeat(np.arange(classes), n_per_class)
    labels = labels[rng.permutation(len(labels))]
    samples = [make_sample(int(k), classes, rng, size, grid, scale) for k in labels]
    return LabeledDataset(
        images=np.stack([s.image for s in samples]),
        labels=labels.astype(np.int64),
        masks=np.stack([s.mask for s in samples]),
        n_classes=classes,
    )
