"""Procedural geometric-concept images and visible backdoor triggers."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import pnm
from .errors import InputError

SHAPES = ("circle", "square", "triangle", "cross", "ring", "stripes")
SUPERSAMPLE = 4
NOISE_AMPLITUDE = 0.1


@dataclass(frozen=True)
class ConceptSpec:
    label: int
    shape_kind: str
    size: tuple = (7.0, 10.0)          # circumradius in pixels
    offset: tuple = (-6.0, 6.0)        # centre jitter from the image centre, both axes
    rotation: tuple = (-20.0, 20.0)    # degrees
    background: tuple = (0.1, 0.9)     # base grey level
    contrast: tuple = (0.4, 0.7)       # |foreground - background|
    tint: float = 0.08                 # per-channel colour jitter

    def __post_init__(self):
        if self.shape_kind not in SHAPES:
            raise InputError(f"unknown shape {self.shape_kind!r}; choose from {SHAPES}")
        for name in ("size", "offset", "rotation", "background", "contrast"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise InputError(f"{name} range ({lo}, {hi}) has min > max")


def default_specs(num_classes: int = 4) -> list[ConceptSpec]:
    if not 2 <= num_classes <= len(SHAPES):
        raise InputError(f"default specs cover 2..{len(SHAPES)} classes")
    return [ConceptSpec(i, SHAPES[i]) for i in range(num_classes)]


@dataclass
class Dataset:
    images: np.ndarray          # (n, h, w, c) float32 in [0, 1]
    labels: np.ndarray          # (n,) int64
    seed: int = 0

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise InputError(f"{len(self.images)} images but {len(self.labels)} labels")

    def __len__(self):
        return len(self.labels)

    @property
    def image_shape(self) -> tuple:
        return tuple(self.images.shape[1:])

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], self.seed)


def _inside(kind: str, u: np.ndarray, v: np.ndarray, r: float) -> np.ndarray:
    if kind == "circle":
        return u * u + v * v <= r * r
    if kind == "square":
        s = 0.85 * r
        return (np.abs(u) <= s) & (np.abs(v) <= s)
    if kind == "triangle":
        # equilateral, apex up, circumradius r
        return (v >= -r / 2) & (math.sqrt(3.0) * u + v <= r) & (-math.sqrt(3.0) * u + v <= r)
    if kind == "cross":
        arm = 0.3 * r
        return ((np.abs(u) <= r) & (np.abs(v) <= arm)) | ((np.abs(v) <= r) & (np.abs(u) <= arm))
    if kind == "ring":
        d2 = u * u + v * v
        return (d2 <= r * r) & (d2 >= (0.55 * r) ** 2)
    if kind == "stripes":
        s = r / math.sqrt(2.0)
        band = np.floor((v + s) / (s / 2.5)).astype(int) % 2 == 0
        return (np.abs(u) <= s) & (np.abs(v) <= s) & band
    raise InputError(kind)


def coverage(kind: str, h: int, w: int, cx: float, cy: float, r: float, angle_deg: float) -> np.ndarray:
    """Anti-aliased (h, w) coverage in [0, 1] by SUPERSAMPLE x SUPERSAMPLE point sampling."""
    s = SUPERSAMPLE
    off = (np.arange(s) + 0.5) / s
    ys = (np.arange(h)[:, None] + off[None, :]).reshape(-1)
    xs = (np.arange(w)[:, None] + off[None, :]).reshape(-1)
    y, x = np.meshgrid(ys - cy, xs - cx, indexing="ij")
    t = math.radians(angle_deg)
    u = math.cos(t) * x + math.sin(t) * y
    # image rows grow downward; flip so "up" in shape coordinates is up on screen
    v = -(-math.sin(t) * x + math.cos(t) * y)
    hit = _inside(kind, u, v, r).astype(np.float32)
    return hit.reshape(h, s, w, s).mean(axis=(1, 3))


def render(spec: ConceptSpec, rng: np.random.Generator, shape=(32, 32, 3)) -> np.ndarray:
    h, w, c = shape
    r = rng.uniform(*spec.size)
    cx = w / 2 + rng.uniform(*spec.offset)
    cy = h / 2 + rng.uniform(*spec.offset)
    angle = rng.uniform(*spec.rotation)
    bg = rng.uniform(*spec.background)
    contrast = rng.uniform(*spec.contrast)
    # random polarity unless only one direction fits in [0, 1]
    up_ok, down_ok = bg + contrast <= 1.0, bg - contrast >= 0.0
    sign = rng.choice([-1.0, 1.0]) if up_ok == down_ok else (1.0 if up_ok else -1.0)
    fg = bg + sign * contrast
    bg_col = bg + rng.uniform(-spec.tint, spec.tint, size=c)
    fg_col = fg + rng.uniform(-spec.tint, spec.tint, size=c)
    cov = coverage(spec.shape_kind, h, w, cx, cy, r, angle)[:, :, None]
    img = bg_col * (1.0 - cov) + fg_col * cov
    img = img + rng.uniform(-NOISE_AMPLITUDE, NOISE_AMPLITUDE, size=shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def generate(specs: list[ConceptSpec], n_per_class: int, seed: int, shape=(32, 32, 3)) -> Dataset:
    """Balanced dataset; image i is rendered from its own RNG stream keyed by (seed, i)."""
    if len(specs) < 2:
        raise InputError("need at least two concepts")
    if n_per_class < 1:
        raise InputError("n_per_class must be >= 1")
    labels_seen = sorted(s.label for s in specs)
    if labels_seen != list(range(len(specs))):
        raise InputError(f"concept labels must be 0..{len(specs) - 1}, got {labels_seen}")
    geometry = [replace(s, label=0) for s in specs]
    if len(set(geometry)) < len(geometry):
        warnings.warn("two concepts share identical rendering parameters; classes will overlap", stacklevel=2)
    by_label = {s.label: s for s in specs}
    labels = np.tile(np.arange(len(specs)), n_per_class)
    labels = np.random.default_rng([seed, 0xDA7A]).permutation(labels)
    images = np.empty((len(labels), *shape), np.float32)
    for i, lab in enumerate(labels):
        images[i] = render(by_label[int(lab)], np.random.default_rng([seed, i]), shape)
    return Dataset(images, labels, seed)


# backdoor triggers

@dataclass
class TriggerSpec:
    mask: np.ndarray            # (h, w) in {0, 1}
    pattern: np.ndarray         # (h, w, c) in [0, 1]
    target_label: int
    poison_fraction: float = 0.1
    name: str = "custom"

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=np.float32)
        self.pattern = np.asarray(self.pattern, dtype=np.float32)
        if self.pattern.shape[:2] != self.mask.shape:
            raise InputError("trigger pattern and mask shapes differ")
        if not np.isin(self.mask, (0.0, 1.0)).all():
            raise InputError("trigger mask must be binary")
        if not 0.0 < self.poison_fraction <= 1.0:
            raise InputError("poison_fraction must lie in (0, 1]")
        if self.mask.any():
            _, n = ndimage.label(self.mask)
            if n != 1:
                raise InputError("trigger mask must be one contiguous region")
        if self.mask.mean() > 0.15:
            raise InputError("trigger mask covers more than 15% of the image")


TRIGGER_KINDS = ("square", "checkerboard", "cross")


def corner_mask(image_shape, size: int = 8, corner: str = "br", margin: int = 1) -> np.ndarray:
    h, w = image_shape[:2]
    mask = np.zeros((h, w), np.float32)
    top = margin if corner[0] == "t" else h - size - margin
    left = margin if corner[1] == "l" else w - size - margin
    mask[top:top + size, left:left + size] = 1.0
    return mask


def make_trigger(kind: str, target_label: int, image_shape=(32, 32, 3), size: int = 8,
                 corner: str = "br", poison_fraction: float = 0.1) -> TriggerSpec:
    """Visible trigger in a corner patch: solid square, checkerboard or cross glyph."""
    h, w, c = image_shape
    mask = corner_mask(image_shape, size, corner)
    rows, cols = np.nonzero(mask)
    top, left = rows.min(), cols.min()
    ii, jj = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    if kind == "square":
        tile = np.broadcast_to(np.array([1.0, 1.0, 0.0][:c] if c == 3 else [1.0]), (size, size, c))
    elif kind == "checkerboard":
        tile = np.repeat((((ii // 2) + (jj // 2)) % 2).astype(np.float32)[:, :, None], c, axis=2)
    elif kind == "cross":
        mid = size // 2
        glyph = ((np.abs(ii - mid + 0.5) < 1.5) | (np.abs(jj - mid + 0.5) < 1.5)).astype(np.float32)
        tile = np.repeat(glyph[:, :, None], c, axis=2)
        if c == 3:
            tile = tile * np.array([1.0, 0.2, 1.0])
    else:
        raise InputError(f"unknown trigger kind {kind!r}; choose from {TRIGGER_KINDS}")
    pattern = np.zeros((h, w, c), np.float32)
    pattern[top:top + size, left:left + size] = tile
    return TriggerSpec(mask, pattern, target_label, poison_fraction, kind)


def apply_trigger(img, trig: TriggerSpec) -> np.ndarray:
    """img * (1 - mask) + pattern * mask, for one image or a batch."""
    img = np.asarray(img, dtype=np.float32)
    if img.shape[-3:] != trig.pattern.shape:
        raise InputError(f"image shape {img.shape} does not match trigger {trig.pattern.shape}")
    m = trig.mask[:, :, None]
    return np.clip(img * (1.0 - m) + trig.pattern * m, 0.0, 1.0).astype(np.float32)


def poison_indices(n: int, fraction: float, seed: int) -> np.ndarray:
    count = int(math.floor(fraction * n + 1e-9))
    return np.random.default_rng([seed, 0xBAD]).permutation(n)[:count]


def poison(ds: Dataset, trig: TriggerSpec, seed: int) -> Dataset:
    idx = poison_indices(len(ds), trig.poison_fraction, seed)
    images = ds.images.copy()
    labels = ds.labels.copy()
    images[idx] = apply_trigger(images[idx], trig)
    labels[idx] = trig.target_label
    return Dataset(images, labels, ds.seed)


# on-disk format: P5/P6 images plus labels.tsv

def export_dataset(ds: Dataset, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    ext = "ppm" if ds.images.shape[-1] == 3 else "pgm"
    lines = []
    for i, (img, lab) in enumerate(zip(ds.images, ds.labels)):
        name = f"{i:06d}.{ext}"
        pnm.write(d / name, img)
        lines.append(f"{name}\t{int(lab)}\n")
    (d / "labels.tsv").write_text("".join(lines))


def import_dataset(directory, seed: int = 0) -> Dataset:
    d = Path(directory)
    tsv = d / "labels.tsv"
    if not tsv.exists():
        raise InputError(f"{tsv} not found")
    images, labels = [], []
    for line in tsv.read_text().splitlines():
        if not line.strip():
            continue
        name, lab = line.split("\t")
        images.append(pnm.read_float(d / name))
        labels.append(int(lab))
    if not images:
        raise InputError(f"{tsv} lists no images")
    return Dataset(np.stack(images), np.array(labels), seed)
