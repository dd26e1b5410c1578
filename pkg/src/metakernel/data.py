"""
Datasets: seeded synthetic receptive-field tasks and IDX (MNIST-format) files.

The synthetic task draws a few motifs per image whose orientation is the
class.  A motif is three dots spaced ``radius`` pixels apart along the class
direction.  ``small_structure`` uses radius 1, a solid 3-pixel segment that a
3x3 filter reads directly.  ``large_structure`` uses radius 5, a dotted line
11 pixels long: any 3x3 or 5x5 patch holds at most one dot, so the
orientation is only visible to filters spanning several dots.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

# (dy, dx) orientation per class
DIRECTIONS = ((0, 1), (1, 0), (1, 1), (1, -1), (1, 2), (2, 1), (1, -2), (2, -1))
SCALE_MODES = ("small_structure", "large_structure")
DEFAULT_RADIUS = {"small_structure": 1, "large_structure": 5}


@dataclass
class SyntheticTaskConfig:
    image_size: int = 24
    channels: int = 1
    num_classes: int = 4
    scale_mode: str = "large_structure"
    n_train: int = 4000
    n_test: int = 1000
    noise: float = 0.1
    motifs: int = 6
    clutter: int = 0
    radius: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.scale_mode not in SCALE_MODES:
            raise ValueError(f"scale_mode must be one of {SCALE_MODES}")
        if not 2 <= self.num_classes <= len(DIRECTIONS):
            raise ValueError(f"num_classes must lie in [2, {len(DIRECTIONS)}]")
        if self.radius is None:
            self.radius = DEFAULT_RADIUS[self.scale_mode]
        reach = self.radius * max(max(abs(d) for d in v) for v in DIRECTIONS[:self.num_classes])
        if self.radius < 1 or not reach < self.image_size / 2:
            raise ValueError(f"pattern radius {self.radius} does not fit a {self.image_size}px image")
        if self.noise < 0:
            raise ValueError("noise must be non-negative")
        if self.motifs < 1 or self.clutter < 0:
            raise ValueError("need motifs >= 1 and clutter >= 0")


@dataclass
class Split:
    x: np.ndarray   # (N, C, H, W) float64
    y: np.ndarray   # (N,) int64

    def __len__(self):
        return len(self.y)


@dataclass
class Dataset:
    train: Split
    test: Split
    num_classes: int


def _motif_offsets(cfg, label):
    dy, dx = DIRECTIONS[label]
    r = cfg.radius
    return [(t * r * dy, t * r * dx) for t in (-1, 0, 1)]


def _render(cfg, label, rng):
    s = cfg.image_size
    img = np.zeros((cfg.channels, s, s))
    offsets = _motif_offsets(cfg, label)
    reach = max(max(abs(a), abs(b)) for a, b in offsets)
    for _ in range(cfg.motifs):
        cy, cx = rng.integers(reach, s - reach, size=2)
        amp = rng.uniform(0.7, 1.0)
        for oy, ox in offsets:
            img[:, cy + oy, cx + ox] = amp
    # isolated distractor dots: same look as motif dots, no orientation
    for _ in range(cfg.clutter):
        cy, cx = rng.integers(0, s, size=2)
        img[:, cy, cx] = rng.uniform(0.7, 1.0)
    if cfg.noise > 0:
        img += rng.normal(0.0, cfg.noise, size=img.shape)
    return img


def _split(cfg, split_id, n):
    labels = np.arange(n) % cfg.num_classes
    perm = np.random.default_rng(np.random.SeedSequence([cfg.seed, split_id, 0xDA7A])).permutation(n)
    labels = labels[perm]
    x = np.empty((n, cfg.channels, cfg.image_size, cfg.image_size))
    for i in range(n):
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, split_id, i]))
        x[i] = _render(cfg, int(labels[i]), rng)
    return Split(x, labels.astype(np.int64))


def generate_dataset(cfg: SyntheticTaskConfig) -> Dataset:
    """Deterministic under ``cfg.seed``; each sample has its own seed stream."""
    return Dataset(_split(cfg, 0, cfg.n_train), _split(cfg, 1, cfg.n_test), cfg.num_classes)


class IdxFormatError(ValueError):
    pass


IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


def _read_header(buf, magic, ndim, what):
    need = 4 + 4 * ndim
    if len(buf) < need:
        raise IdxFormatError(f"{what}: truncated header ({len(buf)} of {need} bytes)")
    (found,) = struct.unpack(">I", buf[:4])
    if found != magic:
        raise IdxFormatError(f"{what}: bad magic 0x{found:08x} at offset 0, expected 0x{magic:08x}")
    dims = struct.unpack(f">{ndim}I", buf[4:need])
    return dims, need


def load_idx(images_path, labels_path, num_classes: int = 10) -> Split:
    """Read an IDX image/label pair; pixels are scaled to [0, 1]."""
    ibuf = Path(images_path).read_bytes()
    lbuf = Path(labels_path).read_bytes()
    (n, rows, cols), ioff = _read_header(ibuf, IMAGE_MAGIC, 3, "images")
    (m,), loff = _read_header(lbuf, LABEL_MAGIC, 1, "labels")
    if n != m:
        raise IdxFormatError(f"count mismatch: {n} images vs {m} labels")
    need = ioff + n * rows * cols
    if len(ibuf) < need:
        raise IdxFormatError(f"images: truncated data at offset {len(ibuf)}, expected {need} bytes")
    if len(lbuf) < loff + m:
        raise IdxFormatError(f"labels: truncated data at offset {len(lbuf)}, expected {loff + m} bytes")
    pixels = np.frombuffer(ibuf, dtype=np.uint8, count=n * rows * cols, offset=ioff)
    labels = np.frombuffer(lbuf, dtype=np.uint8, count=m, offset=loff).astype(np.int64)
    bad = np.nonzero(labels >= num_classes)[0]
    if bad.size:
        i = int(bad[0])
        raise IdxFormatError(f"label out of range: {labels[i]} at offset {loff + i} "
                             f"(num_classes={num_classes})")
    x = pixels.reshape(n, 1, rows, cols).astype(np.float64) / 255.0
    return Split(x, labels)


def write_idx(images_path, labels_path, images, labels):
    """Write uint8 images (N, H, W) and labels (N,) as an IDX pair."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = images.shape
    Path(images_path).write_bytes(struct.pack(">IIII", IMAGE_MAGIC, n, rows, cols) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", LABEL_MAGIC, len(labels)) + labels.tobytes())
