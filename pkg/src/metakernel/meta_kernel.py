"""
Meta kernels and the probability masks that slice candidate kernels out of them.

A candidate set such as {3x3, 5x5, 7x7} shares one trainable kernel of the
element-wise maximal shape.  Each candidate owns a centred region of that
shape; its mask carries the candidate's sampling probability inside the
region and zero elsewhere.  Summing the masks and multiplying by the meta
kernel yields a single effective kernel, so one convolution replaces the
weighted sum of N candidate convolutions.

Shapes are written (height, width) throughout.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .tensor import Tensor, ShapeError, as_tensor, matmul, mul, reshape


def _as_shape(s):
    if isinstance(s, (int, np.integer)):
        return (int(s), int(s))
    h, w = s
    return (int(h), int(w))


def _validate_shapes(shapes):
    if len(shapes) == 0:
        raise ValueError("candidate set is empty")
    for h, w in shapes:
        if h < 1 or w < 1:
            raise ValueError(f"candidate extents must be >= 1, got {h}x{w}")
        if h % 2 == 0 or w % 2 == 0:
            raise ValueError(f"candidate extents must be odd, got {h}x{w}")
    if len(set(shapes)) != len(shapes):
        raise ValueError("candidate shapes must be pairwise distinct")


@dataclass(frozen=True)
class CandidateSet:
    """Candidate kernel shapes plus the optional all-zero ``None`` choice.

    With ``include_none`` the None candidate takes index 0 and the listed
    shapes follow from index 1.
    """
    shapes: tuple
    include_none: bool = True

    def __post_init__(self):
        shapes = tuple(_as_shape(s) for s in self.shapes)
        _validate_shapes(shapes)
        object.__setattr__(self, "shapes", shapes)

    @classmethod
    def square(cls, sizes=(3, 5, 7), include_none=True):
        return cls(tuple((k, k) for k in sizes), include_none)

    @property
    def size(self):
        """Number of choices including None."""
        return len(self.shapes) + int(self.include_none)

    @property
    def offset(self):
        return int(self.include_none)

    @property
    def meta_shape(self):
        return build_meta_shape(self)

    def shape_at(self, index):
        """Shape of choice ``index``; None for the empty candidate."""
        if self.include_none and index == 0:
            return None
        return self.shapes[index - self.offset]

    @property
    def areas(self):
        out = [0] if self.include_none else []
        out += [h * w for h, w in self.shapes]
        return np.array(out, dtype=np.float64)

    @property
    def labels(self):
        out = ["none"] if self.include_none else []
        return out + [f"{h}x{w}" for h, w in self.shapes]

    def size_code(self, index):
        """Integer code used in exports: 0 for None, k for a square k x k."""
        shape = self.shape_at(index)
        if shape is None:
            return 0
        h, w = shape
        return h if h == w else h * 100 + w

    def index_of_code(self, code):
        for i in range(self.size):
            if self.size_code(i) == code:
                return i
        raise ValueError(f"size code {code} not in candidate set")


def build_meta_shape(candidates) -> tuple:
    """Element-wise maximum (height, width) over the candidates."""
    shapes = candidates.shapes if isinstance(candidates, CandidateSet) else tuple(
        _as_shape(s) for s in candidates)
    _validate_shapes(shapes)
    return (max(h for h, _ in shapes), max(w for _, w in shapes))


def roi_of(shape, meta_shape) -> tuple:
    """(top, left, h, w) of the centred region of ``shape`` inside ``meta_shape``."""
    h, w = _as_shape(shape)
    mh, mw = _as_shape(meta_shape)
    if h > mh or w > mw:
        raise ValueError(f"{h}x{w} is not compatible with meta shape {mh}x{mw}")
    if (mh - h) % 2 or (mw - w) % 2:
        raise ValueError(f"{h}x{w} cannot be centred in {mh}x{mw}")
    return ((mh - h) // 2, (mw - w) // 2, h, w)


def roi_indicators(candidates: CandidateSet) -> np.ndarray:
    """0/1 region masks, shape (choices, mh, mw); the None row is all zero."""
    mh, mw = candidates.meta_shape
    out = np.zeros((candidates.size, mh, mw))
    for i in range(candidates.size):
        shape = candidates.shape_at(i)
        if shape is None:
            continue
        top, left, h, w = roi_of(shape, (mh, mw))
        out[i, top:top + h, left:left + w] = 1.0
    return out


@dataclass
class ProbMask:
    values: np.ndarray
    candidate_index: int


def build_masks(candidates: CandidateSet, probs) -> list:
    probs = np.asarray(probs, dtype=np.float64)
    if probs.shape != (candidates.size,):
        raise ValueError(f"expected {candidates.size} probabilities, got {probs.shape}")
    if np.any(probs < 0):
        raise ValueError("probabilities must be non-negative")
    if abs(probs.sum() - 1.0) > 1e-9:
        raise ValueError(f"probabilities sum to {probs.sum()!r}, not 1")
    ind = roi_indicators(candidates)
    return [ProbMask(ind[i] * probs[i], i) for i in range(candidates.size)]


def summed_mask(probs, indicators) -> Tensor:
    """Differentiable cumulative mask, (F, mh, mw) from per-filter probs (F, M)."""
    probs = as_tensor(probs)
    m, mh, mw = indicators.shape
    if probs.ndim != 2 or probs.shape[1] != m:
        raise ShapeError(f"probabilities {probs.shape} do not match {m} candidates")
    flat = matmul(probs, indicators.reshape(m, mh * mw))
    return reshape(flat, (probs.shape[0], mh, mw))


@dataclass
class MetaKernel:
    """One maximal-shape kernel per depthwise filter, shape (C, 1, mh, mw)."""
    weights: Tensor

    @classmethod
    def init(cls, channels, candidates: CandidateSet, rng: np.random.Generator):
        mh, mw = candidates.meta_shape
        # fan-in from the meta shape keeps every candidate on one scale
        std = np.sqrt(2.0 / (mh * mw))
        w = rng.normal(0.0, std, size=(channels, 1, mh, mw))
        return cls(Tensor(w, requires_grad=True, name="meta_kernel"))

    @property
    def shape(self):
        return self.weights.shape[2:]


def effective_kernel(meta, masks) -> Tensor:
    """Sum of masks times the meta kernel, shape (C, 1, mh, mw).

    ``masks`` is a list of :class:`ProbMask` (shared by all filters), or a
    mask tensor of shape (mh, mw) or per-filter (C, mh, mw).
    """
    k = meta.weights if isinstance(meta, MetaKernel) else as_tensor(meta)
    mh, mw = k.shape[2], k.shape[3]
    if isinstance(masks, (list, tuple)):
        total = np.zeros((mh, mw))
        for m in masks:
            if m.values.shape != (mh, mw):
                raise ShapeError(f"mask {m.values.shape} does not match meta {mh}x{mw}")
            total = total + m.values
        return mul(k, total.reshape(1, 1, mh, mw))
    masks = as_tensor(masks)
    if masks.shape[-2:] != (mh, mw):
        raise ShapeError(f"mask {masks.shape} does not match meta {mh}x{mw}")
    if masks.ndim == 2:
        return mul(k, reshape(masks, (1, 1, mh, mw)))
    if masks.ndim == 3 and masks.shape[0] in (1, k.shape[0]):
        return mul(k, reshape(masks, (masks.shape[0], 1, mh, mw)))
    raise ShapeError(f"mask {masks.shape} cannot broadcast over kernel {k.shape}")
