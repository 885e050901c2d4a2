"""Turning per-word attention grids into a pixel-level candidate region.

The caption oracle returns one non-negative grid per generated word, each
summing to 1 (soft attention). Sentence-based aggregation sums the grids
into a saliency map and keeps the top-k fraction of pixels; word-based
aggregation unions the per-word top-k sets instead. The resulting region
is what the optimizers are allowed to touch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import (
    BudgetExceedsRegionError,
    DegenerateAttentionError,
    EmptyCaptionError,
)

GRID_SUM_TOL = 1e-4


@dataclass(frozen=True, eq=False)
class AttentionStack:
    """Per-word attention grids: ``grids`` is (words, grid_height, grid_width)."""

    words: tuple[str, ...]
    grids: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "words", tuple(self.words))
        g = np.asarray(self.grids, dtype=np.float64)
        if g.ndim != 3:
            raise ValueError("grids must be a (words, height, width) array")
        if g.shape[0] != len(self.words):
            raise ValueError(
                f"{g.shape[0]} grids for {len(self.words)} words"
            )
        if np.any(g < 0):
            raise ValueError("attention entries must be non-negative")
        if len(self.words):
            sums = g.reshape(g.shape[0], -1).sum(axis=1)
            if np.any(np.abs(sums - 1.0) > GRID_SUM_TOL):
                raise ValueError(
                    f"attention grids must each sum to 1 within {GRID_SUM_TOL}"
                )
        g = g.copy()
        g.setflags(write=False)
        object.__setattr__(self, "grids", g)

    @property
    def grid_height(self) -> int:
        return self.grids.shape[1]

    @property
    def grid_width(self) -> int:
        return self.grids.shape[2]

    def __len__(self) -> int:
        return len(self.words)


@dataclass(frozen=True, eq=False)
class SaliencyMap:
    """Non-negative per-pixel weights at image resolution."""

    width: int
    height: int
    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.shape != (self.height, self.width):
            raise ValueError("weights must be a (height, width) array")
        if np.any(w < 0):
            raise ValueError("saliency weights must be non-negative")
        w = w.copy()
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)


@dataclass(frozen=True, eq=False)
class CandidateRegion:
    """Attention-selected pixels with weights renormalized to sum to 1.

    ``pixels`` is an (n, 2) array of (x, y) coordinates with no duplicates;
    ``weights`` aligns with it. Pixels pulled in purely by top-k tie-breaking
    may carry weight 0, but the positive mass always sums to 1.
    """

    width: int
    height: int
    pixels: np.ndarray
    weights: np.ndarray
    source_k: float

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.int64)
        w = np.asarray(self.weights, dtype=np.float64)
        if px.ndim != 2 or px.shape[1] != 2 or px.shape[0] != w.shape[0]:
            raise ValueError("pixels must be (n, 2) with matching weights")
        if px.shape[0] == 0:
            raise ValueError("candidate region must contain at least one pixel")
        if np.any(px[:, 0] < 0) or np.any(px[:, 0] >= self.width):
            raise ValueError("region x coordinate out of bounds")
        if np.any(px[:, 1] < 0) or np.any(px[:, 1] >= self.height):
            raise ValueError("region y coordinate out of bounds")
        flat = px[:, 1] * self.width + px[:, 0]
        if len(np.unique(flat)) != len(flat):
            raise ValueError("duplicate coordinates in candidate region")
        if np.any(w < 0):
            raise ValueError("region weights must be non-negative")
        total = w.sum()
        if total <= 0:
            raise DegenerateAttentionError("candidate region carries no attention mass")
        if abs(total - 1.0) > 1e-9:
            w = w / total
        px = px.copy()
        w = w.copy()
        px.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "pixels", px)
        object.__setattr__(self, "weights", w)

    @classmethod
    def uniform(cls, width: int, height: int) -> "CandidateRegion":
        """Whole-image region with equal weights (the no-attention fallback)."""
        ys, xs = np.divmod(np.arange(width * height), width)
        px = np.stack([xs, ys], axis=1)
        w = np.full(width * height, 1.0 / (width * height))
        return cls(width=width, height=height, pixels=px, weights=w, source_k=1.0)

    def __len__(self) -> int:
        return self.pixels.shape[0]

    def row_major_indices(self) -> np.ndarray:
        return self.pixels[:, 1] * self.width + self.pixels[:, 0]


def _bilinear_resample(grid: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Separable bilinear interpolation with corner-aligned sampling."""
    in_h, in_w = grid.shape
    ys = np.arange(out_h) * ((in_h - 1) / (out_h - 1)) if out_h > 1 else np.zeros(out_h)
    xs = np.arange(out_w) * ((in_w - 1) / (out_w - 1)) if out_w > 1 else np.zeros(out_w)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, in_h - 1)
    x1 = np.minimum(x0 + 1, in_w - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    top = grid[np.ix_(y0, x0)] * (1 - fx) + grid[np.ix_(y0, x1)] * fx
    bottom = grid[np.ix_(y1, x0)] * (1 - fx) + grid[np.ix_(y1, x1)] * fx
    return top * (1 - fy) + bottom * fy


def upsample(stack: AttentionStack, width: int, height: int) -> AttentionStack:
    """Resample every word grid to ``width`` x ``height`` and renormalize.

    Only upsampling is supported: target dimensions must be at least the
    grid dimensions.
    """
    if width < stack.grid_width or height < stack.grid_height:
        raise ValueError("target dimensions smaller than the attention grid")
    out = np.empty((len(stack), height, width), dtype=np.float64)
    for i in range(len(stack)):
        resampled = _bilinear_resample(stack.grids[i], height, width)
        total = resampled.sum()
        if total <= 0:
            raise DegenerateAttentionError(
                f"attention grid for word {stack.words[i]!r} vanished after resampling"
            )
        out[i] = resampled / total
    return AttentionStack(words=stack.words, grids=out)


def aggregate_sentence(stack: AttentionStack) -> SaliencyMap:
    """Sum the per-word grids into one saliency map (total mass = word count)."""
    if len(stack) == 0:
        raise EmptyCaptionError("cannot aggregate an empty attention stack")
    weights = stack.grids.sum(axis=0)
    return SaliencyMap(width=stack.grid_width, height=stack.grid_height, weights=weights)


def _top_indices(values: np.ndarray, count: int) -> np.ndarray:
    """Flat indices of the ``count`` largest values; ties broken by ascending
    row-major index."""
    flat = values.reshape(-1)
    order = np.lexsort((np.arange(flat.size), -flat))
    return order[:count]


def select_region(saliency: SaliencyMap, k: float) -> CandidateRegion:
    """Keep the ceil(k * P) highest-saliency pixels, weights renormalized."""
    if not 0 < k <= 1:
        raise ValueError("k must be a fraction in (0, 1]")
    total = saliency.weights.sum()
    if total <= 0:
        raise DegenerateAttentionError("all-zero saliency map")
    p = saliency.width * saliency.height
    count = math.ceil(k * p)
    idx = _top_indices(saliency.weights, count)
    ys, xs = np.divmod(idx, saliency.width)
    weights = saliency.weights.reshape(-1)[idx]
    return CandidateRegion(
        width=saliency.width,
        height=saliency.height,
        pixels=np.stack([xs, ys], axis=1),
        weights=weights,
        source_k=float(k),
    )


def aggregate_word(stack: AttentionStack, k: float) -> CandidateRegion:
    """Union of the per-word top-k pixel sets.

    Each pixel's weight is the maximum attention it receives among the words
    whose top set contains it (renormalized afterwards), so repeated or
    diffuse words do not double-count.
    """
    if len(stack) == 0:
        raise EmptyCaptionError("cannot aggregate an empty attention stack")
    if not 0 < k <= 1:
        raise ValueError("k must be a fraction in (0, 1]")
    h, w = stack.grid_height, stack.grid_width
    count = math.ceil(k * (h * w))
    member = np.zeros(h * w, dtype=bool)
    weight = np.zeros(h * w, dtype=np.float64)
    for i in range(len(stack)):
        flat = stack.grids[i].reshape(-1)
        idx = _top_indices(stack.grids[i], count)
        member[idx] = True
        weight[idx] = np.maximum(weight[idx], flat[idx])
    idx = np.flatnonzero(member)
    ys, xs = np.divmod(idx, w)
    return CandidateRegion(
        width=w,
        height=h,
        pixels=np.stack([xs, ys], axis=1),
        weights=weight[idx],
        source_k=float(k),
    )


def sample_pixels(region: CandidateRegion, m: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``m`` distinct coordinates, probability proportional to weight.

    Returns an (m, 2) array of (x, y). If the budget exceeds the number of
    positive-weight pixels, the zero-weight remainder is filled in ascending
    row-major order so that m == len(region) yields the whole region.
    """
    n = len(region)
    if m > n:
        raise BudgetExceedsRegionError(
            f"pixel budget {m} exceeds candidate region size {n}"
        )
    if m == 0:
        return np.empty((0, 2), dtype=np.int64)
    positive = np.flatnonzero(region.weights > 0)
    if m <= positive.size:
        probs = region.weights / region.weights.sum()
        chosen = rng.choice(n, size=m, replace=False, p=probs)
    else:
        zero = np.flatnonzero(region.weights == 0)
        zero = zero[np.argsort(region.row_major_indices()[zero], kind="stable")]
        chosen = np.concatenate([positive, zero[: m - positive.size]])
    return region.pixels[chosen]
