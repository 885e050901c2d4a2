"""A deterministic in-process captioner for desk-scale experiments.

The image is divided into a G x G grid of cells. The two cells whose mean
color sits farthest from mid-gray are "salient"; each contributes the
phrase "a {color} patch at {row} {col}", where the color is the nearest of
eight RGB cube-corner anchors. Captions are pure functions of the image,
which makes attack outcomes reproducible and lets tests construct images a
known distance from a caption flip.

The captioner also emulates soft attention (cell-bound words attend
uniformly to their cell, "a"/"at" attend uniformly to the whole image) and
exposes an analytic gradient of a margin surrogate loss for the gradient
baselines.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import AttentionStack
from .errors import InternalConsistencyError
from .raster import Image

COLOR_CENTROIDS: tuple[tuple[str, tuple[int, int, int]], ...] = (
    ("red", (255, 0, 0)),
    ("green", (0, 255, 0)),
    ("blue", (0, 0, 255)),
    ("yellow", (255, 255, 0)),
    ("cyan", (0, 255, 255)),
    ("magenta", (255, 0, 255)),
    ("white", (255, 255, 255)),
    ("black", (0, 0, 0)),
)

_GRAY = np.array([128.0, 128.0, 128.0])

FUNCTION_WORDS = ("a", "at")

_ROW_NAMES = {
    1: ("middle",),
    2: ("top", "bottom"),
    3: ("top", "middle", "bottom"),
    4: ("top", "upper", "lower", "bottom"),
}
_COL_NAMES = {
    1: ("center",),
    2: ("left", "right"),
    3: ("left", "center", "right"),
    4: ("left", "midleft", "midright", "right"),
}


def _row_names(g: int) -> tuple[str, ...]:
    return _ROW_NAMES.get(g) or tuple(f"row{i}" for i in range(g))


def _col_names(g: int) -> tuple[str, ...]:
    return _COL_NAMES.get(g) or tuple(f"col{j}" for j in range(g))


@dataclass(frozen=True)
class ToyCaptionerConfig:
    """Grid resolution and how many salient cells are narrated."""

    grid: int = 4
    salient_cells: int = 2

    def __post_init__(self):
        if self.grid < 1:
            raise ValueError("grid must be >= 1")
        if not 1 <= self.salient_cells <= self.grid * self.grid:
            raise ValueError("salient_cells must be in [1, grid^2]")


def cell_bounds(cfg: ToyCaptionerConfig, width: int, height: int):
    """Row-major list of (y0, y1, x0, x1) half-open cell bounds."""
    g = cfg.grid
    if width < g or height < g:
        raise ValueError(f"image smaller than the {g}x{g} captioner grid")
    bounds = []
    for r in range(g):
        y0, y1 = r * height // g, (r + 1) * height // g
        for c in range(g):
            x0, x1 = c * width // g, (c + 1) * width // g
            bounds.append((y0, y1, x0, x1))
    return bounds


def _cell_means(cfg: ToyCaptionerConfig, pixels: np.ndarray) -> np.ndarray:
    h, w = pixels.shape[:2]
    means = np.empty((cfg.grid * cfg.grid, 3))
    for i, (y0, y1, x0, x1) in enumerate(cell_bounds(cfg, w, h)):
        means[i] = pixels[y0:y1, x0:x1].reshape(-1, 3).mean(axis=0)
    return means


def _salient_order(means: np.ndarray) -> np.ndarray:
    """Cell indices by descending distance from gray, ties by row-major index."""
    dist = np.linalg.norm(means - _GRAY, axis=1)
    return np.lexsort((np.arange(len(dist)), -dist))


def _nearest_two(mean: np.ndarray) -> tuple[int, int]:
    """Closest and second-closest centroid indices, ties by list order."""
    anchors = np.array([rgb for _, rgb in COLOR_CENTROIDS], dtype=np.float64)
    d = np.linalg.norm(anchors - mean, axis=1)
    first = int(np.argmin(d))
    d2 = d.copy()
    d2[first] = np.inf
    return first, int(np.argmin(d2))


def caption_with_trace(
    cfg: ToyCaptionerConfig, pixels: np.ndarray
) -> tuple[tuple[str, ...], tuple[int | None, ...]]:
    """Caption tokens plus, per token, the grid cell it narrates (None for
    the function words "a" and "at")."""
    arr = np.asarray(pixels, dtype=np.float64)
    means = _cell_means(cfg, arr)
    order = _salient_order(means)[: cfg.salient_cells]
    rows = _row_names(cfg.grid)
    cols = _col_names(cfg.grid)
    tokens: list[str] = []
    trace: list[int | None] = []
    for cell in order:
        cell = int(cell)
        color = COLOR_CENTROIDS[_nearest_two(means[cell])[0]][0]
        r, c = divmod(cell, cfg.grid)
        for tok, src in (
            ("a", None),
            (color, cell),
            ("patch", cell),
            ("at", None),
            (rows[r], cell),
            (cols[c], cell),
        ):
            tokens.append(tok)
            trace.append(src)
    return tuple(tokens), tuple(trace)


def toy_caption(cfg: ToyCaptionerConfig, image: Image) -> tuple[str, ...]:
    return caption_with_trace(cfg, image.pixels)[0]


def toy_attention(cfg: ToyCaptionerConfig, image: Image, tokens) -> AttentionStack:
    """Emulated soft attention for a caption this captioner produced.

    Cell-bound words get uniform weight over their cell's pixels; function
    words get uniform weight over the whole image. Each grid sums to 1.
    """
    expected, trace = caption_with_trace(cfg, image.pixels)
    if tuple(tokens) != expected:
        raise InternalConsistencyError(
            f"tokens {tuple(tokens)!r} were not produced by this captioner "
            f"for this image (expected {expected!r})"
        )
    h, w = image.height, image.width
    bounds = cell_bounds(cfg, w, h)
    grids = np.zeros((len(trace), h, w))
    for i, src in enumerate(trace):
        if src is None:
            grids[i, :, :] = 1.0 / (w * h)
        else:
            y0, y1, x0, x1 = bounds[src]
            grids[i, y0:y1, x0:x1] = 1.0 / ((y1 - y0) * (x1 - x0))
    return AttentionStack(words=tuple(tokens), grids=grids)


def surrogate_loss(cfg: ToyCaptionerConfig, pixels: np.ndarray) -> float:
    """Negative sum over salient cells of the color-classification margin.

    The margin is distance-to-second-nearest minus distance-to-nearest
    centroid of the cell mean; maximizing this loss pushes cell means toward
    color decision boundaries, which is what flips caption words. Accepts
    float pixel arrays so it can be finite-differenced.
    """
    arr = np.asarray(pixels, dtype=np.float64)
    means = _cell_means(cfg, arr)
    anchors = np.array([rgb for _, rgb in COLOR_CENTROIDS], dtype=np.float64)
    total = 0.0
    for cell in _salient_order(means)[: cfg.salient_cells]:
        d = np.linalg.norm(anchors - means[int(cell)], axis=1)
        first = int(np.argmin(d))
        d2 = d.copy()
        d2[first] = np.inf
        total += d2.min() - d[first]
    return -total


def toy_loss_gradient(cfg: ToyCaptionerConfig, image: Image) -> np.ndarray:
    """Analytic (H, W, 3) gradient of the surrogate loss.

    The salient-cell selection and centroid ranking are treated as locally
    constant, so the gradient is exact away from decision boundaries. Cell
    means exactly on a centroid contribute a zero subgradient.
    """
    arr = image.pixels.astype(np.float64)
    h, w = image.height, image.width
    means = _cell_means(cfg, arr)
    anchors = np.array([rgb for _, rgb in COLOR_CENTROIDS], dtype=np.float64)
    bounds = cell_bounds(cfg, w, h)
    grad = np.zeros((h, w, 3))
    for cell in _salient_order(means)[: cfg.salient_cells]:
        cell = int(cell)
        mean = means[cell]
        i1, i2 = _nearest_two(mean)
        d1 = np.linalg.norm(mean - anchors[i1])
        d2 = np.linalg.norm(mean - anchors[i2])
        g = np.zeros(3)
        if d2 > 1e-12:
            g -= (mean - anchors[i2]) / d2
        if d1 > 1e-12:
            g += (mean - anchors[i1]) / d1
        y0, y1, x0, x1 = bounds[cell]
        grad[y0:y1, x0:x1] = g / ((y1 - y0) * (x1 - x0))
    return grad
