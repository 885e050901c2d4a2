"""Fixed-size 8-bit RGB rasters and sparse per-pixel perturbations.

An attack touches at most a budgeted number of pixels, each by a bounded
signed RGB delta; every other pixel carries zero change. Applying a
perturbation saturates at the [0, 255] channel range.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import CoordinateError, InvalidPerturbationError


@dataclass(frozen=True, eq=False)
class Image:
    """Immutable 8-bit RGB raster; ``pixels`` is (height, width, 3) uint8."""

    width: int
    height: int
    pixels: np.ndarray

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image dimensions must be positive")
        px = np.asarray(self.pixels)
        if px.shape != (self.height, self.width, 3):
            raise ValueError(
                f"pixel array shape {px.shape} does not match "
                f"(height={self.height}, width={self.width}, 3)"
            )
        if px.dtype != np.uint8:
            raise ValueError("pixel channels must be uint8 in [0, 255]")
        px = px.copy()
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @classmethod
    def from_array(cls, arr) -> "Image":
        arr = np.asarray(arr)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise ValueError("expected an (H, W, 3) array")
        if arr.dtype != np.uint8:
            if np.any(arr < 0) or np.any(arr > 255):
                raise ValueError("channel values outside [0, 255]")
            arr = arr.astype(np.uint8)
        return cls(width=arr.shape[1], height=arr.shape[0], pixels=arr)

    @classmethod
    def filled(cls, width: int, height: int, rgb=(128, 128, 128)) -> "Image":
        arr = np.empty((height, width, 3), dtype=np.uint8)
        arr[:, :] = np.asarray(rgb, dtype=np.uint8)
        return cls(width=width, height=height, pixels=arr)

    def to_array(self) -> np.ndarray:
        """Writable copy of the raster."""
        return self.pixels.copy()

    def __eq__(self, other) -> bool:
        if not isinstance(other, Image):
            return NotImplemented
        return (
            self.width == other.width
            and self.height == other.height
            and np.array_equal(self.pixels, other.pixels)
        )

    def __hash__(self):
        return hash((self.width, self.height, self.pixels.tobytes()))


@dataclass(frozen=True)
class PixelDelta:
    """Signed RGB change at one pixel. ``x`` is the column, ``y`` the row."""

    x: int
    y: int
    dr: int
    dg: int
    db: int

    @property
    def channels(self) -> tuple[int, int, int]:
        return (self.dr, self.dg, self.db)


@dataclass(frozen=True)
class Perturbation:
    """A set of pixel deltas with a per-channel strength bound.

    Invariants: no two deltas share a coordinate, and every channel delta
    satisfies |d| <= strength.
    """

    deltas: tuple[PixelDelta, ...]
    strength: int

    def __post_init__(self):
        object.__setattr__(self, "deltas", tuple(self.deltas))
        if self.strength < 0:
            raise InvalidPerturbationError("strength bound must be non-negative")
        seen = set()
        for d in self.deltas:
            if (d.x, d.y) in seen:
                raise InvalidPerturbationError(
                    f"duplicate coordinate ({d.x}, {d.y}) in perturbation"
                )
            seen.add((d.x, d.y))
            if max(abs(d.dr), abs(d.dg), abs(d.db)) > self.strength:
                raise InvalidPerturbationError(
                    f"delta at ({d.x}, {d.y}) exceeds strength bound {self.strength}"
                )

    @classmethod
    def empty(cls, strength: int = 0) -> "Perturbation":
        return cls(deltas=(), strength=strength)

    def __len__(self) -> int:
        return len(self.deltas)


def apply_perturbation(image: Image, pert: Perturbation) -> Image:
    """Return a new image with each targeted channel clamped to [0, 255].

    Pixels not named by ``pert`` are copied unchanged; the input image is
    never modified. Raises CoordinateError for out-of-bounds targets.
    """
    out = image.pixels.astype(np.int16)
    for d in pert.deltas:
        if not (0 <= d.x < image.width and 0 <= d.y < image.height):
            raise CoordinateError(
                f"delta coordinate ({d.x}, {d.y}) outside "
                f"{image.width}x{image.height} image"
            )
        out[d.y, d.x, 0] += d.dr
        out[d.y, d.x, 1] += d.dg
        out[d.y, d.x, 2] += d.db
    np.clip(out, 0, 255, out=out)
    return Image(width=image.width, height=image.height, pixels=out.astype(np.uint8))


def perturbation_norms(pert: Perturbation) -> tuple[int, float, int]:
    """(linf, l2, count): max |channel delta|, Euclidean norm over all channel
    deltas, and the number of distinct pixels touched."""
    if not pert.deltas:
        return 0, 0.0, 0
    linf = 0
    sq = 0
    for d in pert.deltas:
        for c in d.channels:
            linf = max(linf, abs(c))
            sq += c * c
    return linf, math.sqrt(sq), len(pert.deltas)
