"""Shared fixtures: images sitting a known distance from a caption flip.

A boundary fixture is a mostly mid-gray image with two special cells of
the toy captioner's grid: a pure-white "anchor" cell (robustly captioned)
and a "boundary" cell whose mean color sits a few intensity units from the
decision boundary between two color anchors that differ in exactly one
channel. Raising that channel's cell mean past 127.5 flips one caption
word, which drops sentence BLEU-2 by a fixed, known amount.
"""

from __future__ import annotations

import sys

import numpy as np
import pytest

from captionattack.attention import aggregate_sentence, select_region, upsample
from captionattack.oracle import ToyOracle
from captionattack.raster import Image
from captionattack.toy import ToyCaptionerConfig

# (base color builder, channel that flips): value v is the flip channel's level
BOUNDARY_PAIRS = {
    "red_magenta": lambda v: (230, 10, v),
    "blue_cyan": lambda v: (10, v, 230),
    "green_yellow": lambda v: (v, 230, 10),
}

# BLEU-2 of a 12-token caption against itself with one non-repeated token
# replaced: sqrt(11/12 * 9/11) = sqrt(0.75).
FLIP_BLEU2 = 0.75 ** 0.5
FLIP_DROP = 1.0 - FLIP_BLEU2


def make_boundary_image(
    size=16,
    grid=4,
    cell=(2, 1),
    anchor=(3, 2),
    pair="red_magenta",
    value=124,
) -> Image:
    """Gray image with an anchor cell and a near-boundary cell.

    ``value`` is the flip channel's level; the cell mean crosses the
    127.5 decision boundary once the channel rises by 127.5 - value.
    """
    if cell == anchor:
        raise ValueError("boundary and anchor cells must differ")
    arr = np.full((size, size, 3), 128, dtype=np.uint8)
    step = size // grid

    def block(rc):
        r, c = rc
        return slice(r * step, (r + 1) * step), slice(c * step, (c + 1) * step)

    ys, xs = block(cell)
    arr[ys, xs] = BOUNDARY_PAIRS[pair](value)
    ys, xs = block(anchor)
    arr[ys, xs] = (255, 255, 255)
    return Image.from_array(arr)


def boundary_fixture_set(count=30, size=16, values=(124, 125)):
    """Deterministic list of varied boundary fixtures (bottom-half cells so
    they sit outside the function-word tie-break block)."""
    cells = [(2, 0), (2, 1), (2, 2), (2, 3), (3, 0)]
    fixtures = []
    for pair in BOUNDARY_PAIRS:
        for value in values:
            for cell in cells:
                fixtures.append(
                    make_boundary_image(size=size, cell=cell, anchor=(3, 2),
                                        pair=pair, value=value)
                )
    return fixtures[:count]


def sentence_region(oracle: ToyOracle, image: Image, k=0.5):
    clean = oracle.caption(image, want_attention=True)
    stack = upsample(clean.attention, image.width, image.height)
    return clean, select_region(aggregate_sentence(stack), k)


@pytest.fixture
def toy_oracle():
    return ToyOracle(ToyCaptionerConfig())


@pytest.fixture
def gray_image():
    return Image.filled(16, 16)


@pytest.fixture
def boundary_image():
    return make_boundary_image()


@pytest.fixture
def serve_toy_argv():
    return [sys.executable, "-m", "captionattack.serve_toy"]
