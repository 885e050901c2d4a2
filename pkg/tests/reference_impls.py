"""Independent brute-force implementations used as test oracles.

Everything here is deliberately written as plain loops over explicit
n-gram lists, scalar interpolation, central differences, or exhaustive
enumeration, so that it shares no code path with the package.
"""

from __future__ import annotations

import math

import numpy as np

from captionattack.metrics import bleu_n  # only for exhaustive fitness scoring
from captionattack.raster import Image, Perturbation, PixelDelta, apply_perturbation
from captionattack.toy import surrogate_loss, toy_caption


def bf_ngrams(tokens, n):
    return [tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1)]


def bf_modified_precision(cand, refs, n):
    grams = bf_ngrams(cand, n)
    if not grams:
        return 0.0
    clipped = 0
    for gram in set(grams):
        cand_count = grams.count(gram)
        ref_count = max(bf_ngrams(ref, n).count(gram) for ref in refs)
        clipped += min(cand_count, ref_count)
    return clipped / len(grams)


def bf_brevity_penalty(c, r):
    if c == 0:
        return 0.0
    if c > r:
        return 1.0
    return math.exp(1.0 - r / c)


def bf_closest_ref_length(c, refs):
    best = None
    for ref in refs:
        length = len(ref)
        if best is None:
            best = length
            continue
        if abs(length - c) < abs(best - c):
            best = length
        elif abs(length - c) == abs(best - c) and length < best:
            best = length
    return best


def bf_bleu(cand, refs, n):
    product = 1.0
    for order in range(1, n + 1):
        p = bf_modified_precision(cand, refs, order)
        if p == 0.0:
            return 0.0
        product *= p
    bp = bf_brevity_penalty(len(cand), bf_closest_ref_length(len(cand), refs))
    return bp * product ** (1.0 / n)


def bf_rouge(cand, refs, n):
    cand_grams = bf_ngrams(cand, n)
    matches = 0
    total = 0
    for ref in refs:
        ref_grams = bf_ngrams(ref, n)
        total += len(ref_grams)
        for gram in set(ref_grams):
            matches += min(ref_grams.count(gram), cand_grams.count(gram))
    if total == 0:
        return 0.0
    return matches / total


def bilinear_scalar(grid, out_h, out_w):
    """Pixel-by-pixel corner-aligned bilinear resampling."""
    in_h, in_w = grid.shape
    out = np.zeros((out_h, out_w))
    for i in range(out_h):
        sy = i * (in_h - 1) / (out_h - 1) if out_h > 1 else 0.0
        y0 = int(math.floor(sy))
        y1 = min(y0 + 1, in_h - 1)
        fy = sy - y0
        for j in range(out_w):
            sx = j * (in_w - 1) / (out_w - 1) if out_w > 1 else 0.0
            x0 = int(math.floor(sx))
            x1 = min(x0 + 1, in_w - 1)
            fx = sx - x0
            out[i, j] = (
                grid[y0, x0] * (1 - fy) * (1 - fx)
                + grid[y0, x1] * (1 - fy) * fx
                + grid[y1, x0] * fy * (1 - fx)
                + grid[y1, x1] * fy * fx
            )
    return out


def fd_loss_gradient(cfg, pixels, h=0.5):
    """Central finite differences of the toy surrogate loss."""
    base = np.asarray(pixels, dtype=np.float64)
    grad = np.zeros_like(base)
    for y in range(base.shape[0]):
        for x in range(base.shape[1]):
            for c in range(3):
                plus = base.copy()
                minus = base.copy()
                plus[y, x, c] += h
                minus[y, x, c] -= h
                grad[y, x, c] = (
                    surrogate_loss(cfg, plus) - surrogate_loss(cfg, minus)
                ) / (2 * h)
    return grad


def enumerate_single_pixel_fitness(toy_cfg, image: Image, refs, pixels, levels, strength):
    """Fitness of every (pixel, delta-triple) perturbation, in enumeration order."""
    fitnesses = []
    for x, y in pixels:
        for dr in levels:
            for dg in levels:
                for db in levels:
                    pert = Perturbation(
                        (PixelDelta(x=int(x), y=int(y), dr=dr, dg=dg, db=db),),
                        strength=strength,
                    )
                    tokens = toy_caption(toy_cfg, apply_perturbation(image, pert))
                    fitnesses.append(bleu_n(tokens, refs, 2))
    return fitnesses
