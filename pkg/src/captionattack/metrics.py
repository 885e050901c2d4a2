"""Sentence-level caption-quality metrics.

BLEU-n with brevity penalty, ROUGE-n recall, and the harmonic-style
BLEU*ROUGE/(BLEU+ROUGE) combination. All scoring is per caption (no corpus
pooling) because the attack fitness is evaluated one image at a time.
"""

from __future__ import annotations

import math
import string
from collections import Counter
from collections.abc import Sequence

from .errors import InvalidReferenceError

Tokens = tuple[str, ...]

_PUNCT = string.punctuation


def tokenize(text: str) -> Tokens:
    """Lowercase, split on whitespace, strip flanking ASCII punctuation.

    Interior punctuation (hyphens, apostrophes) is kept; tokens that reduce
    to the empty string are dropped.
    """
    out = []
    for raw in text.lower().split():
        tok = raw.strip(_PUNCT)
        if tok:
            out.append(tok)
    return tuple(out)


def _check_refs(refs: Sequence[Sequence[str]]) -> list[Tokens]:
    refs = [tuple(r) for r in refs]
    if not refs:
        raise InvalidReferenceError("reference set must contain at least one caption")
    return refs


def _ngram_counts(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def modified_precision(cand: Sequence[str], refs: Sequence[Sequence[str]], n: int) -> float:
    """Clipped n-gram precision: candidate counts are capped by the maximum
    count of the same n-gram in any single reference."""
    if n < 1:
        raise ValueError("n-gram order must be >= 1")
    refs = _check_refs(refs)
    cand_counts = _ngram_counts(cand, n)
    total = sum(cand_counts.values())
    if total == 0:
        return 0.0
    ref_counts = [_ngram_counts(r, n) for r in refs]
    clipped = 0
    for gram, count in cand_counts.items():
        clipped += min(count, max(rc[gram] for rc in ref_counts))
    return clipped / total


def closest_ref_length(c: int, refs: Sequence[Sequence[str]]) -> int:
    """Reference length nearest to the candidate length, ties toward shorter."""
    refs = _check_refs(refs)
    return min((len(r) for r in refs), key=lambda length: (abs(length - c), length))


def brevity_penalty(c: int, r: int) -> float:
    """1 when the candidate is longer than the reference, else e^(1 - r/c).

    An empty candidate (c = 0) gets penalty 0 so the score bottoms out
    instead of dividing by zero.
    """
    if c < 0 or r < 0:
        raise ValueError("lengths must be non-negative")
    if c == 0:
        return 0.0
    if c > r:
        return 1.0
    return math.exp(1.0 - r / c)


def bleu_n(
    cand: Sequence[str],
    refs: Sequence[Sequence[str]],
    n: int,
    smoothing: float = 0.0,
) -> float:
    """BLEU at order ``n``: brevity penalty times the geometric mean of the
    clipped precisions for orders 1..n (uniform 1/n weights).

    With ``smoothing`` left at 0, any zero precision forces a 0 score;
    a positive value is used as a floor for zero precisions instead.
    """
    if not 1 <= n <= 4:
        raise ValueError("BLEU order must be in 1..4")
    refs = _check_refs(refs)
    c = len(cand)
    r = closest_ref_length(c, refs)
    bp = brevity_penalty(c, r)
    if bp == 0.0:
        return 0.0
    log_sum = 0.0
    for i in range(1, n + 1):
        p = modified_precision(cand, refs, i)
        if p == 0.0:
            if smoothing <= 0.0:
                return 0.0
            p = smoothing
        log_sum += math.log(p)
    return bp * math.exp(log_sum / n)


def rouge_n(cand: Sequence[str], refs: Sequence[Sequence[str]], n: int) -> float:
    """N-gram recall against the pooled references.

    Per reference, each n-gram's match count is clipped by its count in the
    candidate; the denominator is the total number of reference n-grams.
    """
    if n < 1:
        raise ValueError("n-gram order must be >= 1")
    refs = _check_refs(refs)
    cand_counts = _ngram_counts(cand, n)
    matches = 0
    total = 0
    for ref in refs:
        rc = _ngram_counts(ref, n)
        total += sum(rc.values())
        for gram, count in rc.items():
            matches += min(count, cand_counts[gram])
    if total == 0:
        return 0.0
    return matches / total


def br_measure(b: float, r: float) -> float:
    """b*r/(b+r); 0 at b+r = 0 (the limit along b = r)."""
    if b + r == 0.0:
        return 0.0
    return b * r / (b + r)


METRIC_NAMES = ("bleu1", "bleu2", "bleu4", "rouge1", "rouge2", "br")

FITNESS_METRICS = ("bleu1", "bleu2", "bleu4")


def score_all(cand: Sequence[str], refs: Sequence[Sequence[str]]) -> dict[str, float]:
    """The six reported metrics; ``br`` combines BLEU-2 with ROUGE-2."""
    b1 = bleu_n(cand, refs, 1)
    b2 = bleu_n(cand, refs, 2)
    b4 = bleu_n(cand, refs, 4)
    r1 = rouge_n(cand, refs, 1)
    r2 = rouge_n(cand, refs, 2)
    return {
        "bleu1": b1,
        "bleu2": b2,
        "bleu4": b4,
        "rouge1": r1,
        "rouge2": r2,
        "br": br_measure(b2, r2),
    }


def fitness_value(name: str, cand: Sequence[str], refs: Sequence[Sequence[str]]) -> float:
    """Evaluate one of the BLEU fitness metrics by name."""
    if name not in FITNESS_METRICS:
        raise ValueError(f"unknown fitness metric {name!r}; expected one of {FITNESS_METRICS}")
    return bleu_n(cand, refs, int(name[-1]))
