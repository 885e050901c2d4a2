"""Attack optimizers.

The main attack runs differential evolution over a genome of m pixel
slots, five genes each: (x, y, dr, dg, db). Coordinates are sampled from
the attention-weighted candidate region and evolve as reals; a repair step
snaps them back onto distinct region pixels and clips channel deltas to the
strength bound before every oracle evaluation. Mutants are built from a
scaled difference of two population members added to a third; a child
replaces its parent when strictly fitter, and the global best additionally
tracks any child that beats both the incumbent best and its parent.

Baselines: global-best particle swarm over the same genome (with l-inf and
l2 projection), single-step and iterated signed-gradient attacks masked to
the candidate region, and random-pixel variants that drop the attention
prior.

Fitness is the caption-quality metric of the perturbed image's caption
against the references; lower is better for the attacker. Every optimizer
seeds its best-so-far with the clean image, so a reported outcome is never
worse than no attack.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .attention import CandidateRegion, sample_pixels
from .errors import BudgetError, ConfigError, UnsupportedCapabilityError
from .metrics import FITNESS_METRICS, fitness_value, score_all
from .oracle import CaptionOracle, CaptionResult
from .raster import Image, Perturbation, PixelDelta, apply_perturbation

GENES_PER_PIXEL = 5


@dataclass
class DEConfig:
    """Differential-evolution knobs.

    ``delta_levels``, when set, restricts channel deltas to a fixed ladder
    (e.g. (-50, 0, 50)) during repair; used to make tiny search spaces
    exhaustively checkable.
    """

    popsize: int = 50
    generations: int = 5
    weight: float = 0.5
    strength: int = 50
    pixels: int = 500
    fitness: str = "bleu2"
    seed: int = 0
    delta_levels: tuple[int, ...] | None = None

    def validate(self) -> None:
        if self.popsize < 4:
            raise ConfigError("popsize must be >= 4 (mutation needs three distinct others)")
        if self.generations < 0:
            raise ConfigError("generations must be >= 0")
        if self.weight <= 0:
            raise ConfigError("differential weight must be positive")
        if self.strength < 0:
            raise ConfigError("strength must be >= 0")
        if self.pixels < 1:
            raise ConfigError("pixel budget must be >= 1")
        if self.fitness not in FITNESS_METRICS:
            raise ConfigError(f"fitness must be one of {FITNESS_METRICS}")
        if self.delta_levels is not None:
            if not self.delta_levels:
                raise ConfigError("delta_levels must be non-empty when set")
            if max(abs(v) for v in self.delta_levels) > self.strength:
                raise ConfigError("delta_levels exceed the strength bound")


@dataclass
class GradConfig:
    """Signed-gradient attack knobs; one step for fgsm, ``iterations`` for pgd."""

    epsilon: float = 8.0
    iterations: int = 30
    step: float | None = None

    def validate(self) -> None:
        if self.epsilon <= 0:
            raise ConfigError("epsilon must be positive")
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1")
        if self.step is not None and self.step <= 0:
            raise ConfigError("step must be positive")

    def step_size(self) -> float:
        return self.step if self.step is not None else self.epsilon / self.iterations


@dataclass
class PSOConfig:
    """Global-best particle swarm knobs with norm budgets on the perturbation."""

    swarm: int = 50
    iterations: int = 50
    linf_bound: float = 16.0
    l2_bound: float = 5.0
    inertia: float = 0.7
    cognitive: float = 1.5
    social: float = 1.5
    delta_levels: tuple[int, ...] | None = None

    def validate(self) -> None:
        if self.swarm < 2:
            raise ConfigError("swarm must be >= 2")
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        if self.linf_bound <= 0 or self.l2_bound <= 0:
            raise ConfigError("norm bounds must be positive")


@dataclass
class Candidate:
    """One genome: m groups of (x, y, dr, dg, db), plus its cached fitness."""

    genes: np.ndarray
    fitness: float | None = None


@dataclass
class AttackOutcome:
    """What an attack run produced, with enough bookkeeping to audit it."""

    adversarial: Image
    perturbation: Perturbation
    clean_fitness: float
    adv_fitness: float
    metrics_before: dict[str, float]
    metrics_after: dict[str, float]
    clean_tokens: tuple[str, ...]
    adv_tokens: tuple[str, ...]
    oracle_calls: int
    generations_run: int
    trace: tuple[float, ...] = field(default_factory=tuple)
    truncated: bool = False


def _quantize(values: np.ndarray, levels: tuple[int, ...]) -> np.ndarray:
    ladder = np.asarray(sorted(levels), dtype=np.float64)
    idx = np.abs(values[:, None] - ladder[None, :]).argmin(axis=1)
    return ladder[idx]


def repair(
    genes: np.ndarray,
    region: CandidateRegion,
    strength: float,
    delta_levels: tuple[int, ...] | None = None,
) -> np.ndarray:
    """Make a raw genome evaluable: round coordinates and snap each onto the
    nearest region pixel (Euclidean, ties by ascending row-major index),
    re-snapping duplicates to the nearest unused pixel; clip channel deltas
    to [-strength, +strength] and round to integers.

    Repairing an already-valid genome is the identity.
    """
    g = np.asarray(genes, dtype=np.float64).reshape(-1, GENES_PER_PIXEL).copy()
    m = g.shape[0]
    if m > len(region):
        raise ConfigError(f"genome wants {m} pixels but region has {len(region)}")
    rx = region.pixels[:, 0]
    ry = region.pixels[:, 1]
    row_major = region.row_major_indices()
    index_of = _region_index(region)
    used_mask = np.zeros(len(region), dtype=bool)

    coords = np.rint(g[:, :2]).astype(np.int64)
    for i in range(m):
        x, y = int(coords[i, 0]), int(coords[i, 1])
        slot = index_of.get((x, y))
        if slot is None or used_mask[slot]:
            d2 = (rx - x) ** 2 + (ry - y) ** 2
            d2 = np.where(used_mask, np.iinfo(np.int64).max, d2)
            best = np.flatnonzero(d2 == d2.min())
            slot = int(best[np.argmin(row_major[best])])
        used_mask[slot] = True
        g[i, 0] = rx[slot]
        g[i, 1] = ry[slot]

    deltas = np.rint(np.clip(g[:, 2:5], -strength, strength))
    if delta_levels is not None:
        deltas = _quantize(deltas.reshape(-1), delta_levels).reshape(-1, 3)
    g[:, 2:5] = deltas
    return g.reshape(-1)


_REGION_INDEX_ATTR = "_coord_index_cache"


def _region_index(region: CandidateRegion) -> dict:
    cached = getattr(region, _REGION_INDEX_ATTR, None)
    if cached is None:
        cached = {
            (int(x), int(y)): i for i, (x, y) in enumerate(region.pixels)
        }
        object.__setattr__(region, _REGION_INDEX_ATTR, cached)
    return cached


def candidate_perturbation(cand: Candidate, strength: int) -> Perturbation:
    """Decode a repaired genome into a sparse perturbation."""
    g = cand.genes.reshape(-1, GENES_PER_PIXEL)
    deltas = tuple(
        PixelDelta(
            x=int(row[0]), y=int(row[1]),
            dr=int(row[2]), dg=int(row[3]), db=int(row[4]),
        )
        for row in g
    )
    return Perturbation(deltas=deltas, strength=strength)


def init_population(
    region: CandidateRegion, cfg: DEConfig, rng: np.random.Generator
) -> list[Candidate]:
    """popsize candidates: coordinates sampled by attention weight without
    replacement within each candidate, channel deltas uniform integers in
    [-s, +s], then repaired (a no-op unless delta_levels quantization is on).
    """
    pop = []
    for _ in range(cfg.popsize):
        coords = sample_pixels(region, cfg.pixels, rng).astype(np.float64)
        deltas = rng.integers(-cfg.strength, cfg.strength + 1,
                              size=(cfg.pixels, 3)).astype(np.float64)
        genes = np.concatenate([coords, deltas], axis=1).reshape(-1)
        pop.append(Candidate(genes=repair(genes, region, cfg.strength, cfg.delta_levels)))
    return pop


def de_mutant(a: np.ndarray, b: np.ndarray, c: np.ndarray, weight: float) -> np.ndarray:
    """Raw differential mutant: a + weight * (b - c)."""
    return np.asarray(a, dtype=np.float64) + weight * (
        np.asarray(b, dtype=np.float64) - np.asarray(c, dtype=np.float64)
    )


def mutate(
    pop: list[Candidate],
    j: int,
    weight: float,
    rng: np.random.Generator,
    region: CandidateRegion,
    strength: float,
    delta_levels: tuple[int, ...] | None = None,
) -> Candidate:
    """Child for slot j from three distinct other members, then repaired."""
    if len(pop) < 4:
        raise ConfigError("mutation needs a population of at least 4")
    others = [i for i in range(len(pop)) if i != j]
    picks = rng.choice(len(others), size=3, replace=False)
    r1, r2, r3 = (others[int(p)] for p in picks)
    raw = de_mutant(pop[r1].genes, pop[r2].genes, pop[r3].genes, weight)
    return Candidate(genes=repair(raw, region, strength, delta_levels))


class _Evaluator:
    """Applies a candidate, captions it (one oracle call), scores fitness."""

    def __init__(self, image: Image, refs, endpoint: CaptionOracle,
                 metric: str, strength: int):
        self.image = image
        self.refs = refs
        self.endpoint = endpoint
        self.metric = metric
        self.strength = strength
        self.calls = 0

    def __call__(self, cand: Candidate) -> tuple[float, tuple[str, ...]]:
        pert = candidate_perturbation(cand, self.strength)
        adv = apply_perturbation(self.image, pert)
        result = self.endpoint.caption(adv)
        self.calls += 1
        return fitness_value(self.metric, result.tokens, self.refs), result.tokens


def evaluate_fitness(
    cand: Candidate, image: Image, refs, endpoint: CaptionOracle,
    metric: str, strength: int,
) -> float:
    """Fitness of one repaired candidate; exactly one oracle call."""
    return _Evaluator(image, refs, endpoint, metric, strength)(cand)[0]


class _BestTracker:
    """Best-so-far seeded with the clean image (zero perturbation)."""

    def __init__(self, clean_fitness: float, clean_tokens, strength: int):
        self.fitness = clean_fitness
        self.tokens = tuple(clean_tokens)
        self.perturbation = Perturbation.empty(strength)

    def offer(self, fitness: float, cand: Candidate, tokens, strength: int) -> bool:
        if fitness < self.fitness:
            self.fitness = fitness
            self.tokens = tuple(tokens)
            self.perturbation = candidate_perturbation(cand, strength)
            return True
        return False


def _clean_caption(
    image: Image, endpoint: CaptionOracle, clean_result: CaptionResult | None
) -> tuple[CaptionResult, int]:
    if clean_result is not None:
        return clean_result, 0
    return endpoint.caption(image), 1


def _finish(
    image: Image, refs, best: _BestTracker, clean_fitness: float,
    clean_tokens, calls: int, generations_run: int, trace: list[float],
    truncated: bool,
) -> AttackOutcome:
    adv = apply_perturbation(image, best.perturbation)
    return AttackOutcome(
        adversarial=adv,
        perturbation=best.perturbation,
        clean_fitness=clean_fitness,
        adv_fitness=best.fitness,
        metrics_before=score_all(clean_tokens, refs),
        metrics_after=score_all(best.tokens, refs),
        clean_tokens=tuple(clean_tokens),
        adv_tokens=best.tokens,
        oracle_calls=calls,
        generations_run=generations_run,
        trace=tuple(trace),
        truncated=truncated,
    )


def run_de(
    image: Image,
    refs,
    region: CandidateRegion,
    cfg: DEConfig,
    endpoint: CaptionOracle,
    clean_result: CaptionResult | None = None,
) -> AttackOutcome:
    """The attention-guided differential-evolution attack.

    Per slot j a mutant child replaces its parent when strictly fitter; the
    global best is updated when a child beats both the incumbent best and
    its parent. Oracle usage is popsize*(generations+1) captions plus one
    for the clean image (skipped when ``clean_result`` is supplied).

    If the endpoint's call budget runs out mid-search, the best found so
    far is returned with ``truncated`` set.
    """
    cfg.validate()
    if cfg.pixels > len(region):
        raise ConfigError(
            f"pixel budget {cfg.pixels} exceeds candidate region size {len(region)}"
        )
    rng = np.random.default_rng(cfg.seed)
    clean, clean_calls = _clean_caption(image, endpoint, clean_result)
    clean_fitness = fitness_value(cfg.fitness, clean.tokens, refs)
    evaluate = _Evaluator(image, refs, endpoint, cfg.fitness, cfg.strength)
    best = _BestTracker(clean_fitness, clean.tokens, cfg.strength)
    trace: list[float] = []
    truncated = False
    generations_done = 0

    pop = init_population(region, cfg, rng)
    try:
        for cand in pop:
            cand.fitness, tokens = evaluate(cand)
            best.offer(cand.fitness, cand, tokens, cfg.strength)
        trace.append(best.fitness)
        for _ in range(cfg.generations):
            for j in range(cfg.popsize):
                child = mutate(pop, j, cfg.weight, rng, region,
                               cfg.strength, cfg.delta_levels)
                child.fitness, tokens = evaluate(child)
                if child.fitness < pop[j].fitness:
                    if child.fitness < best.fitness:
                        best.offer(child.fitness, child, tokens, cfg.strength)
                    pop[j] = child
            generations_done += 1
            trace.append(best.fitness)
    except BudgetError:
        truncated = True
        if not trace:
            trace.append(best.fitness)
    return _finish(image, refs, best, clean_fitness, clean.tokens,
                   evaluate.calls + clean_calls, generations_done, trace, truncated)


def _project_deltas(
    genes: np.ndarray, linf: float, l2: float,
    delta_levels: tuple[int, ...] | None,
) -> np.ndarray:
    """Round deltas, clip to the l-inf bound, then rescale-and-truncate
    toward zero if the joint l2 norm exceeds its budget (truncation keeps
    integer deltas inside the ball)."""
    g = genes.reshape(-1, GENES_PER_PIXEL).copy()
    d = np.rint(np.clip(g[:, 2:5], -math.floor(linf), math.floor(linf)))
    if delta_levels is not None:
        d = _quantize(d.reshape(-1), delta_levels).reshape(-1, 3)
    norm = float(np.sqrt((d * d).sum()))
    if norm > l2:
        d = np.trunc(d * (l2 / norm))
        if delta_levels is not None:
            ladder = np.asarray(sorted(delta_levels), dtype=np.float64)
            flat = d.reshape(-1)
            for i, v in enumerate(flat):
                eligible = ladder[np.abs(ladder) <= abs(v) + 1e-9]
                flat[i] = eligible[np.argmin(np.abs(eligible - v))] if eligible.size else 0.0
            d = flat.reshape(-1, 3)
    g[:, 2:5] = d
    return g.reshape(-1)


def run_pso(
    image: Image,
    refs,
    region: CandidateRegion,
    cfg: PSOConfig,
    endpoint: CaptionOracle,
    m: int,
    seed: int,
    metric: str = "bleu2",
    clean_result: CaptionResult | None = None,
) -> AttackOutcome:
    """Global-best particle swarm over the DE genome.

    After every velocity update the position is repaired like a DE child
    and the whole perturbation is projected to satisfy the l-inf and l2
    budgets, so every evaluated perturbation is feasible.
    """
    cfg.validate()
    if m > len(region):
        raise ConfigError(f"pixel budget {m} exceeds candidate region size {len(region)}")
    rng = np.random.default_rng(seed)
    strength = max(1, math.floor(cfg.linf_bound))

    def feasible(genes: np.ndarray) -> np.ndarray:
        snapped = repair(genes, region, cfg.linf_bound, None)
        return _project_deltas(snapped, cfg.linf_bound, cfg.l2_bound, cfg.delta_levels)

    clean, clean_calls = _clean_caption(image, endpoint, clean_result)
    clean_fitness = fitness_value(metric, clean.tokens, refs)
    evaluate = _Evaluator(image, refs, endpoint, metric, strength)
    best = _BestTracker(clean_fitness, clean.tokens, strength)
    trace: list[float] = []
    truncated = False
    iterations_done = 0

    dim = m * GENES_PER_PIXEL
    positions = []
    for _ in range(cfg.swarm):
        coords = sample_pixels(region, m, rng).astype(np.float64)
        deltas = rng.integers(-strength, strength + 1, size=(m, 3)).astype(np.float64)
        positions.append(feasible(np.concatenate([coords, deltas], axis=1).reshape(-1)))
    velocities = [np.zeros(dim) for _ in range(cfg.swarm)]
    pbest = [p.copy() for p in positions]
    pbest_fit = [math.inf] * cfg.swarm
    gbest = positions[0].copy()
    gbest_fit = math.inf

    try:
        for i in range(cfg.swarm):
            cand = Candidate(genes=positions[i])
            fit, tokens = evaluate(cand)
            pbest_fit[i] = fit
            if fit < gbest_fit:
                gbest_fit, gbest = fit, positions[i].copy()
            best.offer(fit, cand, tokens, strength)
        trace.append(best.fitness)
        for _ in range(cfg.iterations):
            for i in range(cfg.swarm):
                rp = rng.random(dim)
                rg = rng.random(dim)
                velocities[i] = (
                    cfg.inertia * velocities[i]
                    + cfg.cognitive * rp * (pbest[i] - positions[i])
                    + cfg.social * rg * (gbest - positions[i])
                )
                positions[i] = feasible(positions[i] + velocities[i])
                cand = Candidate(genes=positions[i])
                fit, tokens = evaluate(cand)
                if fit < pbest_fit[i]:
                    pbest_fit[i] = fit
                    pbest[i] = positions[i].copy()
                if fit < gbest_fit:
                    gbest_fit, gbest = fit, positions[i].copy()
                best.offer(fit, cand, tokens, strength)
            iterations_done += 1
            trace.append(best.fitness)
    except BudgetError:
        truncated = True
        if not trace:
            trace.append(best.fitness)
    return _finish(image, refs, best, clean_fitness, clean.tokens,
                   evaluate.calls + clean_calls, iterations_done, trace, truncated)


def region_mask(region: CandidateRegion, width: int, height: int) -> np.ndarray:
    mask = np.zeros((height, width), dtype=bool)
    mask[region.pixels[:, 1], region.pixels[:, 0]] = True
    return mask


def run_gradient_attack(
    image: Image,
    refs,
    region: CandidateRegion,
    cfg: GradConfig,
    method: str,
    endpoint: CaptionOracle,
    metric: str = "bleu2",
    clean_result: CaptionResult | None = None,
) -> AttackOutcome:
    """Signed-gradient step(s) masked to the candidate region.

    fgsm takes a single step of size epsilon; pgd takes ``iterations``
    steps of ``step`` each, re-projected onto the l-inf ball of radius
    epsilon around the original image after every step. If the final image
    scores worse for the attacker than the clean one, the clean image is
    returned (the best-so-far contract).
    """
    cfg.validate()
    if method not in ("fgsm", "pgd"):
        raise ConfigError(f"unknown gradient method {method!r}")
    if not endpoint.capabilities().gradient:
        raise UnsupportedCapabilityError(
            f"{method} requires a gradient-capable endpoint"
        )
    clean, clean_calls = _clean_caption(image, endpoint, clean_result)
    clean_fitness = fitness_value(metric, clean.tokens, refs)
    bound = max(1, math.floor(cfg.epsilon))
    best = _BestTracker(clean_fitness, clean.tokens, bound)

    mask = region_mask(region, image.width, image.height)[:, :, None]
    x0 = image.pixels.astype(np.float64)
    xf = x0.copy()
    steps = 1 if method == "fgsm" else cfg.iterations
    step = cfg.epsilon if method == "fgsm" else cfg.step_size()
    calls = clean_calls
    for _ in range(steps):
        probe = Image.from_array(np.clip(np.rint(xf), 0, 255).astype(np.uint8))
        grad = endpoint.loss_gradient(probe, refs)
        calls += 1
        xf = xf + step * mask * np.sign(grad)
        xf = np.clip(xf, x0 - cfg.epsilon, x0 + cfg.epsilon)
        xf = np.clip(xf, 0, 255)

    delta = np.clip(np.rint(xf) - x0, -bound, bound).astype(np.int64)
    delta[~mask[:, :, 0]] = 0
    ys, xs = np.nonzero(np.any(delta != 0, axis=2))
    pert = Perturbation(
        deltas=tuple(
            PixelDelta(x=int(x), y=int(y),
                       dr=int(delta[y, x, 0]), dg=int(delta[y, x, 1]),
                       db=int(delta[y, x, 2]))
            for y, x in zip(ys, xs)
        ),
        strength=bound,
    )
    adv = apply_perturbation(image, pert)
    result = endpoint.caption(adv)
    calls += 1
    fit = fitness_value(metric, result.tokens, refs)
    if fit < clean_fitness:
        best.fitness = fit
        best.tokens = result.tokens
        best.perturbation = pert
    trace = [clean_fitness, best.fitness]
    return _finish(image, refs, best, clean_fitness, clean.tokens,
                   calls, steps, trace, False)


def run_baseline(
    image: Image,
    refs,
    method: str,
    cfg: DEConfig,
    endpoint: CaptionOracle,
    clean_result: CaptionResult | None = None,
) -> AttackOutcome:
    """Attention-free baselines sharing the DE code path.

    ``npixel`` runs the DE attack over a uniform whole-image region;
    ``onepixel`` does the same with the pixel budget forced to 1.
    """
    if method not in ("npixel", "onepixel"):
        raise ConfigError(f"unknown baseline {method!r}")
    region = CandidateRegion.uniform(image.width, image.height)
    if method == "onepixel":
        cfg = replace(cfg, pixels=1)
    return run_de(image, refs, region, cfg, endpoint, clean_result)
