"""Black-box adversarial attacks on image-captioning systems.

High-attention pixels are selected from the victim's own soft-attention
maps, sparse RGB perturbations over them are optimized with differential
evolution to degrade caption quality (BLEU/ROUGE), and swarm- and
gradient-based baselines run against the same model-agnostic caption
oracle protocol.
"""

from .attention import (
    AttentionStack,
    CandidateRegion,
    SaliencyMap,
    aggregate_sentence,
    aggregate_word,
    sample_pixels,
    select_region,
    upsample,
)
from .harness import (
    AttackReport,
    DatasetEntry,
    ExperimentConfig,
    evaluate_transfer,
    load_dataset,
    run_experiment,
    run_sweep,
    summarize,
)
from .metrics import (
    bleu_n,
    br_measure,
    brevity_penalty,
    modified_precision,
    rouge_n,
    score_all,
    tokenize,
)
from .optimizer import (
    AttackOutcome,
    Candidate,
    DEConfig,
    GradConfig,
    PSOConfig,
    evaluate_fitness,
    init_population,
    mutate,
    run_baseline,
    run_de,
    run_gradient_attack,
    run_pso,
)
from .oracle import Capabilities, CaptionOracle, CaptionResult, ToyOracle, open_endpoint
from .raster import Image, Perturbation, PixelDelta, apply_perturbation, perturbation_norms
from .toy import ToyCaptionerConfig

__version__ = "0.1.0"

__all__ = [
    "AttentionStack",
    "AttackOutcome",
    "AttackReport",
    "Candidate",
    "Capabilities",
    "CaptionOracle",
    "CaptionResult",
    "CandidateRegion",
    "DEConfig",
    "DatasetEntry",
    "ExperimentConfig",
    "GradConfig",
    "Image",
    "PSOConfig",
    "Perturbation",
    "PixelDelta",
    "SaliencyMap",
    "ToyCaptionerConfig",
    "ToyOracle",
    "aggregate_sentence",
    "aggregate_word",
    "apply_perturbation",
    "bleu_n",
    "br_measure",
    "brevity_penalty",
    "evaluate_fitness",
    "evaluate_transfer",
    "init_population",
    "load_dataset",
    "modified_precision",
    "mutate",
    "open_endpoint",
    "perturbation_norms",
    "rouge_n",
    "run_baseline",
    "run_de",
    "run_experiment",
    "run_gradient_attack",
    "run_pso",
    "run_sweep",
    "sample_pixels",
    "score_all",
    "select_region",
    "summarize",
    "tokenize",
    "upsample",
]
