"""Adapter configuration."""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class AdapterConfig:
    """How to host one captioning model.

    ``model`` selects the backend: ``stub`` (deterministic, dependency-free)
    or ``blip:<huggingface-id>`` (requires torch + transformers and local
    weights). ``decoding`` is ``greedy`` or ``beam:<width>``; the decoding
    mode is reported in the capabilities info field. ``attention_layer``
    picks which attention tensor multi-layer models expose (model-specific,
    e.g. ``cross:-1`` for the last cross-attention layer).
    """

    model: str = "stub"
    device: str = "cpu"
    decoding: str = "greedy"
    max_length: int = 20
    attention_layer: str = "cross:-1"

    def __post_init__(self):
        if self.max_length < 1:
            raise ValueError("max_length must be >= 1")
        if self.decoding != "greedy":
            if not self.decoding.startswith("beam:"):
                raise ValueError("decoding must be 'greedy' or 'beam:<width>'")
            width = int(self.decoding.split(":", 1)[1])
            if width < 1:
                raise ValueError("beam width must be >= 1")

    @property
    def beam_width(self) -> int:
        if self.decoding == "greedy":
            return 1
        return int(self.decoding.split(":", 1)[1])
