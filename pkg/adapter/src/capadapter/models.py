"""Captioner backends.

A backend takes an (H, W, 3) uint8 array and returns caption tokens plus,
optionally, one raw attention grid per token at whatever resolution the
model works at. Grids may be unnormalized; the server layer normalizes them
before they hit the wire.
"""

from __future__ import annotations

import numpy as np

from .config import AdapterConfig

_ROW_BANDS = ("top", "middle", "bottom")
_COL_BANDS = ("left", "center", "right")


class StubCaptioner:
    """Deterministic dependency-free captioner used for protocol tests.

    Describes overall brightness and the cell of a coarse grid that
    deviates most from the mean. Emits deliberately unnormalized attention
    so the adapter's normalization is exercised.
    """

    grid = 7

    def __init__(self, config: AdapterConfig):
        self.config = config

    def capabilities(self) -> dict:
        return {
            "caption": True,
            "attention": True,
            "gradient": False,
            "info": f"stub captioner grid={self.grid} decoding={self.config.decoding}",
        }

    def _cell_luminance(self, arr: np.ndarray) -> np.ndarray:
        h, w = arr.shape[:2]
        lum = arr.astype(np.float64).mean(axis=2)
        g = self.grid
        cells = np.zeros((g, g))
        for r in range(g):
            for c in range(g):
                ys = slice(r * h // g, (r + 1) * h // g)
                xs = slice(c * w // g, (c + 1) * w // g)
                block = lum[ys, xs]
                cells[r, c] = block.mean() if block.size else 0.0
        return cells

    def caption(self, arr: np.ndarray, want_attention: bool):
        cells = self._cell_luminance(arr)
        tone = "bright" if cells.mean() >= 128 else "dark"
        focus = int(np.abs(cells - cells.mean()).argmax())
        fr, fc = divmod(focus, self.grid)
        row_word = _ROW_BANDS[fr * 3 // self.grid]
        col_word = _COL_BANDS[fc * 3 // self.grid]
        tokens = ["a", tone, "scene", "with", "detail", "at", row_word, col_word]
        tokens = tokens[: self.config.max_length]
        if not want_attention:
            return tokens, None

        uniform = np.ones((self.grid, self.grid))
        focus_map = np.full((self.grid, self.grid), 0.05)
        focus_map[fr, fc] = 1.0
        by_token = {
            "a": uniform, "with": uniform, "at": uniform,
            tone: cells + 1.0, "scene": cells + 1.0,
            "detail": focus_map, row_word: focus_map, col_word: focus_map,
        }
        grids = [np.array(by_token[tok]) for tok in tokens]
        return tokens, grids


class BlipCaptioner:
    """A pretrained attention-capable captioner behind the same interface.

    Loads a BLIP checkpoint through transformers; per generated word the
    decoder's cross-attention over the vision patches (layer chosen by
    ``attention_layer``, heads averaged, wordpieces merged) becomes the
    attention grid. Requires torch, transformers, and locally available
    weights.
    """

    def __init__(self, config: AdapterConfig):
        try:
            import torch
            from transformers import BlipForConditionalGeneration, BlipProcessor
        except ImportError as exc:
            raise RuntimeError(
                "the blip backend needs torch and transformers installed"
            ) from exc
        self.config = config
        self.torch = torch
        model_id = config.model.split(":", 1)[1]
        self.processor = BlipProcessor.from_pretrained(model_id)
        self.model = BlipForConditionalGeneration.from_pretrained(model_id)
        self.model.to(config.device)
        self.model.eval()

    def capabilities(self) -> dict:
        return {
            "caption": True,
            "attention": True,
            "gradient": False,
            "info": f"blip model={self.config.model} decoding={self.config.decoding} "
            f"attention={self.config.attention_layer}",
        }

    def _layer_index(self, depth: int) -> int:
        selector = self.config.attention_layer
        if selector.startswith("cross:"):
            idx = int(selector.split(":", 1)[1])
        else:
            idx = -1
        return idx % depth

    def caption(self, arr: np.ndarray, want_attention: bool):
        from PIL import Image as PILImage

        torch = self.torch
        pil = PILImage.fromarray(arr, mode="RGB")
        inputs = self.processor(images=pil, return_tensors="pt").to(self.config.device)
        with torch.no_grad():
            out = self.model.generate(
                **inputs,
                max_length=self.config.max_length,
                num_beams=self.config.beam_width,
                output_attentions=want_attention,
                return_dict_in_generate=True,
            )
        sequence = out.sequences[0]
        pieces = self.processor.tokenizer.convert_ids_to_tokens(
            sequence, skip_special_tokens=False
        )

        # merge wordpieces into words, remembering which steps feed each word
        words: list[str] = []
        step_groups: list[list[int]] = []
        special = set(self.processor.tokenizer.all_special_tokens)
        for step, piece in enumerate(pieces[1:]):  # step i produced token i+1
            if piece in special:
                continue
            if piece.startswith("##") and words:
                words[-1] += piece[2:]
                step_groups[-1].append(step)
            else:
                words.append(piece)
                step_groups.append([step])
        if not want_attention:
            return words, None

        cross = out.cross_attentions  # steps x layers x (batch, heads, q, patches)
        depth = len(cross[0])
        layer = self._layer_index(depth)
        grids = []
        for group in step_groups:
            maps = []
            for step in group:
                att = cross[step][layer][0]        # (heads, q, patches)
                att = att.mean(dim=0)[-1]          # average heads, last query
                att = att[1:]                      # drop the CLS patch
                side = int(att.numel() ** 0.5)
                maps.append(att[: side * side].reshape(side, side).cpu().numpy())
            grids.append(np.mean(maps, axis=0))
        return words, grids


def load_captioner(config: AdapterConfig):
    if config.model == "stub":
        return StubCaptioner(config)
    if config.model.startswith("blip:"):
        return BlipCaptioner(config)
    raise ValueError(f"unknown model {config.model!r}; expected 'stub' or 'blip:<id>'")
