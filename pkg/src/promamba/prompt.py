"""Box prompts: derivation from masks, jitter, and corner embeddings.

Boxes use normalized half-open pixel coordinates, so a full-image box is
exactly (0, 0, 1, 1). A box is embedded as its four corners, each the
concatenated sinusoidal encodings of (x, y) plus a learned corner-type
embedding.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from promamba import tensor as T
from promamba.config import ModelConfig
from promamba.rng import Rng
from promamba.tensor import ContractError, DimensionError, Tensor


class EmptyMaskError(ValueError):
    """A prompt was requested for a mask with no foreground."""


@dataclass(frozen=True)
class BoxPrompt:
    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self):
        if not (0 <= self.x0 < self.x1 <= 1 and 0 <= self.y0 < self.y1 <= 1):
            raise ContractError(f"degenerate box {self!r}")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x0, self.y0, self.x1, self.y1)


@dataclass
class PromptEmbedding:
    tokens: Tensor  # [4, decoder_dim]

    def __post_init__(self):
        if self.tokens.shape[0] != 4:
            raise DimensionError(f"prompt embedding must have 4 tokens, got {self.tokens.shape}")


def box_from_mask(mask: np.ndarray) -> BoxPrompt:
    """Tight bounding box of foreground (mask > 0.5) in normalized coordinates."""
    m = np.asarray(mask)
    if m.ndim == 3:
        m = m[0]
    h, w = m.shape
    fg = m > 0.5
    if not fg.any():
        raise EmptyMaskError("mask has no foreground pixels")
    rows = np.flatnonzero(fg.any(axis=1))
    cols = np.flatnonzero(fg.any(axis=0))
    return BoxPrompt(
        x0=cols[0] / w,
        y0=rows[0] / h,
        x1=(cols[-1] + 1) / w,
        y1=(rows[-1] + 1) / h,
    )


def jitter_box(box: BoxPrompt, rng: Rng, scale: float = 0.05, min_side: float = 1e-3) -> BoxPrompt:
    """Offset each side independently by uniform noise in [-scale, +scale].

    Coordinates are clamped to [0, 1]; a collapsed side is repaired by
    enforcing a minimum extent.
    """
    if scale < 0:
        raise ContractError("jitter scale must be >= 0")
    off = rng.uniform(-scale, scale, size=4)
    x0 = min(box.x0 + off[0], box.x1 + off[1])
    x1 = max(box.x0 + off[0], box.x1 + off[1])
    y0 = min(box.y0 + off[2], box.y1 + off[3])
    y1 = max(box.y0 + off[2], box.y1 + off[3])
    x0, x1 = max(0.0, x0), min(1.0, x1)
    y0, y1 = max(0.0, y0), min(1.0, y1)
    if x1 - x0 < min_side:
        mid = min(max((x0 + x1) / 2, min_side / 2), 1 - min_side / 2)
        x0, x1 = mid - min_side / 2, mid + min_side / 2
    if y1 - y0 < min_side:
        mid = min(max((y0 + y1) / 2, min_side / 2), 1 - min_side / 2)
        y0, y1 = mid - min_side / 2, mid + min_side / 2
    return BoxPrompt(x0, y0, x1, y1)


def sinusoid_frequencies(n: int) -> np.ndarray:
    """Geometric ladder pi * 2**i; the lowest band keeps encodings injective on [0, 1]."""
    return math.pi * (2.0 ** np.arange(n))


def encode_coords(xy: np.ndarray, d_model: int) -> np.ndarray:
    """Sinusoidal encoding of normalized (x, y) rows into d_model dims.

    Half of the dimensions encode x, half y, each as interleaved sin/cos over
    the frequency ladder.
    """
    if d_model % 4 != 0:
        raise DimensionError("coordinate encoding needs d_model divisible by 4")
    n = d_model // 4
    freqs = sinusoid_frequencies(n)
    parts = []
    for coord in (xy[:, 0], xy[:, 1]):
        angles = coord[:, None] * freqs[None, :]
        interleaved = np.empty((xy.shape[0], 2 * n))
        interleaved[:, 0::2] = np.sin(angles)
        interleaved[:, 1::2] = np.cos(angles)
        parts.append(interleaved)
    return np.concatenate(parts, axis=1)


@dataclass
class PromptParams:
    corner_embed: Tensor  # [4, decoder_dim], one row per corner type

    def named(self) -> dict[str, Tensor]:
        return {"prompt.corner_embed": self.corner_embed}


def prompt_param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    return {"prompt.corner_embed": (4, cfg.decoder_dim)}


def init_prompt(cfg: ModelConfig, rng: Rng, dtype: str = "float32") -> PromptParams:
    return PromptParams(
        corner_embed=Tensor(rng.normal(0, 1.0, (4, cfg.decoder_dim)), dtype, True)
    )


def encode_box(box: BoxPrompt, params: PromptParams, d_model: int) -> PromptEmbedding:
    """Embed the four corners (x0,y0), (x1,y0), (x0,y1), (x1,y1)."""
    corners = np.array(
        [
            [box.x0, box.y0],
            [box.x1, box.y0],
            [box.x0, box.y1],
            [box.x1, box.y1],
        ]
    )
    sin = Tensor(encode_coords(corners, d_model).astype(params.corner_embed.data.dtype),
                 params.corner_embed.dtype)
    return PromptEmbedding(tokens=T.add(sin, params.corner_embed))


def average_prompts(embeddings: list[PromptEmbedding]) -> PromptEmbedding:
    """Elementwise arithmetic mean over a non-empty list of prompt embeddings."""
    if not embeddings:
        raise ContractError("average_prompts needs at least one embedding")
    shape = embeddings[0].tokens.shape
    for e in embeddings:
        if e.tokens.shape != shape:
            raise DimensionError("prompt embeddings differ in shape")
    acc = embeddings[0].tokens
    for e in embeddings[1:]:
        acc = T.add(acc, e.tokens)
    return PromptEmbedding(tokens=T.mul(acc, Tensor(np.asarray(1.0 / len(embeddings)), acc.dtype)))


def zero_prompt(cfg: ModelConfig, dtype: str = "float32") -> PromptEmbedding:
    """All-zero prompt tokens (used to ablate the prompt pathway)."""
    return PromptEmbedding(tokens=T.zeros((4, cfg.decoder_dim), dtype))
