"""Image encoder: patchify, positional embedding, bidirectional scan layers.

Tokens are raster-ordered (top-left to bottom-right). During training an
optional ground-truth mask is reduced by a strided conv stack and added to the
token grid once, before the first layer; inference is always mask-free.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from promamba import ssm
from promamba import tensor as T
from promamba.config import ModelConfig
from promamba.rng import Rng
from promamba.ssm import SSMBlockParams, bidirectional_mix
from promamba.tensor import ContractError, DimensionError, DomainError, Tensor


@dataclass
class ImageEmbedding:
    tokens: Tensor  # [N, d]
    grid: tuple[int, int]

    def __post_init__(self):
        if self.tokens.shape[0] != self.grid[0] * self.grid[1]:
            raise DimensionError(
                f"token count {self.tokens.shape[0]} does not match grid {self.grid}"
            )


@dataclass
class EncoderParams:
    patch_w: Tensor  # [in_channels*p*p, d_model]
    patch_b: Tensor  # [d_model]
    pos: Tensor  # [N, d_model]
    layers: list[SSMBlockParams]
    norms: list[tuple[Tensor, Tensor]]  # per-layer (gain, bias)
    final_norm: tuple[Tensor, Tensor]
    inject: list[tuple[Tensor, Tensor]] | None  # conv stack (kernel, bias) pairs

    def named(self) -> dict[str, Tensor]:
        out = {
            "encoder.patch.weight": self.patch_w,
            "encoder.patch.bias": self.patch_b,
            "encoder.pos": self.pos,
            "encoder.final_norm.gain": self.final_norm[0],
            "encoder.final_norm.bias": self.final_norm[1],
        }
        for i, (block, (gain, bias)) in enumerate(zip(self.layers, self.norms)):
            out.update(block.named(f"encoder.layers.{i}"))
            out[f"encoder.layers.{i}.norm.gain"] = gain
            out[f"encoder.layers.{i}.norm.bias"] = bias
        if self.inject is not None:
            for i, (w, b) in enumerate(self.inject):
                out[f"encoder.inject.{i}.weight"] = w
                out[f"encoder.inject.{i}.bias"] = b
        return out


def _inject_channels(cfg: ModelConfig) -> list[int]:
    stages = cfg.upscale_stages
    return [max(cfg.d_model >> (stages - 1 - i), 8) for i in range(stages)]


def init_encoder(cfg: ModelConfig, rng: Rng, dtype: str = "float32") -> EncoderParams:
    p = cfg.patch_size
    fan_in = cfg.in_channels * p * p
    layers = []
    norms = []
    for i in range(cfg.depth):
        layers.append(
            ssm.init_block(cfg.d_model, cfg.d_state, cfg.conv_width, cfg.bidirectional,
                           rng.child(1, i), dtype)
        )
        norms.append(
            (Tensor(np.ones(cfg.d_model), dtype, True), Tensor(np.zeros(cfg.d_model), dtype, True))
        )
    inject = None
    if cfg.input_mask:
        inject = []
        chans = _inject_channels(cfg)
        c_in = 1
        for i, c_out in enumerate(chans):
            r = rng.child(2, i)
            inject.append(
                (
                    Tensor(r.normal(0, 1 / math.sqrt(c_in * 9), (c_out, c_in, 3, 3)), dtype, True),
                    Tensor(np.zeros(c_out), dtype, True),
                )
            )
            c_in = c_out
    return EncoderParams(
        patch_w=Tensor(rng.child(0).normal(0, 1 / math.sqrt(fan_in), (fan_in, cfg.d_model)), dtype, True),
        patch_b=Tensor(np.zeros(cfg.d_model), dtype, True),
        pos=Tensor(rng.child(0, 1).normal(0, 0.02, (cfg.n_tokens, cfg.d_model)), dtype, True),
        layers=layers,
        norms=norms,
        final_norm=(Tensor(np.ones(cfg.d_model), dtype, True), Tensor(np.zeros(cfg.d_model), dtype, True)),
        inject=inject,
    )


def patch_embed(image: Tensor, params: EncoderParams, cfg: ModelConfig) -> ImageEmbedding:
    """Non-overlapping patch projection plus learned per-position embedding."""
    c, h, w = image.shape
    if h != cfg.image_size or w != cfg.image_size or c != cfg.in_channels:
        raise DimensionError(
            f"expected image [{cfg.in_channels},{cfg.image_size},{cfg.image_size}], got {image.shape}"
        )
    p = cfg.patch_size
    g = cfg.grid
    # [c, g, p, g, p] -> [g, g, c, p, p] -> [N, c*p*p]
    x = T.reshape(image, (c, g, p, g, p))
    x = T.permute(x, (1, 3, 0, 2, 4))
    x = T.reshape(x, (g * g, c * p * p))
    tokens = T.add(T.add(T.matmul(x, params.patch_w), T.reshape(params.patch_b, (1, cfg.d_model))), params.pos)
    return ImageEmbedding(tokens=tokens, grid=(g, g))


def inject_mask(mask: Tensor, params: EncoderParams, cfg: ModelConfig) -> Tensor:
    """Reduce a binary mask to the token grid through the strided conv stack."""
    if params.inject is None:
        raise ContractError("mask injection requested but input_mask flag is off")
    if mask.shape != (1, cfg.image_size, cfg.image_size):
        raise DimensionError(f"mask must be [1,{cfg.image_size},{cfg.image_size}], got {mask.shape}")
    if np.any((mask.data < 0) | (mask.data > 1)):
        raise DomainError("mask values must lie in [0, 1]")
    x = mask
    last = len(params.inject) - 1
    for i, (w, b) in enumerate(params.inject):
        x = T.conv2d(x, w, b, stride=2, padding=1)
        if i != last:
            x = T.silu(x)
    d = x.shape[0]
    x = T.reshape(x, (d, cfg.n_tokens))
    return T.permute(x, (1, 0))


def encode(
    image: Tensor,
    params: EncoderParams,
    cfg: ModelConfig,
    train_mask: Tensor | None = None,
    training: bool = False,
    parallel_scan: bool = True,
    workers: int = 1,
) -> ImageEmbedding:
    """Full encoder pass; ``train_mask`` is only legal in training mode."""
    if train_mask is not None:
        if not cfg.input_mask:
            raise ContractError("train_mask supplied but the input_mask flag is off")
        if not training:
            raise ContractError("mask injection is a training-only path")
    emb = patch_embed(image, params, cfg)
    tokens = emb.tokens
    if train_mask is not None:
        tokens = T.add(tokens, inject_mask(train_mask, params, cfg))
    for block, (gain, bias) in zip(params.layers, params.norms):
        normed = T.layer_norm(tokens, gain, bias, eps=1e-5)
        tokens = T.add(tokens, bidirectional_mix(normed, block, cfg.bidirectional, parallel_scan, workers))
    tokens = T.layer_norm(tokens, params.final_norm[0], params.final_norm[1], eps=1e-5)
    return ImageEmbedding(tokens=tokens, grid=emb.grid)


# --- parameter accounting ---------------------------------------------------


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Shapes of every learnable tensor (encoder, neck, prompts, decoder).

    Computed without allocating, so paper-scale configs are cheap to count.
    """
    d = cfg.d_model
    di = cfg.d_inner
    rank = cfg.dt_rank
    n = cfg.n_tokens
    shapes: dict[str, tuple[int, ...]] = {
        "encoder.patch.weight": (cfg.in_channels * cfg.patch_size**2, d),
        "encoder.patch.bias": (d,),
        "encoder.pos": (n, d),
        "encoder.final_norm.gain": (d,),
        "encoder.final_norm.bias": (d,),
    }
    for i in range(cfg.depth):
        pre = f"encoder.layers.{i}"
        shapes[f"{pre}.norm.gain"] = (d,)
        shapes[f"{pre}.norm.bias"] = (d,)
        shapes[f"{pre}.in_proj"] = (d, 2 * di)
        shapes[f"{pre}.out_proj"] = (di, d)
        branches = ["fwd", "bwd"] if cfg.bidirectional else ["fwd"]
        for br in branches:
            shapes[f"{pre}.{br}.conv_w"] = (di, cfg.conv_width)
            shapes[f"{pre}.{br}.conv_b"] = (di,)
            shapes[f"{pre}.{br}.x_proj"] = (di, rank + 2 * cfg.d_state)
            shapes[f"{pre}.{br}.dt_proj"] = (rank, di)
            shapes[f"{pre}.{br}.dt_bias"] = (di,)
            shapes[f"{pre}.{br}.A_log"] = (di, cfg.d_state)
            shapes[f"{pre}.{br}.D"] = (di,)
    if cfg.input_mask:
        c_in = 1
        for i, c_out in enumerate(_inject_channels(cfg)):
            shapes[f"encoder.inject.{i}.weight"] = (c_out, c_in, 3, 3)
            shapes[f"encoder.inject.{i}.bias"] = (c_out,)
            c_in = c_out

    from promamba.decoder import decoder_param_shapes
    from promamba.prompt import prompt_param_shapes

    shapes.update(prompt_param_shapes(cfg))
    shapes.update(decoder_param_shapes(cfg))
    return shapes


def count_params(cfg: ModelConfig) -> int:
    """Exact number of learnable scalars for the whole promptable model."""
    return sum(int(np.prod(s)) for s in param_shapes(cfg).values())
