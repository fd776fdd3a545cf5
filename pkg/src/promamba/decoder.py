"""Mask decoder: prompt self-attention, two cross-attention exchanges with the
image embedding, transposed-conv upscaling, and a per-pixel dot-product head.

The decoder runs at its own fixed width behind a linear neck from the encoder
dimension, mirroring the SAM-style design it follows; this keeps the decoder
cost independent of the encoder scale.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from promamba import tensor as T
from promamba.config import ModelConfig
from promamba.encoder import ImageEmbedding
from promamba.prompt import PromptEmbedding, encode_coords
from promamba.rng import Rng
from promamba.tensor import DimensionError, Tensor


class DecoderConfigError(ValueError):
    """Decoder wiring inconsistent with its inputs."""


@dataclass
class MaskLogits:
    logits: Tensor  # [1, H, W] pre-sigmoid


@dataclass
class AttentionParams:
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.{f}": getattr(self, f) for f in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")}


@dataclass
class DecoderParams:
    neck_w: Tensor  # [encoder d_model, decoder_dim]
    neck_b: Tensor
    self_attn: AttentionParams
    cross_tokens_to_image: AttentionParams
    cross_image_to_tokens: AttentionParams
    norms: list[tuple[Tensor, Tensor]]  # 4x (gain, bias)
    mlp_w1: Tensor
    mlp_b1: Tensor
    mlp_w2: Tensor
    mlp_b2: Tensor
    upscale: list[tuple[Tensor, Tensor]]  # transposed-conv (kernel, bias) pairs
    hyper_w1: Tensor
    hyper_b1: Tensor
    hyper_w2: Tensor
    hyper_b2: Tensor
    hyper_w3: Tensor
    hyper_b3: Tensor
    output_token: Tensor  # [decoder_dim]

    def named(self) -> dict[str, Tensor]:
        out = {
            "decoder.neck.weight": self.neck_w,
            "decoder.neck.bias": self.neck_b,
            "decoder.mlp.w1": self.mlp_w1,
            "decoder.mlp.b1": self.mlp_b1,
            "decoder.mlp.w2": self.mlp_w2,
            "decoder.mlp.b2": self.mlp_b2,
            "decoder.hyper.w1": self.hyper_w1,
            "decoder.hyper.b1": self.hyper_b1,
            "decoder.hyper.w2": self.hyper_w2,
            "decoder.hyper.b2": self.hyper_b2,
            "decoder.hyper.w3": self.hyper_w3,
            "decoder.hyper.b3": self.hyper_b3,
            "decoder.output_token": self.output_token,
        }
        out.update(self.self_attn.named("decoder.self_attn"))
        out.update(self.cross_tokens_to_image.named("decoder.cross1"))
        out.update(self.cross_image_to_tokens.named("decoder.cross2"))
        for i, (gain, bias) in enumerate(self.norms):
            out[f"decoder.norm{i}.gain"] = gain
            out[f"decoder.norm{i}.bias"] = bias
        for i, (w, b) in enumerate(self.upscale):
            out[f"decoder.upscale.{i}.weight"] = w
            out[f"decoder.upscale.{i}.bias"] = b
        return out


def upscale_channels(cfg: ModelConfig) -> list[int]:
    """Channel widths after each stride-2 stage; their count matches log2(patch)."""
    return [max(cfg.decoder_dim >> (i + 1), 8) for i in range(cfg.upscale_stages)]


def decoder_param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    dd = cfg.decoder_dim
    shapes: dict[str, tuple[int, ...]] = {
        "decoder.neck.weight": (cfg.d_model, dd),
        "decoder.neck.bias": (dd,),
        "decoder.mlp.w1": (dd, 8 * dd),
        "decoder.mlp.b1": (8 * dd,),
        "decoder.mlp.w2": (8 * dd, dd),
        "decoder.mlp.b2": (dd,),
        "decoder.output_token": (dd,),
    }
    for site in ("self_attn", "cross1", "cross2"):
        for mat in ("wq", "wk", "wv", "wo"):
            shapes[f"decoder.{site}.{mat}"] = (dd, dd)
        for vec in ("bq", "bk", "bv", "bo"):
            shapes[f"decoder.{site}.{vec}"] = (dd,)
    for i in range(4):
        shapes[f"decoder.norm{i}.gain"] = (dd,)
        shapes[f"decoder.norm{i}.bias"] = (dd,)
    c_in = dd
    for i, c_out in enumerate(upscale_channels(cfg)):
        shapes[f"decoder.upscale.{i}.weight"] = (c_in, c_out, 2, 2)
        shapes[f"decoder.upscale.{i}.bias"] = (c_out,)
        c_in = c_out
    shapes["decoder.hyper.w1"] = (dd, dd)
    shapes["decoder.hyper.b1"] = (dd,)
    shapes["decoder.hyper.w2"] = (dd, dd)
    shapes["decoder.hyper.b2"] = (dd,)
    shapes["decoder.hyper.w3"] = (dd, c_in)
    shapes["decoder.hyper.b3"] = (c_in,)
    return shapes


def _linear_init(rng: Rng, fan_in: int, shape, dtype: str) -> Tensor:
    return Tensor(rng.normal(0, 1 / math.sqrt(fan_in), shape), dtype, True)


def init_decoder(cfg: ModelConfig, rng: Rng, dtype: str = "float32") -> DecoderParams:
    dd = cfg.decoder_dim

    def attn(r: Rng) -> AttentionParams:
        return AttentionParams(
            wq=_linear_init(r.child(0), dd, (dd, dd), dtype),
            bq=Tensor(np.zeros(dd), dtype, True),
            wk=_linear_init(r.child(1), dd, (dd, dd), dtype),
            bk=Tensor(np.zeros(dd), dtype, True),
            wv=_linear_init(r.child(2), dd, (dd, dd), dtype),
            bv=Tensor(np.zeros(dd), dtype, True),
            wo=_linear_init(r.child(3), dd, (dd, dd), dtype),
            bo=Tensor(np.zeros(dd), dtype, True),
        )

    upscale = []
    c_in = dd
    for i, c_out in enumerate(upscale_channels(cfg)):
        upscale.append(
            (
                _linear_init(rng.child(4, i), c_in * 4, (c_in, c_out, 2, 2), dtype),
                Tensor(np.zeros(c_out), dtype, True),
            )
        )
        c_in = c_out
    return DecoderParams(
        neck_w=_linear_init(rng.child(0), cfg.d_model, (cfg.d_model, dd), dtype),
        neck_b=Tensor(np.zeros(dd), dtype, True),
        self_attn=attn(rng.child(1)),
        cross_tokens_to_image=attn(rng.child(2)),
        cross_image_to_tokens=attn(rng.child(3)),
        norms=[
            (Tensor(np.ones(dd), dtype, True), Tensor(np.zeros(dd), dtype, True)) for _ in range(4)
        ],
        mlp_w1=_linear_init(rng.child(5), dd, (dd, 8 * dd), dtype),
        mlp_b1=Tensor(np.zeros(8 * dd), dtype, True),
        mlp_w2=_linear_init(rng.child(6), 8 * dd, (8 * dd, dd), dtype),
        mlp_b2=Tensor(np.zeros(dd), dtype, True),
        upscale=upscale,
        hyper_w1=_linear_init(rng.child(7), dd, (dd, dd), dtype),
        hyper_b1=Tensor(np.zeros(dd), dtype, True),
        hyper_w2=_linear_init(rng.child(8), dd, (dd, dd), dtype),
        hyper_b2=Tensor(np.zeros(dd), dtype, True),
        hyper_w3=_linear_init(rng.child(9), dd, (dd, c_in), dtype),
        hyper_b3=Tensor(np.zeros(c_in), dtype, True),
        output_token=Tensor(rng.child(10).normal(0, 0.02, dd), dtype, True),
    )


def _project(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return T.add(T.matmul(x, w), T.reshape(b, (1, b.shape[0])))


def attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    params: AttentionParams,
    n_heads: int,
    weight_sink: list | None = None,
) -> Tensor:
    """Multi-head scaled dot-product attention with an output projection."""
    d = q.shape[1]
    if d % n_heads != 0:
        raise DecoderConfigError(f"width {d} not divisible by {n_heads} heads")
    dh = d // n_heads
    qp = _project(q, params.wq, params.bq)
    kp = _project(k, params.wk, params.bk)
    vp = _project(v, params.wv, params.bv)
    scale = Tensor(np.asarray(1.0 / math.sqrt(dh)), q.dtype)
    heads = []
    for h in range(n_heads):
        qh = T.narrow(qp, 1, h * dh, dh)
        kh = T.narrow(kp, 1, h * dh, dh)
        vh = T.narrow(vp, 1, h * dh, dh)
        scores = T.mul(T.matmul(qh, T.permute(kh, (1, 0))), scale)
        weights = T.softmax(scores, axis=1)
        if weight_sink is not None:
            weight_sink.append(weights.data.copy())
        heads.append(T.matmul(weights, vh))
    merged = T.concat(heads, axis=1)
    return _project(merged, params.wo, params.bo)


def grid_position_encoding(grid: tuple[int, int], d: int, dtype: str) -> Tensor:
    """Sinusoidal encoding of patch-center coordinates, raster order."""
    gh, gw = grid
    ys, xs = np.meshgrid(
        (np.arange(gh) + 0.5) / gh, (np.arange(gw) + 0.5) / gw, indexing="ij"
    )
    xy = np.stack([xs.reshape(-1), ys.reshape(-1)], axis=1)
    return Tensor(encode_coords(xy, d), dtype)


def decode(
    image_emb: ImageEmbedding,
    prompt: PromptEmbedding,
    params: DecoderParams,
    cfg: ModelConfig,
    weight_sink: list | None = None,
) -> MaskLogits:
    """Predict full-resolution mask logits from image and prompt embeddings."""
    dd = cfg.decoder_dim
    if image_emb.tokens.shape[1] != params.neck_w.shape[0]:
        raise DecoderConfigError(
            f"image embedding width {image_emb.tokens.shape[1]} does not match "
            f"neck input {params.neck_w.shape[0]}"
        )
    if prompt.tokens.shape[1] != dd:
        raise DecoderConfigError(
            f"prompt width {prompt.tokens.shape[1]} does not match decoder width {dd}"
        )
    img = _project(image_emb.tokens, params.neck_w, params.neck_b)
    pe = grid_position_encoding(image_emb.grid, dd, img.dtype)
    heads = cfg.n_heads

    tok = T.concat([T.reshape(params.output_token, (1, dd)), prompt.tokens], axis=0)

    g, b = params.norms[0]
    tok = T.layer_norm(T.add(tok, attention(tok, tok, tok, params.self_attn, heads, weight_sink)), g, b)

    img_pe = T.add(img, pe)
    g, b = params.norms[1]
    tok = T.layer_norm(
        T.add(tok, attention(tok, img_pe, img, params.cross_tokens_to_image, heads, weight_sink)),
        g, b,
    )
    g, b = params.norms[2]
    hidden = T.silu(_project(tok, params.mlp_w1, params.mlp_b1))
    tok = T.layer_norm(T.add(tok, _project(hidden, params.mlp_w2, params.mlp_b2)), g, b)

    g, b = params.norms[3]
    if cfg.cross_attn_symmetric:
        img_pe = T.add(img, pe)
        tok = T.layer_norm(
            T.add(tok, attention(tok, img_pe, img, params.cross_image_to_tokens, heads, weight_sink)),
            g, b,
        )
    else:
        img = T.layer_norm(
            T.add(
                img,
                attention(T.add(img, pe), tok, tok, params.cross_image_to_tokens, heads, weight_sink),
            ),
            g, b,
        )

    gh, gw = image_emb.grid
    feat = T.permute(T.reshape(img, (gh, gw, dd)), (2, 0, 1))
    last = len(params.upscale) - 1
    for i, (w, bias) in enumerate(params.upscale):
        feat = T.transposed_conv2d(feat, w, bias, stride=2, padding=0)
        if i != last:
            feat = T.silu(feat)

    out_tok = T.narrow(tok, 0, 0, 1)
    hyper = T.silu(T.add(T.matmul(out_tok, params.hyper_w1), T.reshape(params.hyper_b1, (1, dd))))
    hyper = T.silu(T.add(T.matmul(hyper, params.hyper_w2), T.reshape(params.hyper_b2, (1, dd))))
    hyper = T.add(T.matmul(hyper, params.hyper_w3), T.reshape(params.hyper_b3, (1, params.hyper_w3.shape[1])))
    c_last = feat.shape[0]
    logits = T.tsum(T.mul(feat, T.reshape(hyper, (c_last, 1, 1))), axis=0, keepdims=True)
    return MaskLogits(logits=logits)
