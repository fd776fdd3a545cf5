"""Whole-model assembly: encoder + prompt encoder + decoder behind one object."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from promamba import decoder as dec
from promamba import encoder as enc
from promamba import prompt as pr
from promamba.config import ModelConfig
from promamba.rng import Rng
from promamba.tensor import ContractError, Tensor


@dataclass
class PromptMamba:
    config: ModelConfig
    encoder: enc.EncoderParams
    prompt: pr.PromptParams
    decoder: dec.DecoderParams
    dtype: str = "float32"

    @classmethod
    def build(cls, cfg: ModelConfig, rng: Rng, dtype: str = "float32") -> "PromptMamba":
        return cls(
            config=cfg,
            encoder=enc.init_encoder(cfg, rng.child(0), dtype),
            prompt=pr.init_prompt(cfg, rng.child(1), dtype),
            decoder=dec.init_decoder(cfg, rng.child(2), dtype),
            dtype=dtype,
        )

    @property
    def params(self) -> dict[str, Tensor]:
        named: dict[str, Tensor] = {}
        named.update(self.encoder.named())
        named.update(self.prompt.named())
        named.update(self.decoder.named())
        return named

    def set_requires_grad(self, flag: bool) -> None:
        for t in self.params.values():
            t.requires_grad = flag

    def encode_image(
        self,
        image: Tensor,
        train_mask: Tensor | None = None,
        training: bool = False,
        workers: int = 1,
    ) -> enc.ImageEmbedding:
        return enc.encode(
            image, self.encoder, self.config, train_mask=train_mask, training=training,
            workers=workers,
        )

    def encode_boxes(self, boxes: list[pr.BoxPrompt], zero_prompts: bool = False) -> pr.PromptEmbedding:
        if zero_prompts:
            return pr.zero_prompt(self.config, self.dtype)
        if not boxes:
            raise ContractError("at least one box prompt is required")
        embeddings = [pr.encode_box(b, self.prompt, self.config.decoder_dim) for b in boxes]
        if len(embeddings) == 1:
            return embeddings[0]
        return pr.average_prompts(embeddings)

    def decode(self, image_emb: enc.ImageEmbedding, prompt_emb: pr.PromptEmbedding) -> dec.MaskLogits:
        return dec.decode(image_emb, prompt_emb, self.decoder, self.config)

    def segment(
        self,
        image: Tensor,
        boxes: list[pr.BoxPrompt],
        train_mask: Tensor | None = None,
        training: bool = False,
        zero_prompts: bool = False,
        workers: int = 1,
    ) -> dec.MaskLogits:
        emb = self.encode_image(image, train_mask=train_mask, training=training, workers=workers)
        prompt_emb = self.encode_boxes(boxes, zero_prompts=zero_prompts)
        return self.decode(emb, prompt_emb)

    def load_state(self, tensors: dict[str, np.ndarray]) -> None:
        """Replace parameter values from a name -> array mapping (full match only)."""
        from promamba.checkpoint import IncompatibleCheckpointError

        params = self.params
        mine = {name: t.data.shape for name, t in params.items()}
        theirs = {name: arr.shape for name, arr in tensors.items()}
        for name in sorted(set(mine) | set(theirs)):
            if name not in theirs:
                raise IncompatibleCheckpointError(f"checkpoint is missing tensor {name!r}")
            if name not in mine:
                raise IncompatibleCheckpointError(f"checkpoint has unexpected tensor {name!r}")
            if mine[name] != theirs[name]:
                raise IncompatibleCheckpointError(
                    f"tensor {name!r}: checkpoint shape {theirs[name]} vs model shape {mine[name]}"
                )
        for name, t in params.items():
            t.data = np.ascontiguousarray(tensors[name], dtype=t.data.dtype)
            t.grad = None
