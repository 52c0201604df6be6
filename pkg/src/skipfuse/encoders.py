"""Unimodal encoders: a patch transformer for images and a token transformer for text."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .nn import Attention, FeedForward, LayerNorm, Module, key_mask, normal
from .tensor import Tensor
from .vocab import CLS, PAD


@dataclass
class VisualSequence:
    """Rows ordered ``[v_cls, v_1 .. v_M]``."""

    embeddings: Tensor

    def __len__(self):
        return self.embeddings.shape[0]


@dataclass
class TextSequence:
    """Rows ordered ``[l_cls, l_1 .. l_N]``; ``token_ids`` excludes the CLS id."""

    token_ids: np.ndarray
    attention_mask: np.ndarray
    embeddings: Tensor

    def __len__(self):
        return self.embeddings.shape[0]


class EncoderBlock(Module):
    """Pre-LN self-attention + feed-forward block."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.ln1 = LayerNorm(cfg.d_model, cfg.ln_eps)
        self.attn = Attention(cfg.d_model, cfg.n_heads, rng)
        self.ln2 = LayerNorm(cfg.d_model, cfg.ln_eps)
        self.ffn = FeedForward(cfg.d_model, cfg.ffn_multiplier, rng)

    def __call__(self, x: Tensor, valid=None) -> Tensor:
        h = self.ln1(x)
        x = T.add(x, self.attn(h, h, key_mask(x.shape[0], valid)))
        return T.add(x, self.ffn(self.ln2(x)))


def patchify(image: np.ndarray, patch_size: int) -> np.ndarray:
    """[C, H, W] -> [M, C*p*p], patches in row-major grid order."""
    c, h, w = image.shape
    p = patch_size
    grid = image.reshape(c, h // p, p, w // p, p).transpose(1, 3, 0, 2, 4)
    return grid.reshape((h // p) * (w // p), c * p * p)


class VisualEncoder(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        patch_dim = cfg.channels * cfg.patch_size ** 2
        self.patch_proj_w = normal(rng, patch_dim, cfg.d_model)
        self.patch_proj_b = T.Tensor(np.zeros(cfg.d_model), requires_grad=True)
        self.cls = normal(rng, 1, cfg.d_model)
        self.pos = normal(rng, cfg.n_patches + 1, cfg.d_model)
        self.blocks = [EncoderBlock(cfg, rng) for _ in range(cfg.n_visual_layers)]

    def patch_embed(self, image) -> VisualSequence:
        cfg = self.cfg
        image = image.data if isinstance(image, Tensor) else np.asarray(image)
        expected = (cfg.channels, cfg.image_size, cfg.image_size)
        if image.shape != expected:
            raise T.ShapeError(f"image shape {image.shape} != expected {expected}")
        patches = Tensor(patchify(image, cfg.patch_size))
        x = T.add(T.matmul(patches, self.patch_proj_w), self.patch_proj_b)
        return VisualSequence(T.add(T.concat([self.cls, x]), self.pos))

    def __call__(self, image) -> VisualSequence:
        x = self.patch_embed(image).embeddings
        for block in self.blocks:
            x = block(x)
        return VisualSequence(x)


class TextEncoder(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.tok = normal(rng, cfg.vocab_size, cfg.d_model)
        self.pos = normal(rng, cfg.max_text_len + 1, cfg.d_model)
        self.blocks = [EncoderBlock(cfg, rng) for _ in range(cfg.n_text_layers)]

    def __call__(self, token_ids) -> TextSequence:
        cfg = self.cfg
        ids = np.asarray(token_ids, dtype=np.int64).reshape(-1)
        if len(ids) > cfg.max_text_len:
            raise T.ContractError(f"text of {len(ids)} tokens exceeds max_text_len={cfg.max_text_len}")
        if np.any(ids < 0) or np.any(ids >= cfg.vocab_size):
            raise T.ContractError(f"token id outside vocabulary of size {cfg.vocab_size}")
        full = np.concatenate([[CLS], ids])
        valid = full != PAD
        x = T.add(T.embedding(self.tok, full), self.pos[: len(full)])
        for block in self.blocks:
            x = block(x, valid)
        return TextSequence(ids, valid, x)
