"""Finite-difference checks over every layer type and every pretraining loss.

Each case builds a tiny float64 instance (d=8, at most 4 text tokens and 4
patches + CLS), closes a scalar function over it and hands it to
:func:`skipfuse.tensor.grad_check`.  Layer outputs are reduced with a fixed
random weighting, because a plain sum of a layer-norm output has an exactly
zero gradient.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .data import Batch
from .encoders import EncoderBlock
from .fusion import (AsymmetricCoAttentionLayer, CoAttentionLayer, ConnectedAttentionLayer,
                     FusionState)
from .nn import Attention, FeedForward, LayerNorm
from .objectives import (DecoderLayer, SkipFuseModel, encode_batch, itc_loss, itm_loss,
                         mlm_loss, prefix_lm_loss, similarity_matrix)
from .vocab import N_SPECIAL, PAD

D = 8
N_TEXT = 4
M_ROWS = 5


def tiny_config(seed: int) -> ModelConfig:
    return ModelConfig(d_model=D, n_heads=2, n_visual_layers=1, n_text_layers=1,
                       n_fusion_asym_layers=1, stride=1, n_decoder_layers=1, image_size=4,
                       patch_size=2, channels=1, vocab_size=12, max_text_len=6, queue_size=4,
                       ffn_multiplier=2, seed=seed)


def _spread(module, scale: float = 1.0 / np.sqrt(D) / 0.02):
    """Rescale matrices from the 0.02 init to ~1/sqrt(d) so no gradient is vanishingly small."""
    for p in module.parameters():
        if p.ndim >= 2:
            p.data = p.data * scale
    return module


def checkable(module) -> list:
    """Parameters of ``module`` minus attention key biases.

    A key bias shifts every score of a query by the same constant, which the
    softmax cancels, so its true gradient is identically zero and a relative
    error against finite-difference noise is meaningless.  Tests assert that
    gradient is zero separately.
    """
    return [p for name, p in module.named_parameters()
            if not (name == "bk" or name.endswith(".bk"))]


def _weighted(out: T.Tensor, weights: np.ndarray) -> T.Tensor:
    return T.sum_all(T.mul(out, weights))


def _layer_cases(seed: int):
    cfg = tiny_config(seed)
    rng = np.random.default_rng(seed)
    l = T.Tensor(rng.normal(size=(N_TEXT + 1, D)), requires_grad=True)
    v = T.Tensor(rng.normal(size=(M_ROWS, D)), requires_grad=True)
    text_mask = np.array([True, True, True, True, False])
    w_l = rng.normal(size=(N_TEXT + 1, D))
    w_v = rng.normal(size=(M_ROWS, D))
    w_all = rng.normal(size=(M_ROWS + N_TEXT + 1, D))

    sa = _spread(Attention(D, 2, rng))
    yield "self_attention", lambda: _weighted(sa(l, l), w_l), [l, *checkable(sa)]

    ca = _spread(Attention(D, 2, rng))
    kmask = np.broadcast_to(np.array([True, True, True, False, True]), (N_TEXT + 1, M_ROWS))
    yield "cross_attention", lambda: _weighted(ca(l, v, kmask), w_l), [l, v, *checkable(ca)]

    ffn = _spread(FeedForward(D, 2, rng))
    yield "feed_forward", lambda: _weighted(ffn(l), w_l), [l, *checkable(ffn)]

    ln = LayerNorm(D)
    ln.gain.data = rng.normal(size=D)
    ln.bias.data = rng.normal(size=D)
    yield "layer_norm", lambda: _weighted(ln(l), w_l), [l, *checkable(ln)]

    enc = _spread(EncoderBlock(cfg, rng))
    yield "encoder_block", lambda: _weighted(enc(l, text_mask), w_l), [l, *checkable(enc)]

    asym = _spread(AsymmetricCoAttentionLayer(cfg, rng))
    yield ("asymmetric_coattention_layer",
           lambda: _weighted(asym(FusionState(v, l, text_mask)).l, w_l),
           [l, v, *checkable(asym)])

    conn = _spread(ConnectedAttentionLayer(cfg, rng))

    def connected():
        st = conn(FusionState(v, l, text_mask))
        return _weighted(T.concat([st.v, st.l]), w_all)

    yield "connected_attention_layer", connected, [l, v, *checkable(conn)]

    co = _spread(CoAttentionLayer(cfg, rng))

    def coattn():
        st = co(FusionState(v, l, text_mask))
        return T.add(_weighted(st.v, w_v), _weighted(st.l, w_l))

    yield "coattention_layer", coattn, [l, v, *checkable(co)]

    dec = _spread(DecoderLayer(cfg, rng))
    mem_valid = np.concatenate([np.ones(M_ROWS, dtype=bool), text_mask])
    x = T.Tensor(rng.normal(size=(3, D)), requires_grad=True)
    w_x = rng.normal(size=(3, D))
    yield ("decoder_block", lambda: _weighted(dec(x, T.concat([v, l]), mem_valid), w_x),
           [x, v, l, *checkable(dec)])


def tiny_batch(cfg: ModelConfig, rng: np.random.Generator, size: int = 2) -> Batch:
    images = [rng.normal(size=(cfg.channels, cfg.image_size, cfg.image_size)) for _ in range(size)]
    captions = []
    for i in range(size):
        n = N_TEXT - (i % 2)
        ids = rng.integers(N_SPECIAL, cfg.vocab_size, size=n)
        captions.append(np.concatenate([ids, [PAD] * (N_TEXT - n)]))
    return Batch(images, captions)


def _loss_cases(seed: int):
    cfg = tiny_config(seed)
    rng = np.random.default_rng(seed + 100)
    model = _spread(SkipFuseModel(cfg))
    batch = tiny_batch(cfg, rng)
    q = rng.normal(size=(3, D))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    model.image_queue.push(q)
    model.text_queue.push(q[::-1])

    yield ("itc_loss", lambda: itc_loss(batch, model, update_state=False),
           [*model.vision_proj.parameters(), *model.text_proj.parameters(), model.visual.cls])

    def itm():
        enc = encode_batch(model, batch)
        return itm_loss(model, enc, similarity_matrix(model, enc), "sample",
                        np.random.default_rng(seed))

    last = model.fusion.layers[-1]
    yield "itm_loss", itm, [*model.itm_head.parameters(), *last.ln_ffn.parameters(),
                            last.self_attn.wv]

    yield ("mlm_loss", lambda: mlm_loss(batch, model, np.random.default_rng(seed)),
           [*model.mlm_head.parameters(), model.fusion.layers[0].ffn.fc2.weight])

    dec = model.decoder
    yield ("prefix_lm_loss", lambda: prefix_lm_loss(batch, model, splits=[1, 0]),
           [*dec.lm_head.parameters(), dec.layers[0].cross_attn.wq, model.text.pos])


def run_suite(seeds=(0, 1, 2), h: float = 1e-5):
    """Yield ``(case_name, max_relative_error)`` for every case and seed."""
    for seed in seeds:
        with T.precision(np.float64):
            cases = list(_layer_cases(seed)) + list(_loss_cases(seed))
        for name, f, leaves in cases:
            yield f"{name}[seed={seed}]", T.grad_check(f, leaves, h)
