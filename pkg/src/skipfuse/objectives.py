"""Pretraining objectives (ITC, ITM, MLM, PrefixLM), the caption decoder and the joint step.

ITC contrasts projected CLS embeddings against in-batch momentum features plus
two FIFO queues of past momentum features.  ITM classifies fused pairs, with
negatives mined from the contrastive similarity.  MLM predicts BERT-corrupted
tokens from fused text rows.  PrefixLM decodes a caption suffix from the fused
image + prefix sequence.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .data import Batch
from .encoders import TextEncoder, TextSequence, VisualEncoder, VisualSequence
from .fusion import FusionNetwork, FusionState, FusionVariant
from .nn import Attention, FeedForward, LayerNorm, Linear, Module, key_mask, normal
from .tensor import Tensor
from .vocab import CLS, EOS, MASK, N_SPECIAL, PAD

IGNORE = -100
LOSS_NAMES = ("itc", "itm", "mlm", "prefixlm")


# -- queue and momentum -------------------------------------------------------

class MemoryQueue:
    """Fixed-capacity FIFO of unit-norm rows backed by a ring buffer."""

    def __init__(self, capacity: int, width: int):
        if capacity <= 0:
            raise T.ConfigError("queue capacity must be positive")
        self.capacity = capacity
        self.width = width
        self.buffer = np.zeros((capacity, width), dtype=np.float32)
        self.cursor = 0
        self.count = 0

    def __len__(self):
        return self.count

    def push(self, rows):
        rows = np.asarray(rows.data if isinstance(rows, Tensor) else rows)
        if rows.ndim != 2 or rows.shape[1] != self.width:
            raise T.ContractError(f"queue rows must be [n, {self.width}], got {rows.shape}")
        norms = np.linalg.norm(rows, axis=1)
        if rows.shape[0] and not np.allclose(norms, 1.0, atol=1e-3):
            raise T.ContractError("queue rows must be unit-norm")
        if rows.shape[0] > self.capacity:
            rows = rows[-self.capacity:]
        n = rows.shape[0]
        idx = (self.cursor + np.arange(n)) % self.capacity
        self.buffer[idx] = rows
        self.cursor = (self.cursor + n) % self.capacity
        self.count = min(self.capacity, self.count + n)

    def rows(self) -> np.ndarray:
        """Stored rows, oldest first."""
        if self.count < self.capacity:
            return self.buffer[: self.count].copy()
        return np.concatenate([self.buffer[self.cursor:], self.buffer[: self.cursor]])


class _Towers(Module):
    """The unimodal path feeding ITC: encoders plus their projections."""

    def __init__(self, visual, text, vision_proj, text_proj):
        self.visual = visual
        self.text = text
        self.vision_proj = vision_proj
        self.text_proj = text_proj


class MomentumEncoderPair(Module):
    """Online towers (not owned) and an exponentially averaged copy that never trains."""

    def __init__(self, online: Module, m: float):
        self._online = online
        self.momentum = copy.deepcopy(online).requires_grad_(False)
        self.m = m

    @property
    def online(self) -> Module:
        return self._online


def momentum_update(pair: MomentumEncoderPair):
    """theta_m <- m * theta_m + (1 - m) * theta for every parameter."""
    online = list(pair.online.named_parameters())
    shadow = list(pair.momentum.named_parameters())
    if [n for n, _ in online] != [n for n, _ in shadow]:
        raise T.ContractError("online and momentum parameter structures differ")
    m = pair.m
    for (name, p), (_, pm) in zip(online, shadow):
        if p.shape != pm.shape:
            raise T.ContractError(f"{name}: shape {p.shape} != momentum shape {pm.shape}")
        pm.data *= m
        pm.data += (1.0 - m) * p.data


# -- decoder -----------------------------------------------------------------

class DecoderLayer(Module):
    def __init__(self, cfg: ModelConfig, rng):
        d = cfg.d_model
        self.self_attn = Attention(d, cfg.n_heads, rng)
        self.ln_sa = LayerNorm(d, cfg.ln_eps)
        self.cross_attn = Attention(d, cfg.n_heads, rng)
        self.ln_ca = LayerNorm(d, cfg.ln_eps)
        self.ffn = FeedForward(d, cfg.ffn_multiplier, rng)
        self.ln_ffn = LayerNorm(d, cfg.ln_eps)

    def __call__(self, x: Tensor, memory: Tensor, memory_valid=None) -> Tensor:
        n = x.shape[0]
        causal = np.tril(np.ones((n, n), dtype=bool))
        x = self.ln_sa(T.add(self.self_attn(x, x, causal), x))
        x = self.ln_ca(T.add(self.cross_attn(x, memory, key_mask(n, memory_valid)), x))
        return self.ln_ffn(T.add(self.ffn(x), x))


class Decoder(Module):
    def __init__(self, cfg: ModelConfig, rng):
        self.max_len = cfg.max_text_len
        self.tok = normal(rng, cfg.vocab_size, cfg.d_model)
        self.pos = normal(rng, cfg.max_text_len + 1, cfg.d_model)
        self.layers = [DecoderLayer(cfg, rng) for _ in range(cfg.n_decoder_layers)]
        self.lm_head = Linear(cfg.d_model, cfg.vocab_size, rng)

    def __call__(self, input_ids, memory: Tensor, memory_valid=None, offset: int = 0) -> Tensor:
        """Teacher-forced logits [len(input_ids), V].

        ``offset`` is the caption position of the first input (the prefix
        length), so suffix tokens carry absolute positions.
        """
        ids = np.asarray(input_ids, dtype=np.int64)
        if offset < 0 or offset + len(ids) > self.max_len + 1:
            raise T.ContractError(f"decoder input of {len(ids)} at offset {offset} exceeds "
                                  f"{self.max_len + 1} positions")
        x = T.add(T.embedding(self.tok, ids), self.pos[offset: offset + len(ids)])
        for layer in self.layers:
            x = layer(x, memory, memory_valid)
        return self.lm_head(x)


# -- model -------------------------------------------------------------------

@dataclass
class Encoded:
    images: list[VisualSequence]
    texts: list[TextSequence] | None = None


class SkipFuseModel(Module):
    """Encoders, one fusion network, task heads, decoder and the ITC momentum state."""

    def __init__(self, cfg: ModelConfig, variant=FusionVariant.SKIP_CONNECTED):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        d = cfg.d_model
        self.visual = VisualEncoder(cfg, rng)
        self.text = TextEncoder(cfg, rng)
        self.vision_proj = Linear(d, d, rng)
        self.text_proj = Linear(d, d, rng)
        self.fusion = FusionNetwork(variant, cfg, rng)
        self.itm_head = Linear(d, 2, rng)
        self.mlm_head = Linear(d, cfg.vocab_size, rng)
        self.decoder = Decoder(cfg, rng)
        self.momentum_pair = MomentumEncoderPair(
            _Towers(self.visual, self.text, self.vision_proj, self.text_proj), cfg.momentum)
        self._image_queue = MemoryQueue(cfg.queue_size, d)
        self._text_queue = MemoryQueue(cfg.queue_size, d)

    @property
    def image_queue(self) -> MemoryQueue:
        return self._image_queue

    @property
    def text_queue(self) -> MemoryQueue:
        return self._text_queue

    def trainable_parameters(self) -> list[Tensor]:
        return [p for p in self.parameters() if p.requires_grad]

    def momentum_parameters(self) -> list[Tensor]:
        return self.momentum_pair.momentum.parameters()

    def fuse(self, v: VisualSequence, t: TextSequence) -> FusionState:
        return self.fusion(FusionState(v.embeddings, t.embeddings, t.attention_mask))

    def memory(self, v: VisualSequence, prefix_ids) -> tuple[Tensor, np.ndarray]:
        """Decoder memory: the fused ``[v; l]`` sequence for an image and a caption prefix."""
        t = self.text(prefix_ids)
        state = self.fuse(v, t)
        valid = np.concatenate([np.ones(state.v.shape[0], dtype=bool), t.attention_mask])
        return T.concat([state.v, state.l]), valid

    def checkpoint_state(self) -> dict[str, np.ndarray]:
        state = dict(self.state_dict())
        for name, q in (("image", self._image_queue), ("text", self._text_queue)):
            state[f"queue.{name}.buffer"] = q.buffer
            state[f"queue.{name}.position"] = np.array([q.cursor, q.count], dtype=np.float32)
        return state

    def load_checkpoint_state(self, state: dict[str, np.ndarray]):
        state = dict(state)
        for name, q in (("image", self._image_queue), ("text", self._text_queue)):
            q.buffer = np.array(state.pop(f"queue.{name}.buffer"), dtype=np.float32)
            cursor, count = state.pop(f"queue.{name}.position")
            q.cursor, q.count = int(cursor), int(count)
        self.load_state_dict(state)


def _cls_rows(seqs) -> Tensor:
    return T.concat([s.embeddings[0:1] for s in seqs])


def encode_batch(model: SkipFuseModel, batch: Batch, with_text: bool = True) -> Encoded:
    images = [model.visual(img) for img in batch.images]
    texts = [model.text(c) for c in batch.captions] if with_text else None
    return Encoded(images, texts)


# -- ITC ---------------------------------------------------------------------

def contrastive_loss(img_feat: Tensor, txt_feat: Tensor, img_feat_m, txt_feat_m,
                     image_queue_rows, text_queue_rows, tau: float) -> Tensor:
    """Mean of image->text and text->image cross-entropies; positives on the diagonal.

    Candidates for image ``i`` are all in-batch momentum text features followed
    by the text queue (and symmetrically for text).
    """
    if tau <= 0:
        raise T.ConfigError(f"temperature must be positive, got {tau}")
    b = img_feat.shape[0]
    dtype = img_feat.data.dtype
    txt_all = np.concatenate([np.asarray(txt_feat_m), np.asarray(text_queue_rows).reshape(-1, txt_feat.shape[1])])
    img_all = np.concatenate([np.asarray(img_feat_m), np.asarray(image_queue_rows).reshape(-1, img_feat.shape[1])])
    sim_i2t = T.mul(T.matmul(img_feat, Tensor(txt_all.T.astype(dtype))), 1.0 / tau)
    sim_t2i = T.mul(T.matmul(txt_feat, Tensor(img_all.T.astype(dtype))), 1.0 / tau)
    targets = np.arange(b)
    return T.mul(T.add(T.cross_entropy(sim_i2t, targets), T.cross_entropy(sim_t2i, targets)), 0.5)


def unimodal_features(model: SkipFuseModel, enc: Encoded) -> tuple[Tensor, Tensor]:
    img = T.l2_normalize(model.vision_proj(_cls_rows(enc.images)))
    txt = T.l2_normalize(model.text_proj(_cls_rows(enc.texts)))
    return img, txt


def momentum_features(model: SkipFuseModel, batch: Batch) -> tuple[np.ndarray, np.ndarray]:
    towers = model.momentum_pair.momentum
    with T.no_grad():
        img = T.l2_normalize(towers.vision_proj(_cls_rows([towers.visual(x) for x in batch.images])))
        txt = T.l2_normalize(towers.text_proj(_cls_rows([towers.text(c) for c in batch.captions])))
    return img.data, txt.data


def itc_loss(batch: Batch, model: SkipFuseModel, tau: float | None = None,
             enc: Encoded | None = None, update_state: bool = True) -> Tensor:
    """Contrastive loss; afterwards pushes momentum features and updates the momentum towers."""
    tau = model.cfg.temperature if tau is None else tau
    if tau <= 0:
        raise T.ConfigError(f"temperature must be positive, got {tau}")
    enc = enc or encode_batch(model, batch)
    img_feat, txt_feat = unimodal_features(model, enc)
    img_m, txt_m = momentum_features(model, batch)
    loss = contrastive_loss(img_feat, txt_feat, img_m, txt_m,
                            model.image_queue.rows(), model.text_queue.rows(), tau)
    if update_state:
        model.image_queue.push(img_m)
        model.text_queue.push(txt_m)
        momentum_update(model.momentum_pair)
    return loss


# -- ITM ---------------------------------------------------------------------

def select_hard_negatives(sim, mode: str = "sample", rng: np.random.Generator | None = None) -> np.ndarray:
    """One negative column per row of ``sim``, never the diagonal.

    ``sample`` draws from the softmax over off-diagonal entries by inverting
    the cumulative distribution with one uniform draw per row; ``argmax``
    takes the most similar off-diagonal entry.
    """
    sim = np.asarray(sim, dtype=np.float64)
    b = sim.shape[0]
    if b < 2:
        raise T.ContractError("hard-negative mining needs a batch of at least 2")
    logits = sim.copy()
    np.fill_diagonal(logits, -np.inf)
    if mode == "argmax":
        return logits.argmax(axis=1)
    if mode != "sample":
        raise T.ConfigError(f"unknown negative mode {mode!r}")
    if rng is None:
        raise T.ContractError("sampled mode needs an rng")
    w = np.exp(logits - logits.max(axis=1, keepdims=True))
    w /= w.sum(axis=1, keepdims=True)
    out = np.empty(b, dtype=np.int64)
    for i in range(b):
        cdf = np.cumsum(w[i])
        j = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
        if j >= b or j == i:
            j = int(np.flatnonzero(w[i] > 0)[-1])
        out[i] = j
    return out


def similarity_matrix(model: SkipFuseModel, enc: Encoded) -> np.ndarray:
    """Image-to-text cosine similarity of the online unimodal features (no gradient)."""
    with T.no_grad():
        img, txt = unimodal_features(model, enc)
    return img.data @ txt.data.T


def itm_loss(model: SkipFuseModel, enc: Encoded, similarities, mode: str = "sample",
             rng: np.random.Generator | None = None) -> Tensor:
    """Binary matching loss over B positives, B hard-negative texts and B hard-negative images."""
    b = len(enc.images)
    if b < 2:
        raise T.ContractError("ITM needs a batch of at least 2 to form negatives")
    logits = np.asarray(similarities) / model.cfg.temperature
    neg_text = select_hard_negatives(logits, mode, rng)
    neg_image = select_hard_negatives(logits.T, mode, rng)
    pairs = [(i, i) for i in range(b)]
    pairs += [(i, int(neg_text[i])) for i in range(b)]
    pairs += [(int(neg_image[i]), i) for i in range(b)]
    labels = np.array([1] * b + [0] * (2 * b))
    cls = [model.fuse(enc.images[vi], enc.texts[ti]).l[0:1] for vi, ti in pairs]
    return T.cross_entropy(model.itm_head(T.concat(cls)), labels)


# -- MLM ---------------------------------------------------------------------

def mlm_selection_count(n_tokens: int, rate: float) -> int:
    return max(1, math.ceil(rate * n_tokens))


def mask_tokens(token_ids, rate: float, rng: np.random.Generator, vocab_size: int):
    """BERT corruption of ``ceil(rate * n)`` real tokens: 80% [MASK], 10% random, 10% kept.

    Returns ``(corrupted_ids, targets)`` where unselected targets are ``IGNORE``.
    """
    ids = np.asarray(token_ids, dtype=np.int64)
    real = np.flatnonzero(ids != PAD)
    if len(real) == 0:
        raise T.ContractError("MLM needs at least one real token")
    chosen = rng.choice(real, size=mlm_selection_count(len(real), rate), replace=False)
    corrupted = ids.copy()
    targets = np.full(len(ids), IGNORE, dtype=np.int64)
    for pos in np.sort(chosen):
        targets[pos] = ids[pos]
        u = rng.random()
        if u < 0.8:
            corrupted[pos] = MASK
        elif u < 0.9:
            corrupted[pos] = rng.integers(N_SPECIAL, vocab_size)
    return corrupted, targets


def mlm_loss(batch: Batch, model: SkipFuseModel, rng: np.random.Generator,
             enc: Encoded | None = None) -> Tensor:
    enc = enc or encode_batch(model, batch, with_text=False)
    logits, targets = [], []
    for v, caption in zip(enc.images, batch.captions):
        corrupted, tgt = mask_tokens(caption, model.cfg.mlm_mask_rate, rng, model.cfg.vocab_size)
        state = model.fuse(v, model.text(corrupted))
        logits.append(model.mlm_head(state.l[1:]))
        targets.append(tgt)
    return T.cross_entropy(T.concat(logits), np.concatenate(targets), ignore_index=IGNORE)


# -- PrefixLM ----------------------------------------------------------------

def _real_tokens(caption) -> np.ndarray:
    ids = np.asarray(caption, dtype=np.int64)
    return ids[ids != PAD]


def prefix_logits(model: SkipFuseModel, v: VisualSequence, caption, split: int) -> tuple[Tensor, np.ndarray]:
    """Teacher-forced decoder logits for ``caption[split:]`` given image + ``caption[:split]``."""
    ids = _real_tokens(caption)
    if len(ids) < 1 or not 0 <= split < len(ids):
        raise T.ContractError(f"split {split} outside [0, {len(ids)})")
    memory, valid = model.memory(v, ids[:split])
    suffix = ids[split:]
    dec_in = np.concatenate([[CLS], suffix[:-1]])
    return model.decoder(dec_in, memory, valid, offset=split), suffix


def prefix_lm_loss(batch: Batch, model: SkipFuseModel, splits=None,
                   rng: np.random.Generator | None = None, enc: Encoded | None = None) -> Tensor:
    """Cross-entropy over suffix tokens; ``splits`` defaults to uniform draws from [0, len)."""
    enc = enc or encode_batch(model, batch, with_text=False)
    logits, targets = [], []
    for i, (v, caption) in enumerate(zip(enc.images, batch.captions)):
        n = len(_real_tokens(caption))
        if n < 1:
            raise T.ContractError("PrefixLM needs a non-empty caption")
        split = int(splits[i]) if splits is not None else int(rng.integers(0, n))
        lg, suffix = prefix_logits(model, v, caption, split)
        logits.append(lg)
        targets.append(suffix)
    return T.cross_entropy(T.concat(logits), np.concatenate(targets))


def greedy_decode(image, prefix_tokens, model: SkipFuseModel, max_len: int) -> list[int]:
    """Argmax decoding after the prefix; stops after emitting EOS or ``max_len`` tokens."""
    if max_len < 1:
        raise T.ContractError("max_len must be at least 1")
    out: list[int] = []
    with T.no_grad():
        prefix = np.asarray(prefix_tokens, dtype=np.int64)
        memory, valid = model.memory(model.visual(image), prefix)
        tokens = [CLS]
        for _ in range(min(max_len, model.decoder.max_len + 1 - len(prefix))):
            logits = model.decoder(tokens, memory, valid, offset=len(prefix))
            nxt = int(np.argmax(logits.data[-1]))
            out.append(nxt)
            if nxt == EOS:
                break
            tokens.append(nxt)
    return out


# -- joint step --------------------------------------------------------------

def joint_step(batch: Batch, model: SkipFuseModel, optimizer, rng: np.random.Generator,
               negative_mode: str = "sample") -> dict[str, float]:
    """One optimizer step on the weighted sum of the four losses.

    Losses with weight 0 are skipped entirely and reported as 0.0.
    """
    weights = dict(zip(LOSS_NAMES, model.cfg.loss_weights))
    model.zero_grad()
    need_text = weights["itc"] != 0 or weights["itm"] != 0
    enc = encode_batch(model, batch, with_text=need_text)
    losses: dict[str, Tensor] = {}
    if weights["itc"]:
        losses["itc"] = itc_loss(batch, model, enc=enc)
    if weights["itm"]:
        losses["itm"] = itm_loss(model, enc, similarity_matrix(model, enc), negative_mode, rng)
    if weights["mlm"]:
        losses["mlm"] = mlm_loss(batch, model, rng, enc=enc)
    if weights["prefixlm"]:
        losses["prefixlm"] = prefix_lm_loss(batch, model, rng=rng, enc=enc)
    if not losses:
        raise T.ConfigError("every loss weight is zero")
    total = None
    for name, loss in losses.items():
        term = T.mul(loss, weights[name])
        total = term if total is None else T.add(total, term)
    T.backward(total)
    optimizer.step()
    out = {name: float(losses[name].data) if name in losses else 0.0 for name in LOSS_NAMES}
    out["total"] = float(total.data)
    return out
