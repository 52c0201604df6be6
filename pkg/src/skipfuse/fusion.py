"""Cross-modal fusion networks.

Four topologies share the same sublayers and differ only in the order they are
stacked:

* ``SKIP_CONNECTED``: ``L/S`` blocks, each ``S`` asymmetric co-attention layers
  (text attends to the block's incoming visual features) followed by one
  connected-attention layer over ``[v; l]`` that refreshes both streams.
* ``CONNECTED_ATTENTION``: ``L`` connected-attention layers.
* ``CO_ATTENTION``: ``L`` layers in which each stream runs self-attention,
  cross-attention to the other stream and a feed-forward net, weights untied.
* ``ASYMMETRIC_CO_ATTENTION``: ``L`` asymmetric layers; visual features are
  never updated.

All residual connections are post-LN: ``LN(sublayer(x) + x)``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .nn import Attention, FeedForward, LayerNorm, Module, key_mask
from .tensor import Tensor

ASYM = "asym"
CONNECTED = "connected"
COATTN = "coattn"


class FusionVariant(enum.Enum):
    SKIP_CONNECTED = "skip"
    CONNECTED_ATTENTION = "connected"
    CO_ATTENTION = "coattn"
    ASYMMETRIC_CO_ATTENTION = "asym"

    @classmethod
    def parse(cls, name) -> "FusionVariant":
        if isinstance(name, cls):
            return name
        try:
            return cls(str(name).lower())
        except ValueError:
            choices = ", ".join(v.value for v in cls)
            raise T.ConfigError(f"unknown fusion variant {name!r}; choose from {choices}") from None


@dataclass
class FusionState:
    v: Tensor
    l: Tensor
    text_mask: np.ndarray | None = None

    def __post_init__(self):
        if self.v.shape[-1] != self.l.shape[-1]:
            raise T.ShapeError(f"visual width {self.v.shape[-1]} != text width {self.l.shape[-1]}")
        if self.text_mask is not None:
            self.text_mask = np.asarray(self.text_mask, dtype=bool)
            if self.text_mask.shape != (self.l.shape[0],):
                raise T.ShapeError(f"text mask {self.text_mask.shape} does not cover {self.l.shape[0]} rows")


def layer_trace(variant, n_layers: int, stride: int = 1) -> list[str]:
    """Ordered layer kinds a variant stacks for ``n_layers`` fusion layers."""
    variant = FusionVariant.parse(variant)
    if variant is FusionVariant.SKIP_CONNECTED:
        if stride < 1 or n_layers % stride:
            raise T.ConfigError(f"stride {stride} does not divide {n_layers} fusion layers")
        return ([ASYM] * stride + [CONNECTED]) * (n_layers // stride)
    kind = {
        FusionVariant.CONNECTED_ATTENTION: CONNECTED,
        FusionVariant.CO_ATTENTION: COATTN,
        FusionVariant.ASYMMETRIC_CO_ATTENTION: ASYM,
    }[variant]
    return [kind] * n_layers


class _CrossStream(Module):
    """Self-attention, cross-attention to another sequence, feed-forward."""

    def __init__(self, cfg: ModelConfig, rng):
        d = cfg.d_model
        self.self_attn = Attention(d, cfg.n_heads, rng)
        self.ln_sa = LayerNorm(d, cfg.ln_eps)
        self.cross_attn = Attention(d, cfg.n_heads, rng)
        self.ln_ca = LayerNorm(d, cfg.ln_eps)
        self.ffn = FeedForward(d, cfg.ffn_multiplier, rng)
        self.ln_ffn = LayerNorm(d, cfg.ln_eps)

    def self_part(self, x: Tensor, valid) -> Tensor:
        return self.ln_sa(T.add(self.self_attn(x, x, key_mask(x.shape[0], valid)), x))

    def cross_part(self, x_sa: Tensor, other: Tensor, other_valid) -> Tensor:
        ca = self.cross_attn(x_sa, other, key_mask(x_sa.shape[0], other_valid))
        x_ca = self.ln_ca(T.add(ca, x_sa))
        return self.ln_ffn(T.add(self.ffn(x_ca), x_ca))


class AsymmetricCoAttentionLayer(_CrossStream):
    """Text-only update: ``l <- FFN-block(CA-block(SA-block(l), v))``."""

    kind = ASYM

    def __call__(self, state: FusionState) -> FusionState:
        l_sa = self.self_part(state.l, state.text_mask)
        l_out = self.cross_part(l_sa, state.v, None)
        return FusionState(state.v, l_out, state.text_mask)


class ConnectedAttentionLayer(Module):
    """Joint self-attention and FFN over the concatenated ``[v; l]`` sequence."""

    kind = CONNECTED

    def __init__(self, cfg: ModelConfig, rng):
        d = cfg.d_model
        self.self_attn = Attention(d, cfg.n_heads, rng)
        self.ln_sa = LayerNorm(d, cfg.ln_eps)
        self.ffn = FeedForward(d, cfg.ffn_multiplier, rng)
        self.ln_ffn = LayerNorm(d, cfg.ln_eps)

    def __call__(self, state: FusionState, attn_mask=None) -> FusionState:
        n_v = state.v.shape[0]
        x = T.concat([state.v, state.l])
        if attn_mask is None and state.text_mask is not None:
            valid = np.concatenate([np.ones(n_v, dtype=bool), state.text_mask])
            attn_mask = key_mask(x.shape[0], valid)
        x_sa = self.ln_sa(T.add(self.self_attn(x, x, attn_mask), x))
        out = self.ln_ffn(T.add(self.ffn(x_sa), x_sa))
        return FusionState(out[:n_v], out[n_v:], state.text_mask)


class CoAttentionLayer(Module):
    """Symmetric two-tower layer; each stream cross-attends to the other's SA output."""

    kind = COATTN

    def __init__(self, cfg: ModelConfig, rng):
        self.text = _CrossStream(cfg, rng)
        self.vision = _CrossStream(cfg, rng)

    def __call__(self, state: FusionState) -> FusionState:
        l_sa = self.text.self_part(state.l, state.text_mask)
        v_sa = self.vision.self_part(state.v, None)
        l_out = self.text.cross_part(l_sa, v_sa, None)
        v_out = self.vision.cross_part(v_sa, l_sa, state.text_mask)
        return FusionState(v_out, l_out, state.text_mask)


_LAYER_TYPES = {ASYM: AsymmetricCoAttentionLayer, CONNECTED: ConnectedAttentionLayer,
                COATTN: CoAttentionLayer}


def asymmetric_coattention_layer(state: FusionState, params: AsymmetricCoAttentionLayer) -> FusionState:
    return params(state)


def connected_attention_layer(state: FusionState, params: ConnectedAttentionLayer,
                              attn_mask=None) -> FusionState:
    return params(state, attn_mask)


def skip_connected_block(state: FusionState, asym_layers, connected: ConnectedAttentionLayer,
                         trace: list | None = None) -> FusionState:
    """``S`` asymmetric layers reading the block's incoming ``v``, then one connected layer."""
    if len(asym_layers) < 1:
        raise T.ConfigError("a skip-connected block needs at least one asymmetric layer")
    v_in = state.v
    for layer in asym_layers:
        if trace is not None:
            trace.append((ASYM, state.v))
        state = layer(state)
    if trace is not None:
        trace.append((CONNECTED, state.v))
    return connected(FusionState(v_in, state.l, state.text_mask))


class FusionNetwork(Module):
    def __init__(self, variant, cfg: ModelConfig, rng: np.random.Generator | None = None):
        self.variant = FusionVariant.parse(variant)
        self.stride = cfg.stride
        if rng is None:
            rng = np.random.default_rng(cfg.seed)
        self.layers = [_LAYER_TYPES[kind](cfg, rng)
                       for kind in layer_trace(self.variant, cfg.n_fusion_asym_layers, cfg.stride)]

    @property
    def trace(self) -> list[str]:
        return [layer.kind for layer in self.layers]

    def __call__(self, state: FusionState, trace: list | None = None) -> FusionState:
        """Run the stack; ``trace`` (if given) collects ``(kind, v consumed)`` per layer."""
        if self.variant is not FusionVariant.SKIP_CONNECTED:
            for layer in self.layers:
                if trace is not None:
                    trace.append((layer.kind, state.v))
                state = layer(state)
            return state
        step = self.stride + 1
        for start in range(0, len(self.layers), step):
            block = self.layers[start:start + step]
            state = skip_connected_block(state, block[:-1], block[-1], trace)
        return state


def fuse(variant, v, l, cfg: ModelConfig, text_mask=None,
         network: FusionNetwork | None = None) -> FusionState:
    """Fuse visual rows ``v`` [M+1, d] and text rows ``l`` [N+1, d] with one topology."""
    variant = FusionVariant.parse(variant)
    if network is None:
        network = FusionNetwork(variant, cfg)
    elif network.variant is not variant:
        raise T.ConfigError(f"network is {network.variant.value}, asked for {variant.value}")
    v = v if isinstance(v, Tensor) else Tensor(v)
    l = l if isinstance(l, Tensor) else Tensor(l)
    return network(FusionState(v, l, text_mask))
