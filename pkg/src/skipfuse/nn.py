"""Parameter containers and the transformer sublayers shared by every model part."""

from __future__ import annotations

from collections.abc import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor

INIT_STD = 0.02


class Module:
    """Walks its attributes (in assignment order) to find parameters and submodules."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            full = f"{prefix}{name}"
            if isinstance(value, Tensor):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def requires_grad_(self, flag: bool):
        for p in self.parameters():
            p.requires_grad = flag
        return self

    def astype(self, dtype):
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        own = dict(self.named_parameters())
        if set(own) != set(state):
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            raise T.ContractError(f"state mismatch: missing={missing} unexpected={extra}")
        for name, p in own.items():
            if state[name].shape != p.shape:
                raise T.ShapeError(f"{name}: shape {state[name].shape} != {p.shape}")
            p.data = np.array(state[name], dtype=p.data.dtype)


def param(array) -> Tensor:
    return Tensor(array, requires_grad=True)


def normal(rng: np.random.Generator, *shape) -> Tensor:
    return param(rng.normal(0.0, INIT_STD, size=shape))


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator):
        self.weight = normal(rng, d_in, d_out)
        self.bias = param(np.zeros(d_out))

    def __call__(self, x: Tensor) -> Tensor:
        return T.add(T.matmul(x, self.weight), self.bias)


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-12):
        self.gain = param(np.ones(d))
        self.bias = param(np.zeros(d))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias, self.eps)


class Attention(Module):
    """Projection weights for one multi-head attention sublayer."""

    def __init__(self, d: int, n_heads: int, rng: np.random.Generator):
        if d % n_heads:
            raise T.ConfigError(f"d_model={d} is not divisible by n_heads={n_heads}")
        self.n_heads = n_heads
        self.wq, self.bq = normal(rng, d, d), param(np.zeros(d))
        self.wk, self.bk = normal(rng, d, d), param(np.zeros(d))
        self.wv, self.bv = normal(rng, d, d), param(np.zeros(d))
        self.wo, self.bo = normal(rng, d, d), param(np.zeros(d))

    def __call__(self, query_src: Tensor, kv_src: Tensor, mask=None) -> Tensor:
        return T.multi_head_attention(query_src, kv_src, mask, self)


class FeedForward(Module):
    def __init__(self, d: int, multiplier: int, rng: np.random.Generator):
        self.fc1 = Linear(d, multiplier * d, rng)
        self.fc2 = Linear(multiplier * d, d, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))


def key_mask(lq: int, key_valid) -> np.ndarray | None:
    """[lq, lk] mask letting every query see exactly the valid keys."""
    if key_valid is None:
        return None
    key_valid = np.asarray(key_valid, dtype=bool)
    if key_valid.all():
        return None
    return np.broadcast_to(key_valid, (lq, key_valid.shape[0]))
