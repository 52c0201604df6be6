"""First-order optimizers updating ``Tensor.data`` in place."""

from __future__ import annotations

import numpy as np


class SGD:
    """Gradient descent with heavy-ball momentum."""

    def __init__(self, params, lr: float = 1e-2, momentum: float = 0.9):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self._buf: dict[int, np.ndarray] = {}

    def step(self):
        for p in self.params:
            if p.grad is None:
                continue
            buf = self._buf.get(id(p))
            buf = p.grad.copy() if buf is None else self.momentum * buf + p.grad
            self._buf[id(p)] = buf
            p.data -= self.lr * buf

    def zero_grad(self):
        for p in self.params:
            p.grad = None


class Adam:
    def __init__(self, params, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self._m: dict[int, np.ndarray] = {}
        self._v: dict[int, np.ndarray] = {}
        self._t: dict[int, int] = {}

    def step(self):
        for p in self.params:
            if p.grad is None:
                continue
            key = id(p)
            t = self._t.get(key, 0) + 1
            m = self.b1 * self._m.get(key, 0.0) + (1 - self.b1) * p.grad
            v = self.b2 * self._v.get(key, 0.0) + (1 - self.b2) * p.grad * p.grad
            self._t[key], self._m[key], self._v[key] = t, m, v
            mhat = m / (1 - self.b1 ** t)
            vhat = v / (1 - self.b2 ** t)
            p.data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


def make_optimizer(name: str, params, lr: float | None = None):
    if name == "sgd":
        return SGD(params, lr=1e-2 if lr is None else lr, momentum=0.9)
    if name == "adam":
        return Adam(params, lr=1e-3 if lr is None else lr)
    raise ValueError(f"unknown optimizer {name!r}")
