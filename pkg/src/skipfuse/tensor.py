"""Dense tensors with tape-based reverse-mode differentiation.

Every op that sees an input with ``requires_grad`` set appends an entry to the
recording tape (a monotonically increasing sequence number plus a backward
closure).  ``backward`` replays the entries reachable from a scalar loss in
reverse recording order and accumulates gradients into the leaf tensors.

Storage is a numpy array.  The default scalar type is float32; gradient checks
switch to float64 with :func:`precision`.
"""

from __future__ import annotations

import contextlib
import itertools
import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "ShapeError",
    "ConfigError",
    "DegenerateMaskError",
    "ContractError",
    "EmptyBatchError",
    "precision",
    "get_dtype",
    "no_grad",
    "grad_enabled",
    "count_macs",
    "backward",
    "matmul",
    "add",
    "mul",
    "concat",
    "reshape",
    "transpose",
    "softmax_rows",
    "log_softmax_rows",
    "layer_norm",
    "gelu",
    "l2_normalize",
    "cross_entropy",
    "embedding",
    "multi_head_attention",
    "grad_check",
]

MASK_FILL = -1e9


class ShapeError(ValueError):
    pass


class ConfigError(ValueError):
    pass


class DegenerateMaskError(ValueError):
    pass


class ContractError(ValueError):
    pass


class EmptyBatchError(ValueError):
    pass


_state = {"dtype": np.dtype(np.float32), "grad": True, "counter": None}
_seq = itertools.count()


def get_dtype() -> np.dtype:
    return _state["dtype"]


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the scalar type of newly created tensors."""
    prev = _state["dtype"]
    _state["dtype"] = np.dtype(dtype)
    try:
        yield
    finally:
        _state["dtype"] = prev


@contextlib.contextmanager
def no_grad():
    prev = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = prev


def grad_enabled() -> bool:
    return _state["grad"]


class MacCounter:
    """Tally of multiply-accumulates performed by :func:`matmul`."""

    def __init__(self):
        self.macs = 0
        self.calls = 0

    @property
    def flops(self) -> int:
        return 2 * self.macs


@contextlib.contextmanager
def count_macs():
    """Count every matmul multiply-accumulate executed inside the block."""
    prev = _state["counter"]
    counter = MacCounter()
    _state["counter"] = counter
    try:
        yield counter
    finally:
        _state["counter"] = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_seq", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype or _state["dtype"])
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._seq = -1
        self._parents: tuple = ()
        self._backward: Callable | None = None

    # construction helpers
    @classmethod
    def zeros(cls, *shape, requires_grad=False):
        return cls(np.zeros(shape), requires_grad=requires_grad)

    @classmethod
    def ones(cls, *shape, requires_grad=False):
        return cls(np.ones(shape), requires_grad=requires_grad)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"expected a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"

    # operators
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, -other if isinstance(other, Tensor) else -np.asarray(other))

    def __rsub__(self, other):
        return add(-self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not supported")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return _index(self, idx)

    @property
    def T(self):
        return transpose(self, (1, 0))

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    t = Tensor(out, dtype=out.dtype)
    if _state["grad"] and any(p.requires_grad for p in parents):
        t.requires_grad = True
        t._seq = next(_seq)
        t._parents = tuple(parents)
        t._backward = backward_fn
    return t


def backward(loss: Tensor):
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    nodes = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if id(t) in nodes:
            continue
        nodes[id(t)] = t
        stack.extend(p for p in t._parents if p.requires_grad)
    grads = {id(loss): np.ones_like(loss.data)}
    for t in sorted(nodes.values(), key=lambda n: n._seq, reverse=True):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t.is_leaf:
            t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        for parent, pg in zip(t._parents, t._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg


# -- elementwise and structural ops -----------------------------------------

def add(a, b) -> Tensor:
    """Sum of equal shapes, or a tensor plus a row vector broadcast over its last axis."""
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        const = np.asarray(b, dtype=a.data.dtype)
        return _record(a.data + const, (a,), lambda g: (g,))
    if a.shape == b.shape:
        return _record(a.data + b.data, (a, b), lambda g: (g, g))
    if b.ndim == 1 and a.shape[-1:] == b.shape:
        return _record(a.data + b.data, (a, b),
                       lambda g: (g, g.reshape(-1, b.shape[0]).sum(axis=0)))
    if a.ndim == 1 and b.shape[-1:] == a.shape:
        return add(b, a)
    raise ShapeError(f"cannot add shapes {a.shape} and {b.shape}")


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        c = np.asarray(b, dtype=a.data.dtype)
        if c.ndim and c.shape != a.shape:
            raise ShapeError(f"cannot multiply shapes {a.shape} and {c.shape}")
        return _record(a.data * c, (a,), lambda g: (g * c,))
    if a.shape != b.shape:
        if b.ndim == 1 and a.shape[-1:] == b.shape:
            return _record(a.data * b.data, (a, b),
                           lambda g: (g * b.data, (g * a.data).reshape(-1, b.shape[0]).sum(axis=0)))
        raise ShapeError(f"cannot multiply shapes {a.shape} and {b.shape}")
    return _record(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of 2-D tensors, or of 3-D stacks with equal leading size."""
    a, b = as_tensor(a), as_tensor(b)
    ok = a.ndim == b.ndim and a.ndim in (2, 3) and a.shape[-1] == b.shape[-2]
    if ok and a.ndim == 3:
        ok = a.shape[0] == b.shape[0]
    if not ok:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    counter = _state["counter"]
    if counter is not None:
        batch = a.shape[0] if a.ndim == 3 else 1
        counter.macs += batch * a.shape[-2] * a.shape[-1] * b.shape[-1]
        counter.calls += 1
    out = a.data @ b.data

    def back(g):
        bt = np.swapaxes(b.data, -1, -2)
        at = np.swapaxes(a.data, -1, -2)
        return (g @ bt if a.requires_grad else None,
                at @ g if b.requires_grad else None)

    return _record(out, (a, b), back)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    src = a.shape
    return _record(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _record(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _record(np.concatenate([t.data for t in tensors], axis=axis), tensors, back)


def _index(a: Tensor, idx) -> Tensor:
    if isinstance(idx, Tensor):
        raise TypeError("index with integers, slices or numpy arrays")

    def back(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _record(a.data[idx], (a,), back)


def embedding(table: Tensor, ids) -> Tensor:
    """Rows of ``table`` selected by integer ids; repeated ids accumulate gradient."""
    ids = np.asarray(ids, dtype=np.int64)
    return _index(table, ids)


def sum_all(a: Tensor) -> Tensor:
    return _record(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    return _record(np.asarray(a.data.mean()), (a,),
                   lambda g: (np.broadcast_to(g / n, a.shape).copy(),))


# -- nonlinearities and normalisation -----------------------------------------

def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis, computed after subtracting the row max."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _record(y, (x,), back)


def log_softmax_rows(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))

    def back(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return _record(out, (x,), back)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-12) -> Tensor:
    d = x.shape[-1]
    if d < 2:
        raise ShapeError(f"layer_norm needs at least 2 features, got {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def back(g):
        gx = g * gain.data
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                    - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        flat = g.reshape(-1, d)
        return dx, (flat * xhat.reshape(-1, d)).sum(axis=0), flat.sum(axis=0)

    return _record(out, (x, gain, bias), back)


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf) GELU."""
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    out = (x.data * cdf).astype(x.data.dtype, copy=False)

    def back(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x.data * x.data)
        return (g * (cdf + x.data * pdf),)

    return _record(out, (x,), back)


def l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale each row to unit Euclidean norm."""
    norm = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    norm = np.maximum(norm, eps)
    y = x.data / norm

    def back(g):
        return ((g - y * (g * y).sum(axis=-1, keepdims=True)) / norm,)

    return _record(y, (x,), back)


def cross_entropy(logits: Tensor, targets, ignore_index: int | None = None) -> Tensor:
    """Mean negative log-likelihood over the rows whose target is not ignored."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy expects logits [m, V] and m targets, got "
                         f"{logits.shape} and {targets.shape}")
    keep = np.ones(len(targets), dtype=bool) if ignore_index is None else targets != ignore_index
    count = int(keep.sum())
    if count == 0:
        raise EmptyBatchError("every row of the batch is ignored")
    vocab = logits.shape[1]
    kept_targets = targets[keep]
    if np.any(kept_targets < 0) or np.any(kept_targets >= vocab):
        raise ContractError(f"targets must lie in [0, {vocab})")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    rows = np.nonzero(keep)[0]
    loss = -logp[rows, kept_targets].sum() / count

    def back(g):
        grad = np.zeros_like(logits.data)
        grad[rows] = np.exp(logp[rows])
        grad[rows, kept_targets] -= 1.0
        return (grad * (g / count),)

    return _record(np.asarray(loss, dtype=logits.data.dtype), (logits,), back)


# -- attention --------------------------------------------------------------

def multi_head_attention(query_src: Tensor, kv_src: Tensor, mask, params) -> Tensor:
    """Scaled dot-product attention with ``params.n_heads`` heads.

    ``params`` carries ``wq, bq, wk, bk, wv, bv, wo, bo``; weights are laid out
    [d_in, d_out] so a projection is ``x @ w + b``.  ``mask`` is a boolean
    [Lq, Lk] array (True = may attend) or None.
    """
    d = query_src.shape[-1]
    h = params.n_heads
    if d % h:
        raise ConfigError(f"d_model={d} is not divisible by n_heads={h}")
    lq, lk = query_src.shape[0], kv_src.shape[0]
    dh = d // h
    q = add(matmul(query_src, params.wq), params.bq)
    k = add(matmul(kv_src, params.wk), params.bk)
    v = add(matmul(kv_src, params.wv), params.bv)
    q = transpose(reshape(q, (lq, h, dh)), (1, 0, 2))
    kt = transpose(reshape(k, (lk, h, dh)), (1, 2, 0))
    v = transpose(reshape(v, (lk, h, dh)), (1, 0, 2))
    scores = mul(matmul(q, kt), 1.0 / math.sqrt(dh))
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (lq, lk):
            raise ShapeError(f"mask shape {mask.shape} does not match ({lq}, {lk})")
        if not mask.any(axis=1).all():
            raise DegenerateMaskError("an attention row has every key masked")
        fill = np.where(mask, 0.0, MASK_FILL).astype(scores.data.dtype)
        scores = add(scores, np.broadcast_to(fill, scores.shape))
    attn = softmax_rows(scores)
    ctx = transpose(matmul(attn, v), (1, 0, 2))
    return add(matmul(reshape(ctx, (lq, d)), params.wo), params.bo)


# -- verification -----------------------------------------------------------

def grad_check(f: Callable[[], Tensor], leaves: Iterable[Tensor], h: float = 1e-5) -> float:
    """Worst relative error between tape gradients and central differences.

    ``f`` takes no arguments and closes over ``leaves``; it is re-evaluated
    with each leaf element nudged by +-h.  Leaves are promoted to float64.
    """
    leaves = list(leaves)
    if not 1e-6 <= h <= 1e-3:
        raise ContractError(f"step h={h} outside [1e-6, 1e-3]")
    with precision(np.float64):
        for leaf in leaves:
            leaf.data = leaf.data.astype(np.float64)
            leaf.requires_grad = True
            leaf.grad = None
        out = f()
        if out.data.size != 1:
            raise ContractError(f"grad_check needs a scalar function, got shape {out.shape}")
        backward(out)
        analytic = [np.zeros_like(l.data) if l.grad is None else l.grad.copy() for l in leaves]
        worst = 0.0
        with no_grad():
            for leaf, ga in zip(leaves, analytic):
                flat = leaf.data.reshape(-1)
                gflat = ga.reshape(-1)
                for i in range(flat.size):
                    orig = flat[i]
                    flat[i] = orig + h
                    fp = float(f().data)
                    flat[i] = orig - h
                    fm = float(f().data)
                    flat[i] = orig
                    num = (fp - fm) / (2 * h)
                    denom = max(abs(num), abs(gflat[i]), 1e-8)
                    worst = max(worst, abs(num - gflat[i]) / denom)
        for leaf in leaves:
            leaf.grad = None
    return worst
