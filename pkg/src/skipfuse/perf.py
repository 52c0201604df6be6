"""Cost models and timing for the fusion topologies.

FLOPs are ``2 x multiply-accumulates`` of the matrix products only; softmax,
layer-norm, GELU and bias adds are left out.  Per sublayer, with ``d`` the
width and ``f`` the FFN multiplier::

    SA(L)       = 8 L d^2 + 4 L^2 d
    CA(Lq, Lk)  = 4 Lq d^2 + 4 Lk d^2 + 4 Lq Lk d
    FFN(L)      = 4 f L d^2
"""

from __future__ import annotations

import csv
import io
import math
import platform
import time
from dataclasses import asdict, dataclass, fields

import numpy as np
from threadpoolctl import threadpool_limits

from . import tensor as T
from .config import ModelConfig
from .fusion import ASYM, COATTN, CONNECTED, FusionNetwork, FusionState, FusionVariant, layer_trace

CSV_HEADER = ("variant", "d_model", "m_len", "n_len", "layers", "stride",
              "flops", "wall_seconds", "samples", "warmup", "host")


# -- analytical model --------------------------------------------------------

def sa_flops(length: int, d: int) -> int:
    return 8 * length * d * d + 4 * length * length * d


def ca_flops(lq: int, lk: int, d: int) -> int:
    return 4 * lq * d * d + 4 * lk * d * d + 4 * lq * lk * d


def ffn_flops(length: int, d: int, multiplier: int = 4) -> int:
    return 4 * multiplier * length * d * d


def layer_flops(kind: str, d: int, m_len: int, n_len: int, ffn_multiplier: int = 4) -> int:
    text = sa_flops(n_len, d) + ca_flops(n_len, m_len, d) + ffn_flops(n_len, d, ffn_multiplier)
    if kind == ASYM:
        return text
    if kind == CONNECTED:
        total = m_len + n_len
        return sa_flops(total, d) + ffn_flops(total, d, ffn_multiplier)
    if kind == COATTN:
        vision = sa_flops(m_len, d) + ca_flops(m_len, n_len, d) + ffn_flops(m_len, d, ffn_multiplier)
        return text + vision
    raise T.ConfigError(f"unknown layer kind {kind!r}")


def flop_count(variant, d: int, m_len: int, n_len: int, layers: int, stride: int = 1,
               ffn_multiplier: int = 4) -> int:
    """Fusion-network FLOPs; ``m_len`` and ``n_len`` include the CLS rows."""
    if min(d, m_len, n_len, layers) < 1:
        raise T.ConfigError("dimensions must be positive")
    return sum(layer_flops(kind, d, m_len, n_len, ffn_multiplier)
               for kind in layer_trace(variant, layers, stride))


def fusion_config(d: int, layers: int, stride: int, n_heads: int | None = None,
                  ffn_multiplier: int = 4, seed: int = 0) -> ModelConfig:
    if n_heads is None:
        n_heads = max(h for h in (12, 8, 4, 2, 1) if d % h == 0)
    return ModelConfig(d_model=d, n_heads=n_heads, n_fusion_asym_layers=layers,
                       stride=stride if layers % stride == 0 else 1,
                       ffn_multiplier=ffn_multiplier, seed=seed)


def _inputs(rng: np.random.Generator, m_len: int, n_len: int, d: int):
    dtype = T.get_dtype()
    v = T.Tensor(rng.normal(size=(m_len, d)).astype(dtype))
    l = T.Tensor(rng.normal(size=(n_len, d)).astype(dtype))
    return v, l


def measured_flops(variant, d: int, m_len: int, n_len: int, layers: int, stride: int = 1,
                   ffn_multiplier: int = 4, seed: int = 0) -> int:
    """FLOPs tallied by running one real forward pass with the multiply counter on."""
    cfg = fusion_config(d, layers, stride, ffn_multiplier=ffn_multiplier, seed=seed)
    net = FusionNetwork(variant, cfg)
    v, l = _inputs(np.random.default_rng(seed), m_len, n_len, d)
    with T.no_grad(), T.count_macs() as counter:
        net(FusionState(v, l))
    return counter.flops


# -- timing ------------------------------------------------------------------

@dataclass
class BenchRecord:
    variant: str
    d_model: int
    m_len: int
    n_len: int
    layers: int
    stride: int
    flops: int
    wall_seconds: float
    samples: int
    warmup: int
    host: str

    def __post_init__(self):
        if not self.host.isprintable():
            raise T.ContractError("host descriptor must be a single line of printable text")

    def to_row(self) -> list[str]:
        return [str(v) if not isinstance(v, float) else repr(v) for v in asdict(self).values()]

    @classmethod
    def from_row(cls, row) -> "BenchRecord":
        if isinstance(row, dict):
            row = [row[name] for name in CSV_HEADER]
        kinds = {f.name: f.type for f in fields(cls)}
        values = {}
        for name, raw in zip(CSV_HEADER, row):
            kind = kinds[name]
            values[name] = int(raw) if kind == "int" else float(raw) if kind == "float" else raw
        return cls(**values)


def host_descriptor() -> str:
    return f"{platform.machine()}/{platform.system()}/py{platform.python_version()}/numpy{np.__version__}"


def write_csv(records, fh=None) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for rec in records:
        writer.writerow(rec.to_row())
    text = buf.getvalue()
    if fh is not None:
        fh.write(text)
    return text


def read_csv(text: str) -> list[BenchRecord]:
    reader = csv.reader(io.StringIO(text, newline=""))
    header = next(reader)
    if tuple(header) != CSV_HEADER:
        raise T.ContractError(f"unexpected CSV header {header}")
    return [BenchRecord.from_row(row) for row in reader]


def benchmark_forward(variant, cfg: ModelConfig, m_len: int, n_len: int, samples: int = 100,
                      warmup: int = 5, network: FusionNetwork | None = None,
                      threads: int = 1) -> BenchRecord:
    """Time ``samples`` sequential single-sample forwards after ``warmup`` untimed ones."""
    variant = FusionVariant.parse(variant)
    if samples < 1 or warmup < 0:
        raise T.ConfigError("samples must be >= 1 and warmup >= 0")
    net = network if network is not None else FusionNetwork(variant, cfg)
    rng = np.random.default_rng(cfg.seed)
    pool = [_inputs(rng, m_len, n_len, cfg.d_model) for _ in range(min(samples, 4))]
    with T.no_grad(), threadpool_limits(limits=threads):
        for i in range(warmup):
            net(FusionState(*pool[i % len(pool)]))
        start = time.perf_counter()
        for i in range(samples):
            net(FusionState(*pool[i % len(pool)]))
        elapsed = time.perf_counter() - start
    stride = cfg.stride if variant is FusionVariant.SKIP_CONNECTED else 0
    flops = flop_count(variant, cfg.d_model, m_len, n_len, cfg.n_fusion_asym_layers,
                       max(stride, 1), cfg.ffn_multiplier)
    return BenchRecord(variant.value, cfg.d_model, m_len, n_len, cfg.n_fusion_asym_layers,
                       stride, flops, elapsed, samples, warmup, host_descriptor())


def stride_sweep(cfg: ModelConfig, strides, m_len: int, n_len: int, samples: int = 100,
                 warmup: int = 5) -> list[BenchRecord]:
    """One skip-connected record per stride at fixed dims and seed."""
    layers = cfg.n_fusion_asym_layers
    bad = [s for s in strides if s < 1 or layers % s]
    if bad:
        raise T.ConfigError(f"strides {bad} do not divide {layers} fusion layers")
    return [benchmark_forward(FusionVariant.SKIP_CONNECTED, cfg.replace(stride=s), m_len, n_len,
                              samples, warmup)
            for s in strides]


# -- distributed memory model ---------------------------------------------------

@dataclass(frozen=True)
class PrecisionProfile:
    bytes_per_param: int
    bytes_per_grad: int
    bytes_per_optim_state: int
    optim_states_per_param: int


PROFILES = {
    # fp32 weights and grads, Adam first and second moments in fp32
    "adam-fp32": PrecisionProfile(4, 4, 4, 2),
    # 16-bit weights and grads, fp32 master copy plus both Adam moments
    "adam-bf16": PrecisionProfile(2, 2, 4, 3),
    "sgd-fp32": PrecisionProfile(4, 4, 4, 1),
}


@dataclass
class MemoryEstimate:
    n_gpus: int
    param_count: int
    bytes_per_param: int
    bytes_per_grad: int
    bytes_per_optim_state: int
    optim_states_per_param: int
    static_bytes_per_gpu: int
    zero_bytes_per_gpu: int
    activation_bytes_full: int
    activation_bytes_checkpointed: int
    recompute_forward_multiplier: float


def zero_memory_estimate(param_count: int, n_gpus: int, profile="adam-fp32",
                         layer_rows=(), d_model: int = 0, activation_bytes: int = 4,
                         checkpoint_every: int = 1) -> MemoryEstimate:
    """Static memory with and without partitioning over ``n_gpus``, plus an activation model.

    ``layer_rows`` lists the activation rows each layer keeps for backward; with
    checkpointing only the input of every ``checkpoint_every``-th layer is kept
    and the forward pass runs twice.
    """
    if param_count < 1 or n_gpus < 1:
        raise T.ConfigError("param_count and n_gpus must be >= 1")
    if checkpoint_every < 1:
        raise T.ConfigError("checkpoint_every must be >= 1")
    prof = PROFILES[profile] if isinstance(profile, str) else profile
    per_param = (prof.bytes_per_param + prof.bytes_per_grad
                 + prof.optim_states_per_param * prof.bytes_per_optim_state)
    static = param_count * per_param
    zero = math.ceil(static / n_gpus)
    rows = list(layer_rows)
    full = sum(rows) * d_model * activation_bytes
    kept = sum(rows[::checkpoint_every]) * d_model * activation_bytes
    multiplier = 2.0 if rows else 1.0
    return MemoryEstimate(n_gpus, param_count, prof.bytes_per_param, prof.bytes_per_grad,
                          prof.bytes_per_optim_state, prof.optim_states_per_param,
                          static, zero, full, min(kept, full), multiplier)


def fusion_activation_rows(variant, m_len: int, n_len: int, layers: int, stride: int = 1) -> list[int]:
    """Rows of hidden state each fusion layer produces (its stored activations)."""
    rows = {ASYM: n_len, CONNECTED: m_len + n_len, COATTN: m_len + n_len}
    return [rows[k] for k in layer_trace(variant, layers, stride)]
