"""Toy pretraining loop on synthetic pairs."""

from __future__ import annotations

from typing import TextIO

import numpy as np

from . import checkpoint
from .config import ModelConfig
from .data import Batch, sample_batch, synthetic_pairs
from .fusion import FusionVariant
from .objectives import LOSS_NAMES, SkipFuseModel, joint_step
from .optim import make_optimizer

LOG_FIELDS = ("step",) + LOSS_NAMES + ("total",)


def format_log_line(step: int, comps: dict) -> str:
    return "\t".join([str(step)] + [repr(float(comps[k])) for k in LOG_FIELDS[1:]])


def train_rng(cfg: ModelConfig) -> np.random.Generator:
    return np.random.default_rng([cfg.seed, 1])


def train(cfg: ModelConfig, steps: int, data: Batch | None = None, n_pairs: int = 64,
          batch_size: int = 8, variant=FusionVariant.SKIP_CONNECTED, optimizer: str = "sgd",
          lr: float | None = None, log: TextIO | None = None,
          model: SkipFuseModel | None = None):
    """Run ``steps`` joint steps; returns ``(model, history)``.

    Each step draws ``batch_size`` distinct pairs from ``data``.  When ``log`` is
    given, one tab-separated line per step is written to it.
    """
    model = model or SkipFuseModel(cfg, variant)
    data = data or synthetic_pairs(n_pairs, cfg, seed=cfg.seed)
    opt = make_optimizer(optimizer, model.trainable_parameters(), lr)
    rng = train_rng(cfg)
    history = []
    for step in range(1, steps + 1):
        batch = sample_batch(data, batch_size, rng)
        comps = joint_step(batch, model, opt, rng)
        history.append(comps)
        if log is not None:
            log.write(format_log_line(step, comps) + "\n")
    return model, history


def save_model(model: SkipFuseModel, path):
    checkpoint.save(path, model.checkpoint_state())


def load_model(cfg: ModelConfig, path, variant=FusionVariant.SKIP_CONNECTED) -> SkipFuseModel:
    model = SkipFuseModel(cfg, variant)
    model.load_checkpoint_state(checkpoint.load(path))
    return model
