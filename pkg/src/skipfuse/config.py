"""Model hyperparameters and the ``key = value`` config-file reader."""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field, fields

from .tensor import ConfigError

# Section each field lives under in a config file.
SECTIONS = {
    "encoders": ("d_model", "n_heads", "n_visual_layers", "n_text_layers", "image_size",
                 "patch_size", "channels", "vocab_size", "max_text_len", "ffn_multiplier",
                 "ln_eps", "seed"),
    "fusion": ("n_fusion_asym_layers", "stride"),
    "objectives": ("n_decoder_layers", "queue_size", "momentum", "temperature",
                   "loss_weights", "mlm_mask_rate"),
}


@dataclass
class ModelConfig:
    d_model: int = 64
    n_heads: int = 4
    n_visual_layers: int = 2
    n_text_layers: int = 2
    n_fusion_asym_layers: int = 2
    stride: int = 2
    n_decoder_layers: int = 1
    image_size: int = 16
    patch_size: int = 8
    channels: int = 3
    vocab_size: int = 64
    max_text_len: int = 16
    ffn_multiplier: int = 4
    queue_size: int = 128
    momentum: float = 0.995
    temperature: float = 0.07
    loss_weights: tuple[float, float, float, float] = (1.0, 1.0, 1.0, 1.0)
    mlm_mask_rate: float = 0.15
    ln_eps: float = 1e-12
    seed: int = 0

    def __post_init__(self):
        self.loss_weights = tuple(float(w) for w in self.loss_weights)
        self.validate()

    @property
    def n_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    def validate(self):
        if self.image_size % self.patch_size:
            raise ConfigError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.stride < 1 or self.n_fusion_asym_layers % self.stride:
            raise ConfigError(f"stride {self.stride} does not divide {self.n_fusion_asym_layers} fusion layers")
        if self.queue_size <= 0:
            raise ConfigError("queue_size must be positive")
        if not 0.0 < self.momentum < 1.0:
            raise ConfigError("momentum must lie in (0, 1)")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")
        if not 0.0 < self.mlm_mask_rate < 1.0:
            raise ConfigError("mlm_mask_rate must lie in (0, 1)")
        if len(self.loss_weights) != 4:
            raise ConfigError("loss_weights needs four entries (itc, itm, mlm, prefixlm)")

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)


def base_profile(**overrides) -> ModelConfig:
    """Base-size dims used for forward-only timing (ViT-B/16 at 256px, 6 fusion layers)."""
    base = dict(d_model=768, n_heads=12, image_size=256, patch_size=16,
                n_fusion_asym_layers=6, stride=6, max_text_len=30,
                queue_size=65536, momentum=0.995)
    base.update(overrides)
    return ModelConfig(**base)


def _coerce(name: str, raw: str):
    types = {f.name: f.type for f in fields(ModelConfig)}
    kind = types[name]
    try:
        if name == "loss_weights":
            return tuple(float(x) for x in raw.split(","))
        if kind == "int":
            return int(raw)
        return float(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for {name}: {raw!r}") from exc


def parse_config_text(text: str) -> dict:
    """Field overrides from config text; unknown sections or keys raise ConfigError."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    values = {}
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
        for key, raw in parser.items(section):
            if key not in SECTIONS[section]:
                raise ConfigError(f"unknown key {key!r} in section [{section}]")
            values[key] = _coerce(key, raw)
    return values


def load_config(path, base: ModelConfig | None = None) -> ModelConfig:
    with open(path, encoding="utf-8") as fh:
        values = parse_config_text(fh.read())
    return (base or ModelConfig()).replace(**values)


def dump_config(cfg: ModelConfig) -> str:
    lines = []
    for section, names in SECTIONS.items():
        lines.append(f"[{section}]")
        for name in names:
            value = getattr(cfg, name)
            if isinstance(value, tuple):
                value = ",".join(repr(v) for v in value)
            lines.append(f"{name} = {value}")
        lines.append("")
    return "\n".join(lines)
