"""Procedural image-caption pairs.

An image is a single colored rectangle on a black canvas.  Its caption names
the parameters that drew it, so matched pairs share every attribute and a
mismatched caption differs in at least one word.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .config import ModelConfig
from .vocab import COLORS, COLS, EOS, FILLS, ROWS, SIZES, WORD_IDS

RGB = {
    "red": (1.0, 0.1, 0.1),
    "green": (0.1, 1.0, 0.1),
    "blue": (0.1, 0.1, 1.0),
    "yellow": (1.0, 1.0, 0.1),
}


@dataclass(frozen=True)
class Scene:
    color: str
    size: str
    fill: str
    row: str
    col: str

    def caption(self) -> np.ndarray:
        words = (self.color, self.size, self.fill, self.row, self.col)
        return np.array([WORD_IDS[w] for w in words] + [EOS], dtype=np.int64)

    def render(self, image_size: int, channels: int = 3) -> np.ndarray:
        img = np.zeros((channels, image_size, image_size))
        half = image_size // 2
        side = half if self.size == "large" else max(2, half // 2)
        top = 0 if self.row == "top" else half
        left = 0 if self.col == "left" else half
        # small shapes sit in the middle of their quadrant
        off = (half - side) // 2
        y0, x0 = top + off, left + off
        box = np.zeros((image_size, image_size), dtype=bool)
        box[y0:y0 + side, x0:x0 + side] = True
        if self.fill == "hollow" and side > 2:
            box[y0 + 1:y0 + side - 1, x0 + 1:x0 + side - 1] = False
        rgb = RGB[self.color]
        for c in range(channels):
            img[c][box] = rgb[c % 3]
        return img


ALL_SCENES = [Scene(*p) for p in itertools.product(COLORS, SIZES, FILLS, ROWS, COLS)]


@dataclass
class Batch:
    """Aligned pairs: ``images[i]`` matches ``captions[i]``."""

    images: list
    captions: list

    def __post_init__(self):
        if len(self.images) != len(self.captions):
            raise ValueError("images and captions must have equal counts")

    def __len__(self):
        return len(self.images)


def synthetic_pairs(n: int, cfg: ModelConfig, seed: int = 0) -> Batch:
    """``n`` pairs; distinct scenes until all 64 are used, then repeats."""
    rng = np.random.default_rng(seed)
    order = []
    while len(order) < n:
        order.extend(rng.permutation(len(ALL_SCENES)).tolist())
    scenes = [ALL_SCENES[i] for i in order[:n]]
    return Batch([s.render(cfg.image_size, cfg.channels) for s in scenes],
                 [s.caption() for s in scenes])


def sample_batch(data: Batch, size: int, rng: np.random.Generator) -> Batch:
    idx = rng.choice(len(data), size=min(size, len(data)), replace=False)
    return Batch([data.images[i] for i in idx], [data.captions[i] for i in idx])
