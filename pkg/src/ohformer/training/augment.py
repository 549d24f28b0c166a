"""
Training-time augmentation: horizontal flip and random erasing.

Each image gets its own child generator, seeded from the main generator in
batch order, so augmenting a batch in parallel gives the same result as
augmenting it serially.
"""

import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from ohformer.tensor import Rng, parallel_map

ERASE_AREA = (0.02, 0.4)
ERASE_ASPECT = (0.3, 3.33)
ERASE_ATTEMPTS = 100


@dataclass(frozen=True)
class AugmentConfig:
    flip: bool = True
    erase: bool = True
    flip_prob: float = 0.5
    erase_prob: float = 0.5


def flip_image(image: np.ndarray) -> np.ndarray:
    """Mirror a [C, H, W] image left to right."""
    return image[:, :, ::-1].copy()


def erase_box(height: int, width: int, rng: Rng) -> Optional[Tuple[int, int, int, int]]:
    """Pick (top, left, h, w) of an erasing box inside the image, or None after too many misses."""
    area = height * width
    for _ in range(ERASE_ATTEMPTS):
        target = rng.uniform(*ERASE_AREA) * area
        aspect = rng.uniform(*ERASE_ASPECT)
        h = int(round(math.sqrt(target * aspect)))
        w = int(round(math.sqrt(target / aspect)))
        if 0 < h < height and 0 < w < width:
            top = rng.integer(height - h + 1)
            left = rng.integer(width - w + 1)
            return top, left, h, w
    return None


def augment(image: np.ndarray, rng: Rng, config: AugmentConfig, fill: Sequence[float]) -> np.ndarray:
    """
    Randomly flip, then randomly erase a box filled with ``fill`` (one value per channel).

    Both draws are always taken, so the generator advances the same way
    whatever the outcome.
    """
    out = image
    flip_draw = rng.random()
    erase_draw = rng.random()
    if config.flip and flip_draw < config.flip_prob:
        out = flip_image(out)
    if config.erase and erase_draw < config.erase_prob:
        box = erase_box(out.shape[1], out.shape[2], rng)
        if box is not None:
            top, left, h, w = box
            out = out.copy()
            out[:, top:top + h, left:left + w] = np.asarray(fill, dtype=out.dtype)[:, None, None]
    return out


def augment_batch(images: np.ndarray, seeds: Sequence[int], config: AugmentConfig,
                  fill: Sequence[float]) -> np.ndarray:
    def one(i):
        return augment(images[i], Rng(seeds[i]), config, fill)

    return np.stack(parallel_map(one, range(len(images))))
