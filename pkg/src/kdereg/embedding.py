"""Sinusoidal 2D positional embedding for pixel coordinates."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import InputError


@dataclass(frozen=True)
class EmbeddingConfig:
    """Embedding width ``dimension`` (multiple of 4) and frequency ``base``."""

    dimension: int = 128
    base: float = 10000.0

    def __post_init__(self):
        if int(self.dimension) != self.dimension or self.dimension < 4 or self.dimension % 4:
            raise InputError(
                f"embedding dimension must be a multiple of 4 and >= 4, got {self.dimension}"
            )
        if not self.base > 0:
            raise InputError("base must be positive")

    @property
    def frequencies(self) -> np.ndarray:
        """Per-index divisors ``base ** (i / (d/4))`` for ``i < d/4``."""
        quarter = self.dimension // 4
        return self.base ** (np.arange(quarter) / quarter)


def embed(x, y, config: EmbeddingConfig = EmbeddingConfig()) -> np.ndarray:
    """Embed pixel coordinates; the result has shape ``broadcast(x, y) + (d,)``.

    The first ``d/2`` entries interleave ``sin(x/D_i), cos(x/D_i)``; the
    second half does the same for ``y``.
    """
    x, y = np.broadcast_arrays(np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64))
    div = config.frequencies
    half = config.dimension // 2
    out = np.empty(x.shape + (config.dimension,))
    ax = x[..., None] / div
    ay = y[..., None] / div
    out[..., 0:half:2] = np.sin(ax)
    out[..., 1:half:2] = np.cos(ax)
    out[..., half::2] = np.sin(ay)
    out[..., half + 1::2] = np.cos(ay)
    return out


def embed_image(width: int, height: int, config: EmbeddingConfig = EmbeddingConfig()) -> np.ndarray:
    """Embedding of every pixel of a ``height x width`` image, shape ``(h, w, d)``."""
    v, u = np.mgrid[0:height, 0:width]
    return embed(u, v, config)
