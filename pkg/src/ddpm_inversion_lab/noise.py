"""Counter-based noise source.

Every Gaussian draw is addressed by ``(seed, stream, index)`` and produced by
a Philox generator keyed on that triple, so any piece of a trajectory can be
regenerated without replaying the draws that came before it.
"""

from __future__ import annotations

from enum import IntEnum

import numpy as np

_MASK64 = (1 << 64) - 1


class Stream(IntEnum):
    """Independent noise streams. The index is a timestep unless noted."""

    FORWARD = 0  # ε̃_t used to noise x0 to timestep t (inversion, DDS, on-the-fly)
    LATENT = 1  # initial x_{t_K} for generation
    STEP = 2  # fresh z injected by ancestral steps, index = source timestep
    ENTRY = 3  # SDEdit entry noise
    DATA = 4  # toy data draws; index is a sample counter
    PARAMS = 5  # denoiser parameter draws; index is a timestep or condition slot


def generator(seed: int, stream: int, index: int = 0) -> np.random.Generator:
    if seed < 0 or index < 0:
        raise ValueError("seed and index must be non-negative")
    key = ((int(seed) & _MASK64) << 64) | ((int(stream) & 0xFFFFFFFF) << 32) | (int(index) & 0xFFFFFFFF)
    return np.random.Generator(np.random.Philox(key=key))


def gaussian(seed: int, stream: int, index: int, shape: int | tuple[int, ...]) -> np.ndarray:
    """Standard normal array for the addressed draw."""
    return generator(seed, stream, index).standard_normal(shape)


def forward_noise_draw(seed: int, t: int, dim: int) -> np.ndarray:
    """The ε̃_t shared by every consumer that noises a clean sample to ``t``."""
    return gaussian(seed, Stream.FORWARD, t, dim)
