"""Globally-aware Bottleneck Adapter: a scaled bottleneck branch beside each MLP."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .vit import Linear


@dataclass
class GbaParams:
    down: Linear  # D -> gba_dim
    up: Linear  # gba_dim -> D
    sc: Tensor  # learnable scalar, shape (1,)

    @classmethod
    def init(cls, rng, width: int, gba_dim: int, dtype, down_std: float = 0.02) -> "GbaParams":
        # up-projection starts at zero so the adapter contributes nothing at step 0
        return cls(
            down=Linear.init(rng, width, gba_dim, dtype, std=down_std),
            up=Linear.init(rng, gba_dim, width, dtype, zero=True),
            sc=Tensor(np.ones(1, dtype)),
        )


def gba_forward(f_prime: Tensor, params: GbaParams) -> Tensor:
    """sc * up(relu(down(f'))) on the un-normalised attention output."""
    if f_prime.shape[-1] != params.down.weight.shape[0]:
        raise ShapeError(
            f"GBA expects width {params.down.weight.shape[0]}, got input {f_prime.shape}"
        )
    h = ad.relu(params.down(f_prime))
    return ad.mul(params.up(h), params.sc)


def gba_param_count(width: int, gba_dim: int) -> int:
    return width * gba_dim + gba_dim + gba_dim * width + width + 1
