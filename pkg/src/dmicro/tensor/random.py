"""Reparameterised Gaussian sampling."""

from __future__ import annotations

import numpy as np

from .core import Tensor
from .ops import add, mul


def standard_normal(rng, shape, dtype) -> np.ndarray:
    return np.asarray(rng.standard_normal(size=shape, dtype=dtype), dtype=dtype)


def reparam_normal(mean: Tensor, std: Tensor, rng=None, z: np.ndarray | None = None) -> Tensor:
    """Return ``mean + std * z`` with ``z ~ N(0, 1)`` held constant.

    The draw is taken from ``rng`` (anything with a numpy-style
    ``standard_normal(size, dtype)``) unless ``z`` is given explicitly, which
    is how finite-difference checks freeze the noise.
    """
    if mean.shape != std.shape:
        raise ValueError(f"reparam_normal: mean {mean.shape} and std {std.shape} differ")
    if np.any(std.data < 0):
        raise ValueError("reparam_normal: negative standard deviation")
    if z is None:
        if rng is None:
            raise ValueError("reparam_normal needs an rng or an explicit draw")
        z = standard_normal(rng, mean.shape, mean.dtype)
    return add(mean, mul(std, Tensor(np.asarray(z, dtype=mean.dtype))))
