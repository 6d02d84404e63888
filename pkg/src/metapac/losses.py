"""Bounded losses on prediction residuals.

Both losses act on the residual vector r = prediction - target (last axis)
and take values in [0, 1].
"""

from __future__ import annotations

import numpy as np

from .errors import DomainError

LOSSES = ("exp-square", "clipped-square")


def check_loss(name: str) -> str:
    if name not in LOSSES:
        raise DomainError(f"unknown loss {name!r}; choose from {', '.join(LOSSES)}")
    return name


def loss_value(name: str, resid: np.ndarray) -> np.ndarray:
    """Loss per sample, reducing the last axis."""
    sq = np.sum(np.square(resid), axis=-1)
    if name == "exp-square":
        return -np.expm1(-sq)
    if name == "clipped-square":
        return np.minimum(sq, 1.0)
    raise DomainError(f"unknown loss {name!r}")


def loss_grad(name: str, resid: np.ndarray) -> np.ndarray:
    """Gradient of ``loss_value`` with respect to the residual.

    The clipped loss uses the zero subgradient wherever it is clipped.
    """
    sq = np.sum(np.square(resid), axis=-1, keepdims=True)
    if name == "exp-square":
        return 2.0 * resid * np.exp(-sq)
    if name == "clipped-square":
        return np.where(sq < 1.0, 2.0 * resid, 0.0)
    raise DomainError(f"unknown loss {name!r}")
