"""Gaussian priors and posteriors with closed-form KL divergences.

Two families are used. ``DiagGaussian`` is a diagonal Gaussian over model
weights, parameterized by per-coordinate log-variance so gradient descent is
unconstrained. ``IsotropicGaussian`` is a spherical Gaussian over the
hyperparameter vector.

Each KL comes in two readings selected by ``KlMode``. ``STANDARD`` is the
textbook Gaussian KL and is the default everywhere since bounds need a true
divergence. ``PAPER_VERBATIM`` reproduces an alternative printed form that
drops the dimension factor (isotropic case) and wraps the quadratic term in a
logarithm (diagonal case); it is kept for regression comparison only and can
be negative.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .errors import DomainError


class KlMode(enum.Enum):
    STANDARD = "standard"
    PAPER_VERBATIM = "verbatim"


def _as_vector(name: str, x) -> np.ndarray:
    arr = np.array(x, dtype=float).reshape(-1)
    if arr.size == 0:
        raise DomainError(f"{name} must have at least one entry")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class DiagGaussian:
    """N(mean, diag(exp(log_var)))."""

    mean: np.ndarray
    log_var: np.ndarray

    def __post_init__(self):
        mean = _as_vector("mean", self.mean)
        log_var = _as_vector("log_var", self.log_var)
        if mean.shape != log_var.shape:
            raise DomainError(f"mean and log_var lengths differ: {mean.size} vs {log_var.size}")
        if not np.all(np.isfinite(log_var)):
            raise DomainError("log_var must be finite")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "log_var", log_var)

    @property
    def dim(self) -> int:
        return self.mean.size

    @property
    def var(self) -> np.ndarray:
        return np.exp(self.log_var)

    @property
    def std(self) -> np.ndarray:
        return np.exp(0.5 * self.log_var)


@dataclass(frozen=True, eq=False)
class IsotropicGaussian:
    """N(mean, var * I)."""

    mean: np.ndarray
    var: float

    def __post_init__(self):
        mean = _as_vector("mean", self.mean)
        var = float(self.var)
        if not (var > 0 and math.isfinite(var)):
            raise DomainError(f"var must be positive and finite, got {var!r}")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "var", var)

    @property
    def dim(self) -> int:
        return self.mean.size

    @property
    def std(self) -> float:
        return math.sqrt(self.var)


def _check_dims(q, p) -> None:
    if q.dim != p.dim:
        raise DomainError(f"dimension mismatch: {q.dim} vs {p.dim}")


def kl_hyper(q: IsotropicGaussian, p: IsotropicGaussian, mode: KlMode = KlMode.STANDARD) -> float:
    """KL(q || p) between isotropic Gaussians.

    In verbatim mode ``p`` must be centred and the result is
    ``(|theta|^2 + s2) / (2 p2) + ln(p2 / s2) - 1/2`` with no dimension factor.
    """
    _check_dims(q, p)
    if mode is KlMode.PAPER_VERBATIM:
        if np.any(p.mean != 0):
            raise DomainError("verbatim hyper KL requires a zero-mean reference measure")
        sq = float(q.mean @ q.mean)
        return (sq + q.var) / (2 * p.var) + math.log(p.var / q.var) - 0.5
    diff = q.mean - p.mean
    ratio = q.var / p.var
    d = q.dim
    value = 0.5 * (d * (ratio - 1.0 - math.log(ratio)) + float(diff @ diff) / p.var)
    return max(value, 0.0)


def kl_hyper_grad_mean(q: IsotropicGaussian, p: IsotropicGaussian) -> np.ndarray:
    """Gradient of ``kl_hyper`` with respect to ``q.mean`` (identical in both modes)."""
    _check_dims(q, p)
    return (q.mean - p.mean) / p.var


def kl_diag(q: DiagGaussian, p: DiagGaussian, mode: KlMode = KlMode.STANDARD) -> float:
    """KL(q || p) between diagonal Gaussians, summed over coordinates."""
    _check_dims(q, p)
    sq = (q.mean - p.mean) ** 2
    if mode is KlMode.PAPER_VERBATIM:
        terms = (p.log_var - q.log_var) + np.log((q.var + sq) / p.var)
        return 0.5 * float(np.sum(terms))
    return float(np.sum(kl_diag_terms(q.mean, q.log_var, p.mean, p.log_var)))


def kl_diag_terms(mq, lvq, mp, lvp) -> np.ndarray:
    """Per-coordinate standard KL terms; broadcasts over leading axes."""
    vp = np.exp(lvp)
    return 0.5 * (lvp - lvq + (np.exp(lvq) + (mq - mp) ** 2) / vp - 1.0)


def kl_diag_grads(mq, lvq, mp, lvp):
    """Gradients of the standard per-coordinate KL terms.

    Returns ``(d_mean_q, d_log_var_q, d_mean_p, d_log_var_p)`` with the same
    broadcast shape as the inputs.
    """
    inv_vp = np.exp(-np.asarray(lvp, dtype=float))
    diff = np.asarray(mq, dtype=float) - mp
    vq = np.exp(lvq)
    d_mq = diff * inv_vp
    d_lvq = 0.5 * (vq * inv_vp - 1.0)
    d_mp = -d_mq
    d_lvp = 0.5 * (1.0 - (vq + diff**2) * inv_vp)
    return d_mq, d_lvq, d_mp, d_lvp


def sample(g: DiagGaussian | IsotropicGaussian, rng: np.random.Generator, size: int | None = None):
    """Draw ``mean + std * eps`` and return ``(w, eps)``.

    ``eps`` is returned so callers can push gradients through the draw. With
    ``size`` the result has a leading axis of that length.
    """
    shape = (g.dim,) if size is None else (int(size), g.dim)
    eps = rng.standard_normal(shape)
    return g.mean + g.std * eps, eps


def reparam_grads(g: DiagGaussian, eps, upstream):
    """Pull an upstream gradient at ``w = mean + std * eps`` back to (mean, log_var).

    Since dw/dlog_var = eps * std / 2, the log-variance gradient is
    ``upstream * eps * std / 2``.
    """
    eps = np.asarray(eps, dtype=float)
    upstream = np.asarray(upstream, dtype=float)
    if eps.shape[-1] != g.dim or upstream.shape != eps.shape:
        raise DomainError("eps and upstream must match the distribution's dimension")
    return upstream.copy(), upstream * eps * g.std / 2.0
