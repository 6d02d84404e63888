"""Scalar divergences between Bernoulli parameters and their inverses.

All logarithms are natural, so every divergence is in nats. A Bernoulli kl
that is infinite (``q`` on the boundary, ``p`` elsewhere) is returned as
``math.inf`` instead of raising, so bound formulas can propagate it.
"""

from __future__ import annotations

import math

from scipy.special import rel_entr

from .errors import DomainError


def _check_prob(name: str, value: float) -> float:
    value = float(value)
    if not 0.0 <= value <= 1.0 or math.isnan(value):
        raise DomainError(f"{name} must lie in [0, 1], got {value!r}")
    return value


def kl_bernoulli(p: float, q: float) -> float:
    """kl(p, q) between Bernoulli(p) and Bernoulli(q), with 0 ln 0 = 0.

    Returns ``math.inf`` when ``q`` is 0 or 1 and ``p`` differs from it.
    """
    p = _check_prob("p", p)
    q = _check_prob("q", q)
    value = float(rel_entr(p, q) + rel_entr(1.0 - p, 1.0 - q))
    # rounding can leave a tiny negative value when p == q
    return max(value, 0.0)


def _kl_interior(p: float, q: float) -> float:
    """kl(p, q) for validated p and 0 < q < 1; the bisection's inner loop."""
    value = 0.0
    if p > 0.0:
        value += p * math.log(p / q)
    if p < 1.0:
        value += (1.0 - p) * math.log((1.0 - p) / (1.0 - q))
    return max(value, 0.0)


def kl_bernoulli_inv_upper(p: float, c: float, tol: float = 1e-10, max_iter: int = 200) -> float:
    """Largest q in [p, 1] with kl(p, q) <= c, found by bisection.

    The returned point always satisfies the constraint; iteration stops once
    the bracket is narrower than ``tol`` and the kl value is within ``tol`` of
    ``c``, or after ``max_iter`` halvings.
    """
    p = _check_prob("p", p)
    c = float(c)
    if c < 0 or math.isnan(c):
        raise DomainError(f"budget c must be nonnegative, got {c!r}")
    if tol <= 0:
        raise DomainError(f"tol must be positive, got {tol!r}")
    if c == 0.0 or p == 1.0:
        return p
    if math.isinf(c):
        return 1.0
    lo, hi = p, 1.0
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        if _kl_interior(p, mid) <= c:
            lo = mid
        else:
            hi = mid
        if hi - lo <= tol and c - _kl_interior(p, lo) <= tol:
            break
    return lo


def d_gamma(a: float, b: float, gamma: float) -> float:
    """gamma * a - ln(1 - b + b e^gamma); may be negative, identically 0 at gamma = 0."""
    a = _check_prob("a", a)
    b = _check_prob("b", b)
    gamma = float(gamma)
    return gamma * a - math.log1p(b * math.expm1(gamma))


def d_gamma_invert(a: float, C: float, lam: float) -> float:
    """Upper bound on b implied by D_{-1/lam}(a || b) < C, for lam > 1/2.

    Returns ``(a + lam * C) / (1 - 1 / (2 lam))``.
    """
    lam = float(lam)
    if not lam > 0.5:
        raise DomainError(f"lambda must exceed 0.5, got {lam!r}")
    return (float(a) + lam * float(C)) / (1.0 - 1.0 / (2.0 * lam))


def combine_squares(n: float, m: float, budget: float) -> float:
    """Gap bound sqrt((n + m) / (n m) * B) implied by n(a-b)^2 + m(b-c)^2 <= B.

    ``n`` and ``m`` are integers in the common case, but any positive weights
    work, which the k-th root variants rely on.
    """
    n, m, budget = float(n), float(m), float(budget)
    if not (n > 0 and m > 0):
        raise DomainError(f"weights must be positive, got n={n!r}, m={m!r}")
    if budget < 0:
        raise DomainError(f"budget must be nonnegative, got {budget!r}")
    return math.sqrt((n + m) / (n * m) * budget)
