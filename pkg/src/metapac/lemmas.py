"""Numerical verification of the concentration lemmas behind the bounds.

Each ``verify_*`` function estimates the left side of an inequality and
compares it with the certified right side. Finite-support distributions are
handled by exact enumeration over the binomial outcomes; continuous ones by
Monte-Carlo over independent counter-based streams, so a verdict is a pure
function of ``(seed, trials, dist)``.

``log_moment_constant`` returns the closed-form constants that the bound
evaluators plug into their log terms.
"""

from __future__ import annotations

import enum
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, NamedTuple

import numpy as np
from scipy import stats
from scipy.special import logsumexp, rel_entr

from .divergences import d_gamma
from .errors import DomainError
from .rng import rng_stream

SIGMA_UNIT = 0.5  # sub-Gaussian parameter of a [0, 1]-valued variable
EXACT_TOL = 1e-10
MC_REL_TOL = 0.01
MC_SDS = 3.0

# stream ids keep the lemmas' Monte-Carlo draws independent of each other
_STREAM_IDS = {"subgauss-full": 11, "subgauss-sqrt": 12, "maurer": 13, "dgamma": 14, "union-sum": 15, "donsker-varadhan": 16}


@dataclass(frozen=True)
class Dist:
    """Distribution of a [0, 1]-valued loss draw.

    ``kind`` is ``"uniform"``, ``"bernoulli"`` (parameter ``p``) or
    ``"beta"`` (parameters ``a``, ``b``).
    """

    kind: str = "uniform"
    p: float = 0.5
    a: float = 1.0
    b: float = 1.0

    def __post_init__(self):
        if self.kind not in ("uniform", "bernoulli", "beta"):
            raise DomainError(f"unknown distribution kind {self.kind!r}")
        if self.kind == "bernoulli" and not 0.0 <= self.p <= 1.0:
            raise DomainError(f"bernoulli p must lie in [0, 1], got {self.p!r}")
        if self.kind == "beta" and not (self.a > 0 and self.b > 0):
            raise DomainError("beta parameters must be positive")

    @classmethod
    def parse(cls, text: str) -> "Dist":
        """Parse ``uniform``, ``bernoulli:P`` or ``beta:A,B``."""
        kind, _, rest = text.strip().partition(":")
        try:
            if kind == "uniform" and not rest:
                return cls("uniform")
            if kind == "bernoulli":
                return cls("bernoulli", p=float(rest))
            if kind == "beta":
                a, b = (float(v) for v in rest.split(","))
                return cls("beta", a=a, b=b)
        except ValueError as exc:
            raise DomainError(f"cannot parse distribution {text!r}") from exc
        raise DomainError(f"cannot parse distribution {text!r}")

    def __str__(self) -> str:
        if self.kind == "bernoulli":
            return f"bernoulli:{self.p:g}"
        if self.kind == "beta":
            return f"beta:{self.a:g},{self.b:g}"
        return "uniform"

    @property
    def mean(self) -> float:
        if self.kind == "bernoulli":
            return self.p
        if self.kind == "beta":
            return self.a / (self.a + self.b)
        return 0.5

    @property
    def finite_support(self) -> bool:
        return self.kind == "bernoulli"

    def draw(self, rng: np.random.Generator, shape) -> np.ndarray:
        if self.kind == "bernoulli":
            return (rng.random(shape) < self.p).astype(float)
        if self.kind == "beta":
            return rng.beta(self.a, self.b, shape)
        return rng.random(shape)

    def ppf(self, q: float) -> float:
        if self.kind == "bernoulli":
            raise DomainError("quantile calibration needs a continuous distribution")
        if self.kind == "beta":
            return float(stats.beta.ppf(q, self.a, self.b))
        return float(q)


@dataclass(frozen=True)
class TrialConfig:
    """Monte-Carlo settings.

    ``inner`` is the sample size m (or n) inside each trial. Set ``exact`` to
    False to force Monte-Carlo even for finite-support distributions.
    """

    trials: int = 100_000
    seed: int = 0
    inner: int = 10
    dist: Dist = field(default_factory=Dist)
    chunk: int = 20_000
    exact: bool = True

    def __post_init__(self):
        if self.trials < 1:
            raise DomainError(f"trials must be positive, got {self.trials}")
        if self.inner < 1:
            raise DomainError(f"inner sample size must be positive, got {self.inner}")
        if self.chunk < 1:
            raise DomainError("chunk must be positive")


@dataclass(frozen=True)
class LemmaVerdict:
    lemma: str
    empirical: float
    certified: float
    slack_sds: float
    passed: bool
    exact: bool
    trials: int

    def as_dict(self) -> dict:
        return asdict(self)


class DVResult(NamedTuple):
    lhs: float
    rhs: float
    gibbs_gap: float


class LogMomentLemma(str, enum.Enum):
    SUBGAUSS_SQ_1 = "SubGaussSq1"
    SUBGAUSS_SQ_HALF = "SubGaussSqHalf"
    MAURER_2_SQRT_N = "Maurer2SqrtN"
    DGAMMA_ONE = "DGammaOne"


@dataclass(frozen=True)
class LogMomentBound:
    """Certified upper bound on an exponential moment, tagged with its lemma."""

    value: float
    lemma: LogMomentLemma

    def __post_init__(self):
        if not self.value > 0:
            raise DomainError("log-moment bound must be positive")


def _check_subgauss_lambda(lam: float, sigma: float) -> None:
    if sigma <= 0:
        raise DomainError(f"sigma must be positive, got {sigma!r}")
    if lam < 0 or not lam < 1.0 / (2.0 * sigma**2):
        raise DomainError(f"lambda must lie in [0, 1/(2 sigma^2)) = [0, {1 / (2 * sigma**2):g}), got {lam!r}")


def _check_maurer_n(n: int) -> None:
    if not n > 8:
        raise DomainError(f"the 2 sqrt(n) moment bound needs n > 8, got {n}")


def log_moment_constant(lemma: str | LogMomentLemma, **params) -> LogMomentBound:
    """Closed-form constant certified by a lemma.

    Parameters by lemma: ``SubGaussSq1`` and ``SubGaussSqHalf`` take ``lam``
    and optional ``sigma`` (default 0.5); ``Maurer2SqrtN`` takes ``n``;
    ``DGammaOne`` takes nothing.
    """
    lemma = LogMomentLemma(lemma)
    if lemma in (LogMomentLemma.SUBGAUSS_SQ_1, LogMomentLemma.SUBGAUSS_SQ_HALF):
        lam = float(params["lam"])
        sigma = float(params.get("sigma", SIGMA_UNIT))
        _check_subgauss_lambda(lam, sigma)
        base = 1.0 - 2.0 * lam * sigma**2
        value = 1.0 / base if lemma is LogMomentLemma.SUBGAUSS_SQ_1 else 1.0 / math.sqrt(base)
        return LogMomentBound(value, lemma)
    if lemma is LogMomentLemma.MAURER_2_SQRT_N:
        n = int(params["n"])
        _check_maurer_n(n)
        return LogMomentBound(2.0 * math.sqrt(n), lemma)
    return LogMomentBound(1.0, lemma)


def _verdict(lemma: str, empirical: float, certified: float, sd: float | None, trials: int) -> LemmaVerdict:
    if sd is None:
        passed = empirical <= certified + EXACT_TOL
        slack = math.inf if passed else -math.inf
        return LemmaVerdict(lemma, empirical, certified, slack, passed, True, trials)
    passed = empirical <= max(certified * (1.0 + MC_REL_TOL), certified + MC_SDS * sd)
    headroom = certified - empirical
    if sd > 0:
        slack = headroom / sd
    else:
        slack = math.inf if headroom >= 0 else -math.inf
    return LemmaVerdict(lemma, empirical, certified, slack, passed, False, trials)


def _mc_mean(cfg: TrialConfig, lemma: str, inner: int, stat: Callable[[np.ndarray], np.ndarray]):
    """Mean and standard error of ``stat`` over ``cfg.trials`` draws of shape (inner,)."""
    values = []
    done = 0
    chunk_id = 0
    while done < cfg.trials:
        rows = min(cfg.chunk, cfg.trials - done)
        rng = rng_stream(cfg.seed, _STREAM_IDS[lemma], chunk_id)
        values.append(stat(cfg.dist.draw(rng, (rows, inner))))
        done += rows
        chunk_id += 1
    allv = np.concatenate(values)
    sd = float(allv.std(ddof=1) / math.sqrt(allv.size)) if allv.size > 1 else 0.0
    return float(allv.mean()), sd


def _binomial_expectation(n: int, p: float, fn: Callable[[np.ndarray], np.ndarray]) -> float:
    k = np.arange(n + 1)
    pmf = stats.binom.pmf(k, n, p)
    return float(np.sum(pmf * fn(k / n)))


def verify_subgauss_sq(cfg: TrialConfig, lam: float, variant: str = "full") -> LemmaVerdict:
    """Check E[exp(lam m D^2)] against 1/(1 - 2 lam s^2) or its square root.

    D is the gap between the mean and the empirical mean of m = ``cfg.inner``
    draws, and s = 0.5 is the sub-Gaussian parameter of a [0, 1] variable.
    """
    if variant not in ("full", "sqrt"):
        raise DomainError(f"variant must be 'full' or 'sqrt', got {variant!r}")
    lemma = LogMomentLemma.SUBGAUSS_SQ_1 if variant == "full" else LogMomentLemma.SUBGAUSS_SQ_HALF
    certified = log_moment_constant(lemma, lam=lam).value
    m = cfg.inner
    mu = cfg.dist.mean
    name = f"subgauss-{variant}"
    if cfg.exact and cfg.dist.finite_support:
        emp = _binomial_expectation(m, cfg.dist.p, lambda f: np.exp(lam * m * (mu - f) ** 2))
        return _verdict(name, emp, certified, None, cfg.trials)

    def stat(x):
        return np.exp(lam * m * (mu - x.mean(axis=1)) ** 2)

    emp, sd = _mc_mean(cfg, name, m, stat)
    return _verdict(name, emp, certified, sd, cfg.trials)


def _kl_vec(f: np.ndarray, p: float) -> np.ndarray:
    return rel_entr(f, p) + rel_entr(1.0 - f, 1.0 - p)


def verify_maurer(cfg: TrialConfig, n: int | None = None) -> LemmaVerdict:
    """Check E[exp(n kl(empirical mean || mean))] <= 2 sqrt(n) for n > 8."""
    n = cfg.inner if n is None else int(n)
    certified = log_moment_constant(LogMomentLemma.MAURER_2_SQRT_N, n=n).value
    mu = cfg.dist.mean
    if not 0.0 < mu < 1.0:
        raise DomainError("the mean loss must be interior so every kl term is finite")
    if cfg.exact and cfg.dist.finite_support:
        emp = _binomial_expectation(n, mu, lambda f: np.exp(n * _kl_vec(f, mu)))
        return _verdict("maurer", emp, certified, None, cfg.trials)
    emp, sd = _mc_mean(cfg, "maurer", n, lambda x: np.exp(n * _kl_vec(x.mean(axis=1), mu)))
    return _verdict("maurer", emp, certified, sd, cfg.trials)


def _d_gamma_vec(a: np.ndarray, b: float, gamma: float) -> np.ndarray:
    return gamma * a - math.log1p(b * math.expm1(gamma))


def verify_dgamma(cfg: TrialConfig, n: int | None = None, gamma: float = -1.0) -> LemmaVerdict:
    """Check E[exp(n D_gamma(empirical mean || mean))] <= 1."""
    n = cfg.inner if n is None else int(n)
    if n < 1:
        raise DomainError("n must be positive")
    gamma = float(gamma)
    mu = cfg.dist.mean
    d_gamma(0.0, mu, gamma)  # validates the arguments
    if cfg.exact and cfg.dist.finite_support:
        emp = _binomial_expectation(n, mu, lambda f: np.exp(n * _d_gamma_vec(f, mu, gamma)))
        return _verdict("dgamma", emp, 1.0, None, cfg.trials)
    emp, sd = _mc_mean(cfg, "dgamma", n, lambda x: np.exp(n * _d_gamma_vec(x.mean(axis=1), mu, gamma)))
    return _verdict("dgamma", emp, 1.0, sd, cfg.trials)


def _as_distribution(name: str, x) -> np.ndarray:
    arr = np.asarray(x, dtype=float).reshape(-1)
    if arr.size == 0 or np.any(arr < 0) or not np.all(np.isfinite(arr)):
        raise DomainError(f"{name} must be a finite nonnegative vector")
    total = arr.sum()
    if abs(total - 1.0) > 1e-9:
        raise DomainError(f"{name} must sum to 1, sums to {total!r}")
    return arr


def verify_donsker_varadhan(P, Q, phi) -> DVResult:
    """Evaluate both sides of E_Q[phi] <= KL(Q || P) + ln E_P[exp(phi)].

    ``gibbs_gap`` is the difference of the two sides when Q is replaced by the
    Gibbs measure proportional to P exp(phi), where equality holds.
    """
    P = _as_distribution("P", P)
    Q = _as_distribution("Q", Q)
    phi = np.asarray(phi, dtype=float).reshape(-1)
    if not (P.size == Q.size == phi.size):
        raise DomainError("P, Q and phi must share one support")
    if np.any((Q > 0) & (P <= 0)):
        raise DomainError("Q must be absolutely continuous with respect to P")
    support = P > 0
    log_mgf = float(logsumexp(phi[support], b=P[support]))
    lhs = float(Q @ phi)
    rhs = float(np.sum(rel_entr(Q, P))) + log_mgf
    log_gibbs = np.full(P.size, -np.inf)
    log_gibbs[support] = np.log(P[support]) + phi[support] - log_mgf
    gibbs = np.exp(log_gibbs)
    # KL(Q*||P) = E_Q*[phi] - log_mgf exactly, so compare the two sides numerically
    kl_gibbs = float(np.sum(gibbs[support] * (log_gibbs[support] - np.log(P[support]))))
    gap = kl_gibbs + log_mgf - float(gibbs @ phi)
    return DVResult(lhs, rhs, abs(gap))


def verify_union_sum(cfg: TrialConfig, per_event_deltas) -> LemmaVerdict:
    """Check P[sum f_i >= sum a_i] <= sum delta_i for independent events.

    Each f_i is an independent draw from ``cfg.dist`` and a_i its
    (1 - delta_i)-quantile, so P[f_i >= a_i] = delta_i.
    """
    deltas = np.asarray(per_event_deltas, dtype=float).reshape(-1)
    if deltas.size == 0 or np.any(deltas < 0) or np.any(deltas >= 1):
        raise DomainError("each delta_i must lie in [0, 1)")
    thresholds = np.array([cfg.dist.ppf(1.0 - d) for d in deltas])
    total = float(thresholds.sum())
    certified = float(deltas.sum())

    def stat(x):
        return (x.sum(axis=1) >= total).astype(float)

    emp, sd = _mc_mean(cfg, "union-sum", deltas.size, stat)
    return _verdict("union-sum", emp, certified, sd, cfg.trials)


def verify_dv_random(seed: int = 0, cases: int = 10_000, support: int = 8) -> LemmaVerdict:
    """Run the change-of-measure check on random finite cases.

    The verdict's empirical value is the largest Gibbs-measure gap and the
    certified value the exact-path tolerance; a case whose left side exceeds
    the right side by more than that tolerance fails the verdict outright.
    """
    if cases < 1 or support < 1:
        raise DomainError("cases and support must be positive")
    rng = rng_stream(seed, _STREAM_IDS["donsker-varadhan"])
    worst_gap = 0.0
    ordered = True
    for _ in range(cases):
        P = rng.dirichlet(np.ones(support))
        Q = rng.dirichlet(np.ones(support))
        phi = rng.normal(scale=3.0, size=support)
        r = verify_donsker_varadhan(P, Q, phi)
        worst_gap = max(worst_gap, r.gibbs_gap)
        ordered &= r.lhs <= r.rhs + EXACT_TOL
    return LemmaVerdict("donsker-varadhan", worst_gap, EXACT_TOL, math.inf if ordered else -math.inf,
                        bool(ordered and worst_gap <= EXACT_TOL), True, cases)
