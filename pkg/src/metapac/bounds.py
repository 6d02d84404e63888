"""Meta-generalization bounds.

Every evaluator takes a ``BoundInputs`` and returns a ``BoundReport`` whose
``value`` is an upper bound on the expected meta-test loss, i.e. the training
loss plus a certified gap. ``terms`` are additive, so ``value`` always equals
their sum.

``generic_corollary_bound`` composes a bound from two convex comparison
functions (task level and environment level), the exponential-moment
constants that control them, and their affine relaxations. The named
evaluators below are closed forms for specific choices and the test suite
checks that the generic route reproduces them.

The confidence budget is split as delta/2 for the environment level and
delta/(2n) per task for the two-level bounds; the single-square bounds use
the undivided delta.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np

from .divergences import combine_squares, d_gamma, d_gamma_invert, kl_bernoulli
from .errors import DomainError
from .lemmas import LogMomentBound, LogMomentLemma, log_moment_constant

# --------------------------------------------------------------------------
# inputs and reports


@dataclass(frozen=True, eq=False)
class BoundInputs:
    """Everything a bound formula consumes.

    ``kl_env`` is KL(hyper-posterior || hyper-prior). ``kl_task[i]`` is the
    expected KL of task i's posterior from the prior it was built on. Either
    may be ``math.inf``, which propagates to an infinite bound.
    """

    n: int
    m: int
    delta: float
    train_loss: float
    kl_env: float
    kl_task: np.ndarray
    sigma: float = 0.5

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 1:
            raise DomainError(f"n must be a positive integer, got {self.n!r}")
        if int(self.m) != self.m or self.m < 1:
            raise DomainError(f"m must be a positive integer, got {self.m!r}")
        if not 0.0 < self.delta < 1.0:
            raise DomainError(f"delta must lie in (0, 1), got {self.delta!r}")
        if not 0.0 <= self.train_loss <= 1.0:
            raise DomainError(f"train_loss must lie in [0, 1], got {self.train_loss!r}")
        if math.isnan(self.kl_env) or self.kl_env < 0:
            raise DomainError(f"kl_env must be nonnegative, got {self.kl_env!r}")
        kl_task = np.array(self.kl_task, dtype=float).reshape(-1)
        if kl_task.size == 1 and self.n > 1:
            kl_task = np.full(int(self.n), kl_task[0])
        if kl_task.size != self.n:
            raise DomainError(f"kl_task has {kl_task.size} entries, expected n = {self.n}")
        if np.any(np.isnan(kl_task)) or np.any(kl_task < 0):
            raise DomainError("kl_task entries must be nonnegative")
        if not self.sigma > 0:
            raise DomainError("sigma must be positive")
        kl_task.setflags(write=False)
        object.__setattr__(self, "n", int(self.n))
        object.__setattr__(self, "m", int(self.m))
        object.__setattr__(self, "delta", float(self.delta))
        object.__setattr__(self, "train_loss", float(self.train_loss))
        object.__setattr__(self, "kl_env", float(self.kl_env))
        object.__setattr__(self, "kl_task", kl_task)

    @property
    def kl_task_mean(self) -> float:
        return float(self.kl_task.mean())

    def replace(self, **changes) -> "BoundInputs":
        if "n" in changes and "kl_task" not in changes:
            changes["kl_task"] = np.full(int(changes["n"]), self.kl_task_mean)
        return replace(self, **changes)


@dataclass(frozen=True)
class BoundReport:
    """A bound value with its additive breakdown.

    ``details`` carries auxiliary quantities such as the gap alone.
    """

    name: str
    value: float
    terms: tuple
    hyperparams: Mapping[str, float] = field(default_factory=dict)
    details: Mapping[str, float] = field(default_factory=dict)

    @property
    def gap(self) -> float:
        return self.details.get("gap", math.nan)

    def recomposed(self) -> float:
        """Sum of the additive terms; equals ``value``."""
        return math.fsum(v for _, v in self.terms)


def _report(name, terms, hyperparams=None, train=None) -> BoundReport:
    terms = tuple((label, float(v)) for label, v in terms)
    value = sum(v for _, v in terms)
    details = {}
    if train is not None:
        details["gap"] = value - train
    return BoundReport(name, value, terms, dict(hyperparams or {}), details)


# --------------------------------------------------------------------------
# convex comparison functions and their relaxations


_KINDS = ("quadratic", "linear", "kl", "dgamma")
_KL_RELAXATIONS = ("pinsker", "lambda", "quadratic")


@dataclass(frozen=True)
class ConvexSpec:
    """A comparison function F(emp, true) scaled by ``scale``, plus its inversion.

    ``kind`` selects F: ``quadratic`` is (true - emp)^2, ``linear`` is
    true - emp, ``kl`` is kl(emp, true) and ``dgamma`` is D_gamma(emp || true).
    For ``kl`` the ``relaxation`` picks how ``scale * F <= c`` is turned into
    an upper bound on ``true``: ``pinsker`` (emp + sqrt(c / 2s)), ``lambda``
    (a linear bound with parameter ``lam`` in (0, 2)) or ``quadratic``
    ((sqrt(emp + c/2s) + sqrt(c/2s))^2, not affine). For ``dgamma`` the bound
    holds for gamma in (-2, 0), i.e. lambda = -1/gamma > 1/2.
    """

    kind: str
    scale: float
    gamma: float | None = None
    relaxation: str = "pinsker"
    lam: float | None = None

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise DomainError(f"unknown comparison kind {self.kind!r}")
        if not self.scale > 0:
            raise DomainError(f"scale must be positive, got {self.scale!r}")
        if self.kind == "dgamma":
            if self.gamma is None or not -2.0 < self.gamma < 0.0:
                raise DomainError(f"dgamma inversion needs gamma in (-2, 0), got {self.gamma!r}")
        if self.kind == "kl":
            if self.relaxation not in _KL_RELAXATIONS:
                raise DomainError(f"unknown kl relaxation {self.relaxation!r}")
            if self.relaxation == "lambda" and (self.lam is None or not 0.0 < self.lam < 2.0):
                raise DomainError(f"lambda relaxation needs lam in (0, 2), got {self.lam!r}")

    @property
    def affine(self) -> bool:
        return not (self.kind == "kl" and self.relaxation == "quadratic")

    @property
    def k(self) -> float:
        """Slope of the affine relaxation true <= k * emp + G(c)."""
        if not self.affine:
            raise DomainError("the quadratic kl relaxation is not affine")
        if self.kind == "dgamma":
            lam = -1.0 / self.gamma
            return 1.0 / (1.0 - 1.0 / (2.0 * lam))
        if self.kind == "kl" and self.relaxation == "lambda":
            return 1.0 / (1.0 - 0.5 * self.lam)
        return 1.0

    def evaluate(self, emp: float, true: float) -> float:
        """scale * F(emp, true)."""
        if self.kind == "quadratic":
            return self.scale * (true - emp) ** 2
        if self.kind == "linear":
            return self.scale * (true - emp)
        if self.kind == "kl":
            return self.scale * kl_bernoulli(emp, true)
        return self.scale * d_gamma(emp, true, self.gamma)

    def upper(self, emp: float, c: float) -> float:
        """Upper bound on ``true`` implied by ``scale * F(emp, true) <= c``."""
        s = self.scale
        if math.isinf(c):
            return math.inf
        if self.kind == "quadratic":
            return emp + math.sqrt(c / s)
        if self.kind == "linear":
            return emp + c / s
        if self.kind == "dgamma":
            return d_gamma_invert(emp, c / s, -1.0 / self.gamma)
        if self.relaxation == "pinsker":
            return emp + math.sqrt(c / (2.0 * s))
        if self.relaxation == "lambda":
            lam = self.lam
            return emp / (1.0 - 0.5 * lam) + c / (s * lam * (1.0 - 0.5 * lam))
        h = c / (2.0 * s)
        return (math.sqrt(emp + h) + math.sqrt(h)) ** 2

    def upper_grad(self, emp: float, c: float) -> tuple[float, float]:
        """Partial derivatives of ``upper`` with respect to ``emp`` and ``c``."""
        s = self.scale
        if math.isinf(c):
            return math.nan, math.nan
        if self.kind == "quadratic":
            return 1.0, 0.5 / math.sqrt(c * s)
        if self.kind == "linear":
            return 1.0, 1.0 / s
        if self.kind == "dgamma":
            lam = -1.0 / self.gamma
            k = 1.0 / (1.0 - 1.0 / (2.0 * lam))
            return k, k * lam / s
        if self.relaxation == "pinsker":
            return 1.0, 0.25 / (s * math.sqrt(c / (2.0 * s)))
        if self.relaxation == "lambda":
            lam = self.lam
            return 1.0 / (1.0 - 0.5 * lam), 1.0 / (s * lam * (1.0 - 0.5 * lam))
        h = c / (2.0 * s)
        r1, r2 = math.sqrt(emp + h), math.sqrt(h)
        return (r1 + r2) / r1, (r1 + r2) * (1.0 / r1 + 1.0 / r2) / (2.0 * s)


def _lm_value(lm: LogMomentBound | float) -> float:
    return lm.value if isinstance(lm, LogMomentBound) else float(lm)


def _budgets(inp: BoundInputs, theta_tsk, theta_env, lm_task, lm_env):
    if not (theta_tsk > 0 and theta_env > 0):
        raise DomainError("theta_tsk and theta_env must be positive")
    log_env = math.log(2.0 * _lm_value(lm_env) / inp.delta)
    log_tsk = math.log(2.0 * inp.n * _lm_value(lm_task) / inp.delta)
    b_env = (inp.kl_env + log_env) / theta_env
    b_tsk = (inp.kl_env + inp.kl_task + log_tsk) / theta_tsk
    return b_env, b_tsk


def generic_corollary_bound(
    inp: BoundInputs,
    f_task: ConvexSpec,
    f_env: ConvexSpec,
    theta_tsk: float,
    theta_env: float,
    lm_task: LogMomentBound | float,
    lm_env: LogMomentBound | float,
    name: str = "generic",
    hyperparams: Mapping[str, float] | None = None,
) -> BoundReport:
    """Two-level bound from convex comparison functions.

    With B_env = (kl_env + ln(2 lm_env / delta)) / theta_env and
    B_i = (kl_env + kl_task[i] + ln(2 n lm_task / delta)) / theta_tsk the
    value is ``f_env.upper(mean_i f_task.upper(train, B_i), B_env)``. When
    both relaxations are affine this is
    ``k_e k_t train + G_e(B_env) + (k_e / n) sum_i G_t(B_i)``.
    """
    if not f_env.affine:
        raise DomainError("the environment-level relaxation must be affine")
    b_env, b_tsk = _budgets(inp, theta_tsk, theta_env, lm_task, lm_env)
    train = inp.train_loss
    task_level = float(np.mean([f_task.upper(train, c) for c in b_tsk]))
    env_complexity = f_env.upper(0.0, b_env)
    k_e = f_env.k
    if f_task.affine:
        scaled_train = k_e * f_task.k * train
    else:
        scaled_train = k_e * train
    task_complexity = k_e * task_level - scaled_train
    terms = [("scaled_train", scaled_train), ("task_complexity", task_complexity), ("env_complexity", env_complexity)]
    return _report(name, terms, hyperparams, train=train)


def generic_corollary_grad(inp, f_task, f_env, theta_tsk, theta_env, lm_task, lm_env):
    """Gradient of the generic bound with respect to (train, kl_env, kl_task)."""
    b_env, b_tsk = _budgets(inp, theta_tsk, theta_env, lm_task, lm_env)
    train = inp.train_loss
    task_level = float(np.mean([f_task.upper(train, c) for c in b_tsk]))
    e_emp, e_c = f_env.upper_grad(task_level, b_env)
    t = np.array([f_task.upper_grad(train, c) for c in b_tsk])
    t_emp, t_c = t[:, 0], t[:, 1]
    n = inp.n
    d_train = e_emp * float(t_emp.mean())
    d_kl_env = e_emp * float(t_c.mean()) / theta_tsk + e_c / theta_env
    d_kl_task = e_emp * t_c / (n * theta_tsk)
    return d_train, d_kl_env, d_kl_task


# --------------------------------------------------------------------------
# specializations expressed through the generic route


def _require(cond: bool, message: str) -> None:
    if not cond:
        raise DomainError(message)


def specialization(name: str, inp: BoundInputs, **hp) -> dict:
    """Arguments of ``generic_corollary_bound`` that reproduce a named bound.

    Supported names: ``mlap``, ``pacoh`` (normalized task term), ``lambda-liu``,
    ``mys-classic``, ``mys-quadratic``, ``mys-lambda`` and ``fast-rate``.
    """
    n, m = inp.n, inp.m
    sg = LogMomentLemma.SUBGAUSS_SQ_1
    if name == "mlap":
        _require(n >= 2 and m >= 2, "mlap needs n >= 2 and m >= 2")
        return dict(
            f_task=ConvexSpec("quadratic", 2.0 * (m - 1)),
            f_env=ConvexSpec("quadratic", 2.0 * (n - 1)),
            theta_tsk=1.0,
            theta_env=1.0,
            lm_task=log_moment_constant(sg, lam=2.0 * (m - 1) / m),
            lm_env=log_moment_constant(sg, lam=2.0 * (n - 1) / n),
        )
    if name == "pacoh":
        lam, beta = float(hp["lam"]), float(hp["beta"])
        # Hoeffding moment bounds for linear comparison functions
        return dict(
            f_task=ConvexSpec("linear", 1.0),
            f_env=ConvexSpec("linear", 1.0),
            theta_tsk=beta,
            theta_env=lam,
            lm_task=math.exp(beta**2 / (8.0 * m)),
            lm_env=math.exp(lam**2 / (8.0 * n)),
        )
    if name == "lambda-liu":
        lam = float(hp["lam"])
        _require(0.0 < lam < 2.0, f"lambda must lie in (0, 2), got {lam!r}")
        _require(n >= 2, "lambda-liu needs n >= 2")
        return dict(
            f_task=ConvexSpec("kl", float(m), relaxation="lambda", lam=lam),
            f_env=ConvexSpec("quadratic", 2.0 * (n - 1)),
            theta_tsk=1.0,
            theta_env=1.0,
            lm_task=log_moment_constant(LogMomentLemma.MAURER_2_SQRT_N, n=m),
            lm_env=log_moment_constant(sg, lam=2.0 * (n - 1) / n),
        )
    if name in ("mys-classic", "mys-quadratic", "mys-lambda"):
        if name == "mys-classic":
            f_task = ConvexSpec("kl", float(m))
        elif name == "mys-quadratic":
            f_task = ConvexSpec("kl", float(m), relaxation="quadratic")
        else:
            lam = float(hp["lam"])
            _require(0.0 < lam < 2.0, f"lambda must lie in (0, 2), got {lam!r}")
            f_task = ConvexSpec("kl", float(m), relaxation="lambda", lam=lam)
        return dict(
            f_task=f_task,
            f_env=ConvexSpec("kl", float(n)),
            theta_tsk=1.0,
            theta_env=1.0,
            lm_task=log_moment_constant(LogMomentLemma.MAURER_2_SQRT_N, n=m),
            lm_env=log_moment_constant(LogMomentLemma.MAURER_2_SQRT_N, n=n),
        )
    if name == "fast-rate":
        lam_e, lam_t = float(hp["lam_e"]), float(hp["lam_t"])
        _require(lam_e > 0.5 and lam_t > 0.5, "fast-rate needs lam_e, lam_t > 0.5")
        one = log_moment_constant(LogMomentLemma.DGAMMA_ONE)
        return dict(
            f_task=ConvexSpec("dgamma", float(m), gamma=-1.0 / lam_t),
            f_env=ConvexSpec("dgamma", float(n), gamma=-1.0 / lam_e),
            theta_tsk=1.0,
            theta_env=1.0,
            lm_task=one,
            lm_env=one,
        )
    raise DomainError(f"no generic specialization for {name!r}")


# --------------------------------------------------------------------------
# closed-form evaluators


def bound_mlap(inp: BoundInputs) -> BoundReport:
    n, m, d = inp.n, inp.m, inp.delta
    _require(n >= 2 and m >= 2, "mlap needs n >= 2 and m >= 2")
    env = math.sqrt((inp.kl_env + math.log(2 * n / d)) / (2 * (n - 1)))
    task = float(np.mean(np.sqrt((inp.kl_env + inp.kl_task + math.log(2 * n * m / d)) / (2 * (m - 1)))))
    return _report("mlap", [("train", inp.train_loss), ("task_complexity", task), ("env_complexity", env)],
                   train=inp.train_loss)


def bound_pacoh(inp: BoundInputs, lam: float, beta: float, normalized: bool = False) -> BoundReport:
    """PACOH-style linear bound.

    By default the task KLs are summed without the 1/n factor; ``normalized``
    averages them instead.
    """
    _require(lam > 0 and beta > 0, "pacoh needs lam > 0 and beta > 0")
    n, m = inp.n, inp.m
    kl_sum = float(inp.kl_task.mean()) if normalized else float(inp.kl_task.sum())
    terms = [
        ("train", inp.train_loss),
        ("moment", lam / (8 * n) + lam / (8 * m)),
        ("confidence", -math.log(inp.delta) / math.sqrt(n)),
        ("task_kl", kl_sum / beta),
        ("env_kl", (1 / beta + 1 / lam) * inp.kl_env),
    ]
    name = "pacoh-normalized" if normalized else "pacoh"
    return _report(name, terms, {"lam": lam, "beta": beta}, train=inp.train_loss)


def bound_lambda_liu(inp: BoundInputs, lam: float) -> BoundReport:
    _require(0.0 < lam < 2.0, f"lambda must lie in (0, 2), got {lam!r}")
    n, m, d = inp.n, inp.m, inp.delta
    _require(n >= 2, "lambda-liu needs n >= 2")
    c = 1.0 - 0.5 * lam
    env = math.sqrt((inp.kl_env + math.log(2 * n / d)) / (2 * (n - 1)))
    task = float(np.mean((inp.kl_env + inp.kl_task + math.log(4 * n * math.sqrt(m) / d)) / (m * lam * c)))
    terms = [("scaled_train", inp.train_loss / c), ("task_complexity", task), ("env_complexity", env)]
    return _report("lambda-liu", terms, {"lam": lam}, train=inp.train_loss)


def bound_mys(inp: BoundInputs, variant: str = "classic", lam: float | None = None) -> BoundReport:
    """kl-based two-level bound in its classic, quadratic or lambda form.

    Both levels use the 2 sqrt(.) moment constant, which needs n > 8 and m > 8.
    """
    if variant not in ("classic", "quadratic", "lambda"):
        raise DomainError(f"unknown variant {variant!r}")
    n, m, d = inp.n, inp.m, inp.delta
    _require(n > 8 and m > 8, "the kl moment constant needs n > 8 and m > 8")
    env = math.sqrt((inp.kl_env + math.log(4 * math.sqrt(n) / d)) / (2 * n))
    c = (inp.kl_env + inp.kl_task + math.log(4 * n * math.sqrt(m) / d)) / m
    a = inp.train_loss
    hp = {}
    if variant == "classic":
        scaled, task = a, float(np.mean(np.sqrt(c / 2)))
    elif variant == "quadratic":
        scaled = a
        task = float(np.mean((np.sqrt(a + c / 2) + np.sqrt(c / 2)) ** 2)) - a
    else:
        _require(lam is not None and 0.0 < lam < 2.0, f"lambda must lie in (0, 2), got {lam!r}")
        k = 1.0 / (1.0 - 0.5 * lam)
        scaled, task = k * a, float(np.mean(c * k / lam))
        hp = {"lam": lam}
    terms = [("scaled_train", scaled), ("task_complexity", task), ("env_complexity", env)]
    return _report(f"mys-{variant}", terms, hp, train=a)


def bound_fast_rate(inp: BoundInputs, lam_e: float, lam_t: float) -> BoundReport:
    _require(lam_e > 0.5 and lam_t > 0.5, "fast-rate needs lam_e, lam_t > 0.5")
    n, m, d = inp.n, inp.m, inp.delta
    ke = 1.0 / (1.0 - 1.0 / (2 * lam_e))
    kt = 1.0 / (1.0 - 1.0 / (2 * lam_t))
    env = ke * lam_e * (inp.kl_env + math.log(2 / d)) / n
    task = ke * kt * lam_t * float(np.mean((inp.kl_env + inp.kl_task + math.log(2 * n / d)) / m))
    terms = [("scaled_train", ke * kt * inp.train_loss), ("task_complexity", task), ("env_complexity", env)]
    return _report("fast-rate", terms, {"lam_e": lam_e, "lam_t": lam_t}, train=inp.train_loss)


def _single_square(name, inp, weight_n, weight_m, budget, hp=None) -> BoundReport:
    gap = combine_squares(weight_n, weight_m, budget) if math.isfinite(budget) else math.inf
    return _report(name, [("train", inp.train_loss), ("gap", gap)], hp, train=inp.train_loss)


def bound_new_classic(inp: BoundInputs) -> BoundReport:
    """Single-square bound combining both levels before taking one root."""
    n, m, d = inp.n, inp.m, inp.delta
    _require(n >= 2 and m >= 2, "new-classic needs n >= 2 and m >= 2")
    budget = 2 * inp.kl_env + inp.kl_task_mean + math.log(m * math.sqrt(n) / d)
    return _single_square("new-classic", inp, n - 1, 2 * (m - 1), budget)


def _sqrt_k_weights(n: int, m: int, k: int):
    wn = n - n ** (1.0 / (2 * k))
    wm = m - m ** (1.0 / (2 * k))
    _require(wn > 0 and wm > 0, f"sqrt-k needs n - n^(1/2k) > 0 and m - m^(1/2k) > 0 (n={n}, m={m}, k={k})")
    return wn, wm


def bound_sqrt_k(inp: BoundInputs, k: int) -> BoundReport:
    """Single-square bound with moment exponent controlled by the integer ``k``."""
    k = int(k)
    _require(k >= 1, f"k must be a positive integer, got {k}")
    n, m, d = inp.n, inp.m, inp.delta
    wn, wm = _sqrt_k_weights(n, m, k)
    log_arg = (0.5 - 1.0 / (4 * k)) * math.log(math.sqrt(n) * m) - math.log(d)
    budget = 2 * inp.kl_env + inp.kl_task_mean + log_arg
    return _single_square("sqrt-k", inp, wn, 2 * wm, budget, {"k": k})


def bound_st_markov(inp: BoundInputs) -> BoundReport:
    """Single-square bound from one Markov step with unit moment parameters."""
    n, m, d = inp.n, inp.m, inp.delta
    _require(n >= 2, "st-markov needs n >= 2")
    budget = inp.kl_env + inp.kl_task_mean + math.log(2 * math.sqrt(2) / d)
    return _single_square("st-markov", inp, 0.5 * n, m, budget)


def bound_single_task_mcallester(m: int, delta: float, kl: float, train: float) -> float:
    """train + sqrt((kl + ln(m / delta)) / (2 (m - 1)))."""
    _require(m >= 2, f"m must be at least 2, got {m}")
    _require(0.0 < delta < 1.0, f"delta must lie in (0, 1), got {delta!r}")
    _require(kl >= 0, "kl must be nonnegative")
    return train + math.sqrt((kl + math.log(m / delta)) / (2 * (m - 1)))


def mcallester_grad(m: int, delta: float, kl: float) -> float:
    """Derivative of the single-task bound with respect to ``kl``."""
    return 0.25 / ((m - 1) * math.sqrt((kl + math.log(m / delta)) / (2 * (m - 1))))


# --------------------------------------------------------------------------
# gradients of the closed forms with respect to (train, kl_env, kl_task)


def _single_square_grad(inp, wn, wm, budget, env_coef):
    n = inp.n
    factor = (wn + wm) / (wn * wm)
    dgap = 0.5 * math.sqrt(factor / budget)
    return 1.0, env_coef * dgap, np.full(n, dgap / n)


def _grad_new_classic(inp, **_):
    n, m, d = inp.n, inp.m, inp.delta
    budget = 2 * inp.kl_env + inp.kl_task_mean + math.log(m * math.sqrt(n) / d)
    return _single_square_grad(inp, n - 1, 2 * (m - 1), budget, 2.0)


def _grad_sqrt_k(inp, k, **_):
    n, m, d = inp.n, inp.m, inp.delta
    wn, wm = _sqrt_k_weights(n, m, int(k))
    log_arg = (0.5 - 1.0 / (4 * k)) * math.log(math.sqrt(n) * m) - math.log(d)
    return _single_square_grad(inp, wn, 2 * wm, 2 * inp.kl_env + inp.kl_task_mean + log_arg, 2.0)


def _grad_st_markov(inp, **_):
    budget = inp.kl_env + inp.kl_task_mean + math.log(2 * math.sqrt(2) / inp.delta)
    return _single_square_grad(inp, 0.5 * inp.n, inp.m, budget, 1.0)


def _grad_pacoh(inp, lam, beta, normalized=False, **_):
    scale = 1.0 / inp.n if normalized else 1.0
    return 1.0, 1 / beta + 1 / lam, np.full(inp.n, scale / beta)


def _generic_grad(name):
    def grad(inp, **hp):
        return generic_corollary_grad(inp, **specialization(name, inp, **hp))

    return grad


def _grad_mys(variant):
    def grad(inp, **hp):
        _require(inp.n > 8 and inp.m > 8, "the kl moment constant needs n > 8 and m > 8")
        return generic_corollary_grad(inp, **specialization(f"mys-{variant}", inp, **hp))

    return grad


# --------------------------------------------------------------------------
# registry and hyperparameter search


def _log_grid(lo: float, hi: float, num: int = 25) -> tuple:
    return tuple(float(v) for v in np.geomspace(lo, hi, num))


@dataclass(frozen=True)
class BoundEntry:
    name: str
    evaluate: Callable[..., BoundReport]
    grad: Callable[..., tuple]
    params: tuple = ()
    default_grid: Mapping[str, Sequence[float]] = field(default_factory=dict)


_LAMBDA_GRID = _log_grid(0.01, 1.99)
_FAST_GRID = _log_grid(0.55, 100.0)
_PACOH_GRID = _log_grid(0.1, 1e4)

REGISTRY: dict[str, BoundEntry] = {
    e.name: e
    for e in [
        BoundEntry("fast-rate", bound_fast_rate, _generic_grad("fast-rate"), ("lam_e", "lam_t"),
                   {"lam_e": _FAST_GRID, "lam_t": _FAST_GRID}),
        BoundEntry("lambda-liu", bound_lambda_liu, _generic_grad("lambda-liu"), ("lam",), {"lam": _LAMBDA_GRID}),
        BoundEntry("mlap", bound_mlap, _generic_grad("mlap")),
        BoundEntry("mys-classic", lambda inp: bound_mys(inp, "classic"), _grad_mys("classic")),
        BoundEntry("mys-lambda", lambda inp, lam: bound_mys(inp, "lambda", lam), _grad_mys("lambda"), ("lam",),
                   {"lam": _LAMBDA_GRID}),
        BoundEntry("mys-quadratic", lambda inp: bound_mys(inp, "quadratic"), _grad_mys("quadratic")),
        BoundEntry("new-classic", bound_new_classic, _grad_new_classic),
        BoundEntry("pacoh", bound_pacoh, _grad_pacoh, ("lam", "beta"), {"lam": _PACOH_GRID, "beta": _PACOH_GRID}),
        BoundEntry("sqrt-k", bound_sqrt_k, _grad_sqrt_k, ("k",), {"k": tuple(range(1, 26))}),
        BoundEntry("st-markov", bound_st_markov, _grad_st_markov),
    ]
}

BOUND_NAMES = tuple(sorted(REGISTRY))


def get_bound(name: str) -> BoundEntry:
    try:
        return REGISTRY[name]
    except KeyError:
        raise DomainError(f"unknown bound {name!r}; choose from {', '.join(BOUND_NAMES)}") from None


def evaluate_bound(name: str, inp: BoundInputs, **hp) -> BoundReport:
    return get_bound(name).evaluate(inp, **hp)


def bound_grad(name: str, inp: BoundInputs, **hp):
    """(d/d train, d/d kl_env, d/d kl_task) of a registered bound at fixed hyperparameters."""
    return get_bound(name).grad(inp, **hp)


def optimize_hyperparams(inp: BoundInputs, bound: str, grid: Mapping[str, Sequence[float]] | None = None):
    """Grid search for the hyperparameters minimizing a bound.

    Points raising ``DomainError`` or giving NaN are skipped. Ties go to the
    lexicographically smallest hyperparameter tuple. Returns
    ``(best_hyperparams, report)``.
    """
    entry = get_bound(bound)
    grid = dict(entry.default_grid if grid is None else grid)
    names = tuple(sorted(entry.params))
    if set(grid) != set(names):
        raise DomainError(f"grid for {bound!r} must cover exactly {names}, got {tuple(sorted(grid))}")
    axes = [sorted(set(float(v) for v in grid[p])) for p in names]
    if any(len(a) == 0 for a in axes):
        raise DomainError("every grid axis needs at least one point")
    best = None
    last_error = None
    for point in itertools.product(*axes):
        hp = dict(zip(names, point))
        if bound == "sqrt-k":
            hp["k"] = int(hp["k"])
        try:
            report = entry.evaluate(inp, **hp)
        except DomainError as exc:
            last_error = exc
            continue
        if math.isnan(report.value):
            continue
        if best is None or report.value < best[1].value:
            best = (hp, report)
    if best is None:
        raise DomainError(f"no valid grid point for {bound!r}: {last_error}")
    return best
