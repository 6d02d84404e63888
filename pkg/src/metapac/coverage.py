"""Coverage experiment: how often does a meta-learning bound fall below the true transfer risk?

Each trial draws a synthetic environment sample, builds a hyper-posterior
from the observed tasks, evaluates the bound and estimates the true transfer
risk on fresh tasks with the closed-form population loss. A trial counts as a
violation only when the risk exceeds the bound by more than ``MC_SDS``
combined Monte-Carlo standard deviations.

The base learner is the mean-field Gaussian posterior of Bayesian linear
regression: for a prior ``N(mu, diag(s2))`` and noise variance ``noise``,
precision ``P = diag(1 / s2) + X'X / noise`` gives mean ``P^-1 (mu / s2 +
X'y / noise)`` and variances ``1 / diag(P)``. It is a deterministic function
of the sample and the prior, so the transfer risk is well defined.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping

import numpy as np

from .bounds import BoundInputs, bound_grad, evaluate_bound, get_bound, optimize_hyperparams
from .data import SyntheticEnvSpec, SyntheticOracle, _residual_population_loss, gen_synthetic
from .errors import DomainError
from .gaussians import IsotropicGaussian, KlMode, kl_diag_terms, kl_hyper
from .losses import check_loss
from .rng import rng_stream

MC_SDS = 3.0

# stream ids
_ENV, _PRIOR_DRAWS, _RISK = 1, 2, 3


@dataclass(frozen=True)
class CoverageConfig:
    """Settings of one coverage run.

    ``env`` fixes n, m and the environment; its seed is replaced per trial.
    """

    bound: str = "new-classic"
    trials: int = 500
    delta: float = 0.1
    seed: int = 0
    env: SyntheticEnvSpec = field(default_factory=lambda: SyntheticEnvSpec(dim=4, m=50, n=5, n_test_tasks=0, m_test=0))
    loss: str = "exp-square"
    kappa_p_sq: float = 100.0
    kappa_s_sq: float = 1e-3
    base_noise: float = 0.1
    mc_samples_u: int = 8
    risk_tasks: int = 200
    risk_w: int = 10
    bound_params: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        check_loss(self.loss)
        if self.trials < 1 or self.mc_samples_u < 2 or self.risk_tasks < 2 or self.risk_w < 1:
            raise DomainError("trials >= 1, mc_samples_u >= 2, risk_tasks >= 2 and risk_w >= 1 are required")
        if not 0.0 < self.delta < 1.0:
            raise DomainError("delta must lie in (0, 1)")
        if not (self.kappa_p_sq > 0 and self.kappa_s_sq > 0 and self.base_noise > 0):
            raise DomainError("kappa_p_sq, kappa_s_sq and base_noise must be positive")
        object.__setattr__(self, "bound_params", dict(self.bound_params))

    def as_dict(self) -> dict:
        return {
            "bound": self.bound, "trials": self.trials, "delta": self.delta, "seed": self.seed,
            "env": self.env.as_dict(), "loss": self.loss, "kappa_p_sq": self.kappa_p_sq,
            "kappa_s_sq": self.kappa_s_sq, "base_noise": self.base_noise, "mc_samples_u": self.mc_samples_u,
            "risk_tasks": self.risk_tasks, "risk_w": self.risk_w, "bound_params": dict(self.bound_params),
        }


@dataclass(frozen=True)
class CoverageReport:
    bound: str
    trials: int
    violations: int
    violation_rate: float
    delta: float
    mc_slack: float
    passed: bool
    mean_bound: float
    mean_risk: float
    max_excess: float

    def as_dict(self) -> dict:
        return {
            "bound": self.bound, "trials": self.trials, "violations": self.violations,
            "violation_rate": self.violation_rate, "delta": self.delta, "mc_slack": self.mc_slack,
            "pass": self.passed, "mean_bound": self.mean_bound, "mean_risk": self.mean_risk,
            "max_excess": self.max_excess,
        }


@dataclass(frozen=True)
class TrialOutcome:
    bound: float
    bound_sd: float
    risk: float
    risk_sd: float

    @property
    def excess(self) -> float:
        return self.risk - self.bound

    @property
    def violated(self) -> bool:
        return self.excess > MC_SDS * math.hypot(self.bound_sd, self.risk_sd)


def mc_slack(delta: float, trials: int) -> float:
    return MC_SDS * math.sqrt(delta * (1 - delta) / trials)


def _design(x):
    return np.concatenate([x, np.ones(x.shape[:-1] + (1,))], axis=-1)


def mean_field_posterior(x, y, prior_mean, prior_log_var, noise):
    """Mean-field Bayesian linear regression; broadcasts over leading axes of the prior.

    ``x`` (m, p) already includes the intercept column and ``y`` has shape (m,).
    """
    inv_s2 = np.exp(-np.asarray(prior_log_var, dtype=float))
    gram = x.T @ x / noise
    xty = x.T @ y / noise
    prec = gram + inv_s2[..., :, None] * np.eye(x.shape[1])
    rhs = prior_mean * inv_s2 + xty
    mean = np.linalg.solve(prec, rhs[..., None])[..., 0]
    log_var = -np.log(np.diagonal(prec, axis1=-2, axis2=-1))
    return mean, log_var


def empirical_gaussian_loss(loss, x, y, mean, log_var):
    """Exact E_W of the empirical loss for W ~ N(mean, diag(exp(log_var))), per leading index."""
    mu = mean @ x.T - y
    var = np.exp(log_var) @ (x.T**2)
    return _residual_population_loss(loss, mu, var).mean(axis=-1)


def empirical_bayes_theta(tasks, noise) -> np.ndarray:
    """Hyper-posterior mean from the observed tasks: mean and log spread of ridge fits."""
    fits = []
    for t in tasks:
        x = _design(t.x_train)
        fits.append(np.linalg.solve(x.T @ x + noise * np.eye(x.shape[1]), x.T @ t.y_train[:, 0]))
    fits = np.array(fits)
    spread = fits.var(axis=0) + 1e-2
    return np.concatenate([fits.mean(axis=0), np.log(spread)])


def _bound_value(bound, inp: BoundInputs, params):
    """Bound value and gradient (train, kl_env, kl_task); callables return only a value."""
    if callable(bound):
        return float(bound(inp)), None
    if params or not get_bound(bound).params:
        hp = dict(params)
        report = evaluate_bound(bound, inp, **hp)
    else:
        hp, report = optimize_hyperparams(inp, bound)
    return report.value, bound_grad(bound, inp, **hp)


def run_trial(cfg: CoverageConfig, index: int, bounds) -> dict:
    """One environment draw evaluated against every bound in ``bounds``."""
    env = replace(cfg.env, seed=int(rng_stream(cfg.seed, _ENV, index).integers(2**63)), n_test_tasks=0, m_test=0)
    data, oracle = gen_synthetic(env)
    noise = cfg.base_noise
    theta = empirical_bayes_theta(data.tasks, noise)
    d = theta.size // 2
    su = cfg.mc_samples_u

    u = theta + math.sqrt(cfg.kappa_s_sq) * rng_stream(cfg.seed, _PRIOR_DRAWS, index).standard_normal((su, 2 * d))
    kl_env = kl_hyper(IsotropicGaussian(theta, cfg.kappa_s_sq), IsotropicGaussian(np.zeros(2 * d), cfg.kappa_p_sq), KlMode.STANDARD)
    train_j = np.zeros(su)
    kl_ij = np.zeros((data.n, su))
    for i, t in enumerate(data.tasks):
        x, y = _design(t.x_train), t.y_train[:, 0]
        mean, lv = mean_field_posterior(x, y, u[:, :d], u[:, d:], noise)
        train_j += empirical_gaussian_loss(cfg.loss, x, y, mean, lv) / data.n
        kl_ij[i] = kl_diag_terms(mean, lv, u[:, :d], u[:, d:]).sum(axis=-1)
    inp = BoundInputs(data.n, data.m, cfg.delta, float(np.clip(train_j.mean(), 0.0, 1.0)), kl_env, kl_ij.mean(axis=1))

    risk, risk_sd = transfer_risk(cfg, oracle, theta, index)
    out = {}
    for name, bound in bounds.items():
        value, grad = _bound_value(bound, inp, cfg.bound_params)
        sd = 0.0
        if grad is not None and math.isfinite(value):
            g_train, _, g_task = grad
            linear = g_train * train_j + np.asarray(g_task) @ kl_ij
            sd = float(linear.std(ddof=1) / math.sqrt(su))
        out[name] = TrialOutcome(value, sd, risk, risk_sd)
    return out


def transfer_risk(cfg: CoverageConfig, oracle: SyntheticOracle, theta, index: int) -> tuple[float, float]:
    """MC estimate (and its sd) of the expected population loss on fresh tasks.

    Each fresh task draws its parameter, one hyperparameter from the
    hyper-posterior, a fresh training sample and ``risk_w`` posterior weights;
    the loss over inputs is exact.
    """
    rng = rng_stream(cfg.seed, _RISK, index)
    d = theta.size // 2
    env = oracle.spec
    per_task = np.empty(cfg.risk_tasks)
    w_stars = oracle.sample_task_params(rng, cfg.risk_tasks)
    for k, w_star in enumerate(w_stars):
        u = theta + math.sqrt(cfg.kappa_s_sq) * rng.standard_normal(2 * d)
        task = oracle.sample_task(rng, w_star, env.m)
        mean, lv = mean_field_posterior(_design(task.x_train), task.y_train[:, 0], u[:d], u[d:], cfg.base_noise)
        w = mean + np.exp(0.5 * lv) * rng.standard_normal((cfg.risk_w, d))
        per_task[k] = oracle.population_loss(w, w_star, cfg.loss).mean()
    return float(per_task.mean()), float(per_task.std(ddof=1) / math.sqrt(cfg.risk_tasks))


def coverage_outcomes(cfg: CoverageConfig, bounds: Mapping[str, str | Callable] | None = None) -> dict:
    """Trial outcomes per bound; trials share environment draws across bounds."""
    bounds = {cfg.bound: cfg.bound} if bounds is None else dict(bounds)
    for b in bounds.values():
        if not callable(b):
            get_bound(b)
    results = {name: [] for name in bounds}
    for index in range(cfg.trials):
        for name, outcome in run_trial(cfg, index, bounds).items():
            results[name].append(outcome)
    return results


def summarize(name: str, outcomes, cfg: CoverageConfig) -> CoverageReport:
    violations = sum(o.violated for o in outcomes)
    rate = violations / len(outcomes)
    slack = mc_slack(cfg.delta, len(outcomes))
    return CoverageReport(
        bound=name,
        trials=len(outcomes),
        violations=violations,
        violation_rate=rate,
        delta=cfg.delta,
        mc_slack=slack,
        passed=rate <= cfg.delta + slack,
        mean_bound=float(np.mean([o.bound for o in outcomes])),
        mean_risk=float(np.mean([o.risk for o in outcomes])),
        max_excess=float(max(o.excess for o in outcomes)),
    )


def run_coverage(cfg: CoverageConfig, bounds: Mapping[str, str | Callable] | None = None) -> list[CoverageReport]:
    """Coverage reports, one per bound, sorted by bound name."""
    results = coverage_outcomes(cfg, bounds)
    return [summarize(name, results[name], cfg) for name in sorted(results)]
