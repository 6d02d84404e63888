"""Bound-minimizing meta-learning for a linear model with Gaussian weight posteriors.

Weights are a (features + 1, outputs) matrix whose last row is the intercept;
all Gaussians act on its row-major flattening of size d. The hyperparameter
``u = (prior means, prior log-variances)`` has size 2d, its hyper-posterior is
``N(theta, kappa_s_sq I)`` and its hyper-prior ``N(0, kappa_p_sq I)``.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from typing import Mapping

import numpy as np

from .bounds import BoundInputs, bound_grad, bound_single_task_mcallester, evaluate_bound, get_bound, mcallester_grad, optimize_hyperparams
from .data import MetaDataset, TaskData
from .errors import DomainError, NumericalError
from .gaussians import DiagGaussian, IsotropicGaussian, KlMode, kl_diag_grads, kl_diag_terms, kl_hyper
from .losses import check_loss, loss_grad, loss_value
from .rng import rng_stream

INIT_LOG_VAR_MEAN = -10.0
INIT_LOG_VAR_SD = 0.1  # variance 0.01

# stream ids
_INIT, _EPOCH, _ADAPT_PRIOR, _ADAPT_EPOCH, _ADAPT_EVAL = 1, 2, 3, 4, 5


@dataclass(frozen=True)
class TrainConfig:
    """Meta-training and adaptation settings.

    ``bound_params`` fixes the bound's hyperparameters; when empty they are
    re-optimized over the default grid at every evaluation. With
    ``resample=False`` every epoch reuses the same random stream (common
    random numbers), so ``lr=0`` gives an exactly constant history.
    """

    bound: str = "new-classic"
    lr: float = 1e-3
    epochs: int = 200
    mc_samples_u: int = 3
    mc_samples_w: int = 5
    delta: float = 0.1
    seed: int = 0
    loss: str = "exp-square"
    kappa_p_sq: float = 100.0
    kappa_s_sq: float = 1e-3
    bound_params: Mapping[str, float] = field(default_factory=dict)
    freeze_prior_var: bool = False
    resample: bool = True
    eval_samples: int = 100

    def __post_init__(self):
        get_bound(self.bound)
        check_loss(self.loss)
        if not (self.lr >= 0 and math.isfinite(self.lr)):
            raise DomainError("lr must be a nonnegative finite number")
        if self.epochs < 0:
            raise DomainError("epochs must be nonnegative")
        if self.mc_samples_u < 1 or self.mc_samples_w < 1 or self.eval_samples < 1:
            raise DomainError("Monte-Carlo sample counts must be positive")
        if not 0.0 < self.delta < 1.0:
            raise DomainError("delta must lie in (0, 1)")
        if not (self.kappa_p_sq > 0 and self.kappa_s_sq > 0):
            raise DomainError("kappa_p_sq and kappa_s_sq must be positive")
        object.__setattr__(self, "bound_params", dict(self.bound_params))

    def as_dict(self) -> dict:
        return {
            "bound": self.bound, "lr": self.lr, "epochs": self.epochs, "mc_samples_u": self.mc_samples_u,
            "mc_samples_w": self.mc_samples_w, "delta": self.delta, "seed": self.seed, "loss": self.loss,
            "kappa_p_sq": self.kappa_p_sq, "kappa_s_sq": self.kappa_s_sq, "bound_params": dict(self.bound_params),
            "freeze_prior_var": self.freeze_prior_var, "resample": self.resample, "eval_samples": self.eval_samples,
        }


@dataclass(eq=False)
class MetaState:
    """Hyper-posterior mean and per-task diagonal posteriors.

    ``means`` and ``log_vars`` have shape (n, d); ``theta`` has shape (2d,).
    ``shape`` is the (features + 1, outputs) weight-matrix shape.
    """

    theta: np.ndarray
    means: np.ndarray
    log_vars: np.ndarray
    kappa_s_sq: float
    kappa_p_sq: float
    shape: tuple

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=float)
        self.means = np.atleast_2d(np.asarray(self.means, dtype=float))
        self.log_vars = np.atleast_2d(np.asarray(self.log_vars, dtype=float))
        d = int(np.prod(self.shape))
        if self.theta.shape != (2 * d,) or self.means.shape[1:] != (d,) or self.means.shape != self.log_vars.shape:
            raise DomainError("state dimensions are inconsistent with the weight shape")

    @property
    def d(self) -> int:
        return self.means.shape[1]

    @property
    def n(self) -> int:
        return self.means.shape[0]

    @property
    def prior_means(self) -> np.ndarray:
        return self.theta[: self.d]

    @property
    def prior_log_vars(self) -> np.ndarray:
        return self.theta[self.d:]

    @property
    def per_task(self) -> list:
        return [DiagGaussian(m, lv) for m, lv in zip(self.means, self.log_vars)]

    @property
    def hyper_posterior(self) -> IsotropicGaussian:
        return IsotropicGaussian(self.theta, self.kappa_s_sq)

    @property
    def hyper_prior(self) -> IsotropicGaussian:
        return IsotropicGaussian(np.zeros_like(self.theta), self.kappa_p_sq)

    def copy(self) -> "MetaState":
        return replace(self, theta=self.theta.copy(), means=self.means.copy(), log_vars=self.log_vars.copy())

    def flat(self) -> np.ndarray:
        return np.concatenate([self.theta, self.means.ravel(), self.log_vars.ravel()])

    def with_flat(self, vec) -> "MetaState":
        vec = np.asarray(vec, dtype=float)
        t = self.theta.size
        k = self.means.size
        return replace(
            self,
            theta=vec[:t].copy(),
            means=vec[t:t + k].reshape(self.means.shape).copy(),
            log_vars=vec[t + k:].reshape(self.means.shape).copy(),
        )

    def equals(self, other: "MetaState") -> bool:
        return (
            self.shape == other.shape
            and self.kappa_s_sq == other.kappa_s_sq
            and self.kappa_p_sq == other.kappa_p_sq
            and np.array_equal(self.flat(), other.flat())
        )


@dataclass(frozen=True)
class Gradients:
    """Gradients with the same layout as ``MetaState``."""

    theta: np.ndarray
    means: np.ndarray
    log_vars: np.ndarray

    def flat(self) -> np.ndarray:
        return np.concatenate([self.theta, self.means.ravel(), self.log_vars.ravel()])


@dataclass(frozen=True)
class ObjectiveResult:
    value: float
    grads: Gradients
    breakdown: dict


@dataclass
class TrainHistory:
    """Per-epoch objective values, breakdowns and wall-clock seconds."""

    objective: list = field(default_factory=list)
    breakdown: list = field(default_factory=list)
    wall_clock: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.objective)


def _design(x: np.ndarray) -> np.ndarray:
    """Append the intercept column."""
    return np.concatenate([x, np.ones(x.shape[:-1] + (1,))], axis=-1)


def glorot_bound(shape) -> float:
    fan_in, fan_out = shape
    return math.sqrt(6.0 / (fan_in + fan_out))


def init_state(cfg: TrainConfig, data: MetaDataset, rng: np.random.Generator | None = None) -> MetaState:
    """Glorot-uniform means and N(-10, 0.01) log-variances for the prior and every task."""
    if data.n < 2:
        raise DomainError(f"meta-training needs at least 2 tasks, got {data.n}")
    rng = rng_stream(cfg.seed, _INIT) if rng is None else rng
    shape = (data.dim + 1, data.n_outputs)
    d = shape[0] * shape[1]
    a = glorot_bound(shape)
    prior_mean = rng.uniform(-a, a, d)
    prior_lv = INIT_LOG_VAR_MEAN + INIT_LOG_VAR_SD * rng.standard_normal(d)
    means = rng.uniform(-a, a, (data.n, d))
    log_vars = INIT_LOG_VAR_MEAN + INIT_LOG_VAR_SD * rng.standard_normal((data.n, d))
    return MetaState(np.concatenate([prior_mean, prior_lv]), means, log_vars, cfg.kappa_s_sq, cfg.kappa_p_sq, shape)


def _stack(tasks) -> tuple[np.ndarray, np.ndarray]:
    return np.stack([_design(t.x_train) for t in tasks]), np.stack([t.y_train for t in tasks])


def _mc_loss(x, y, mean, log_var, eps, loss, shape):
    """MC training loss of Gaussian weights and its gradients.

    ``x`` (..., m, p), ``y`` (..., m, K), ``mean``/``log_var`` (..., d) and
    ``eps`` (..., S, d). Returns per-leading-index loss and gradients.
    """
    std = np.exp(0.5 * log_var)
    w = mean[..., None, :] + std[..., None, :] * eps
    wm = w.reshape(w.shape[:-1] + shape)
    resid = np.einsum("...mp,...spk->...smk", x, wm) - y[..., None, :, :]
    vals = loss_value(loss, resid)
    g = loss_grad(loss, resid)
    m = x.shape[-2]
    s = eps.shape[-2]
    dw = np.einsum("...mp,...smk->...spk", x, g).reshape(eps.shape) / (m * s)
    d_mean = dw.sum(axis=-2)
    d_lv = (dw * eps).sum(axis=-2) * std / 2.0
    return vals.mean(axis=(-1, -2)), d_mean, d_lv


def _bound_with_grads(cfg: TrainConfig, inp: BoundInputs):
    if cfg.bound_params or not get_bound(cfg.bound).params:
        hp = dict(cfg.bound_params)
        report = evaluate_bound(cfg.bound, inp, **hp)
    else:
        hp, report = optimize_hyperparams(inp, cfg.bound)
    return report, hp, bound_grad(cfg.bound, inp, **hp)


def objective(state: MetaState, data: MetaDataset, cfg: TrainConfig, rng: np.random.Generator) -> ObjectiveResult:
    """Monte-Carlo estimate of the selected bound and its reparameterized gradients.

    Draws ``mc_samples_u`` hyperparameters from the hyper-posterior and, for
    every (draw, task) pair, ``mc_samples_w`` weight samples from the task
    posterior. The task KLs are averaged over the hyperparameter draws.
    """
    if data.n != state.n or data.dim + 1 != state.shape[0] or data.n_outputs != state.shape[1]:
        raise DomainError("state and data dimensions disagree")
    n, d, su, sw = state.n, state.d, cfg.mc_samples_u, cfg.mc_samples_w
    x, y = _stack(data.tasks)
    kappa_s = math.sqrt(state.kappa_s_sq)

    eps_u = rng.standard_normal((su, 2 * d))
    if cfg.freeze_prior_var:
        eps_u[:, d:] = 0.0
    u = state.theta + kappa_s * eps_u
    eps_w = rng.standard_normal((n, su * sw, d))

    task_loss, d_mean_loss, d_lv_loss = _mc_loss(x, y, state.means, state.log_vars, eps_w, cfg.loss, state.shape)
    train_loss = float(task_loss.mean())

    # kl_ij between task i's posterior and the prior from draw j
    mq, lvq = state.means[:, None, :], state.log_vars[:, None, :]
    mp, lvp = u[None, :, :d], u[None, :, d:]
    kl_ij = kl_diag_terms(mq, lvq, mp, lvp).sum(axis=-1)
    kl_task = kl_ij.mean(axis=1)
    g_mq, g_lvq, g_mp, g_lvp = kl_diag_grads(mq, lvq, mp, lvp)

    q_env = IsotropicGaussian(state.theta, state.kappa_s_sq)
    p_env = IsotropicGaussian(np.zeros(2 * d), state.kappa_p_sq)
    kl_env = kl_hyper(q_env, p_env, KlMode.STANDARD)

    if not (math.isfinite(train_loss) and math.isfinite(kl_env) and np.all(np.isfinite(kl_task))):
        raise NumericalError("Monte-Carlo loss or KL estimate is non-finite")
    inp = BoundInputs(n, data.m, cfg.delta, min(max(train_loss, 0.0), 1.0), kl_env, kl_task)
    report, hp, (g_train, g_env, g_task) = _bound_with_grads(cfg, inp)
    g_task = np.asarray(g_task, dtype=float)

    d_means = g_train * d_mean_loss / n + g_task[:, None] * g_mq.mean(axis=1)
    d_lvs = g_train * d_lv_loss / n + g_task[:, None] * g_lvq.mean(axis=1)
    d_theta = g_env * state.theta / state.kappa_p_sq
    d_theta[:d] += np.einsum("i,ijd->d", g_task, g_mp) / su
    d_theta[d:] += np.einsum("i,ijd->d", g_task, g_lvp) / su
    if cfg.freeze_prior_var:
        d_theta[d:] = 0.0

    breakdown = {
        "train_loss": train_loss,
        "kl_env": kl_env,
        "kl_task_mean": float(kl_task.mean()),
        **{f"term:{k}": v for k, v in report.terms},
        **{f"hp:{k}": float(v) for k, v in hp.items()},
    }
    return ObjectiveResult(report.value, Gradients(d_theta, d_means, d_lvs), breakdown)


def _epoch_rng(cfg: TrainConfig, epoch: int) -> np.random.Generator:
    return rng_stream(cfg.seed, _EPOCH, epoch if cfg.resample else 0)


def train(cfg: TrainConfig, data: MetaDataset, state: MetaState | None = None) -> tuple[MetaState, TrainHistory]:
    """Full-batch SGD on the bound; ``history.objective[e]`` is the value before step e."""
    state = init_state(cfg, data) if state is None else state.copy()
    history = TrainHistory()
    for epoch in range(cfg.epochs):
        start = time.perf_counter()
        try:
            res = objective(state, data, cfg, _epoch_rng(cfg, epoch))
        except NumericalError as exc:
            raise NumericalError(str(exc), epoch) from None
        g = res.grads
        if not (math.isfinite(res.value) and np.all(np.isfinite(g.flat()))):
            raise NumericalError("objective or gradient became non-finite", epoch)
        state.theta = state.theta - cfg.lr * g.theta
        state.means = state.means - cfg.lr * g.means
        state.log_vars = state.log_vars - cfg.lr * g.log_vars
        history.objective.append(res.value)
        history.breakdown.append(res.breakdown)
        history.wall_clock.append(time.perf_counter() - start)
    return state, history


# --------------------------------------------------------------------------
# meta-test


@dataclass(frozen=True)
class AdaptResult:
    test_loss: float
    bound: float
    train_loss: float
    kl: float
    posterior: DiagGaussian


def _single_task_objective(x, y, mean, lv, prior_mean, prior_lv, eps, cfg, shape):
    loss, d_mean, d_lv = _mc_loss(x, y, mean, lv, eps, cfg.loss, shape)
    kl = float(kl_diag_terms(mean, lv, prior_mean, prior_lv).sum())
    gk_mean, gk_lv, _, _ = kl_diag_grads(mean, lv, prior_mean, prior_lv)
    loss = float(min(max(loss, 0.0), 1.0))
    value = bound_single_task_mcallester(x.shape[0], cfg.delta, kl, loss)
    c = mcallester_grad(x.shape[0], cfg.delta, kl)
    return value, d_mean + c * gk_mean, d_lv + c * gk_lv, loss, kl


def adapt_from_prior(
    prior_mean, prior_log_var, task: TaskData, cfg: TrainConfig, shape, key: tuple = (0,)
) -> AdaptResult:
    """Fit a fresh posterior on ``task`` by SGD on the single-task bound.

    The posterior starts at the prior. The reported test loss and bound use
    ``cfg.eval_samples`` weight draws from the fitted posterior.
    """
    if task.x_train.shape[0] < 2 or task.x_test.shape[0] < 1:
        raise DomainError("adaptation needs at least 2 training and 1 test sample")
    x, y = _design(task.x_train), task.y_train
    prior_mean = np.asarray(prior_mean, dtype=float)
    prior_lv = np.asarray(prior_log_var, dtype=float)
    mean, lv = prior_mean.copy(), prior_lv.copy()
    d = mean.size
    for epoch in range(cfg.epochs):
        rng = rng_stream(cfg.seed, _ADAPT_EPOCH, *key, epoch if cfg.resample else 0)
        eps = rng.standard_normal((cfg.mc_samples_w, d))
        value, g_mean, g_lv, _, _ = _single_task_objective(x, y, mean, lv, prior_mean, prior_lv, eps, cfg, shape)
        if not (math.isfinite(value) and np.all(np.isfinite(g_mean)) and np.all(np.isfinite(g_lv))):
            raise NumericalError("adaptation objective became non-finite", epoch)
        mean = mean - cfg.lr * g_mean
        lv = lv - cfg.lr * g_lv
    eps = rng_stream(cfg.seed, _ADAPT_EVAL, *key).standard_normal((cfg.eval_samples, d))
    bound, _, _, train_loss, kl = _single_task_objective(x, y, mean, lv, prior_mean, prior_lv, eps, cfg, shape)
    test_loss, _, _ = _mc_loss(_design(task.x_test), task.y_test, mean, lv, eps, cfg.loss, shape)
    return AdaptResult(float(test_loss), bound, train_loss, kl, DiagGaussian(mean, lv))


def adapt_and_eval(state: MetaState, task: TaskData, cfg: TrainConfig, task_id: int = 0) -> tuple[float, float]:
    """Draw one hyperparameter from the hyper-posterior, adapt, and report (test loss, bound)."""
    res = adapt_result(state, task, cfg, task_id)
    return res.test_loss, res.bound


def adapt_result(state: MetaState, task: TaskData, cfg: TrainConfig, task_id: int = 0) -> AdaptResult:
    rng = rng_stream(cfg.seed, _ADAPT_PRIOR, task_id)
    eps = rng.standard_normal(state.theta.size)
    if cfg.freeze_prior_var:
        eps[state.d:] = 0.0
    u = state.theta + math.sqrt(state.kappa_s_sq) * eps
    return adapt_from_prior(u[: state.d], u[state.d:], task, cfg, state.shape, (task_id,))


def baseline_result(task: TaskData, cfg: TrainConfig, task_id: int = 0) -> AdaptResult:
    """Adaptation without meta-training: the weight prior is N(0, kappa_p_sq I)."""
    shape = (task.dim + 1, task.n_outputs)
    d = shape[0] * shape[1]
    return adapt_from_prior(np.zeros(d), np.full(d, math.log(cfg.kappa_p_sq)), task, cfg, shape, (task_id,))
