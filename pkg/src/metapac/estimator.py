"""scikit-learn style wrapper around meta-training and meta-test adaptation."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .data import MetaDataset, TaskData
from .trainer import TrainConfig, adapt_result, train


def _as_dataset(tasks) -> MetaDataset:
    if isinstance(tasks, MetaDataset):
        return tasks
    out = []
    for t in tasks:
        if isinstance(t, TaskData):
            out.append(t)
        else:
            x, y = t
            out.append(TaskData(x, y, np.zeros((0, np.asarray(x).shape[1])), np.zeros((0, np.asarray(y).reshape(len(y), -1).shape[1]))))
    return MetaDataset(out)


class PacBayesMetaLearner(BaseEstimator):
    """Learns a Gaussian weight prior for linear models by minimizing a meta-learning bound.

    ``fit`` takes a ``MetaDataset`` or a list of ``(X, y)`` pairs, one per
    task. ``predict`` uses the learned prior mean; ``adapt`` fits a posterior
    for a new task from a prior drawn from the hyper-posterior.

    Parameters
    ----------
    bound : str
        Registered bound used as the training objective.
    lr, epochs, mc_samples_u, mc_samples_w, delta, loss, kappa_p_sq, kappa_s_sq, seed
        See ``TrainConfig``.
    """

    def __init__(
        self,
        bound="new-classic",
        lr=1e-3,
        epochs=200,
        mc_samples_u=3,
        mc_samples_w=5,
        delta=0.1,
        loss="exp-square",
        kappa_p_sq=100.0,
        kappa_s_sq=1e-3,
        seed=0,
    ):
        self.bound = bound
        self.lr = lr
        self.epochs = epochs
        self.mc_samples_u = mc_samples_u
        self.mc_samples_w = mc_samples_w
        self.delta = delta
        self.loss = loss
        self.kappa_p_sq = kappa_p_sq
        self.kappa_s_sq = kappa_s_sq
        self.seed = seed

    def _config(self) -> TrainConfig:
        return TrainConfig(**self.get_params())

    def fit(self, tasks, y=None):
        data = _as_dataset(tasks)
        self.config_ = self._config()
        self.state_, self.history_ = train(self.config_, data)
        self.n_features_in_ = data.dim
        return self

    @property
    def prior_weights_(self) -> np.ndarray:
        check_is_fitted(self, "state_")
        return self.state_.prior_means.reshape(self.state_.shape)

    def predict(self, X) -> np.ndarray:
        w = self.prior_weights_
        X = np.asarray(X, dtype=float)
        out = X @ w[:-1] + w[-1]
        return out[:, 0] if out.shape[1] == 1 else out

    def adapt(self, task: TaskData, task_id: int = 0):
        check_is_fitted(self, "state_")
        return adapt_result(self.state_, task, self.config_, task_id)

    def score(self, tasks, y=None) -> float:
        """Negative mean meta-test loss over tasks with test splits (higher is better)."""
        tasks = tasks.test_tasks if isinstance(tasks, MetaDataset) else list(tasks)
        return -float(np.mean([self.adapt(t, i).test_loss for i, t in enumerate(tasks)]))
