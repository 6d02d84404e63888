"""PAC-Bayes bounds for meta-learning: divergences, bounds, lemma checks and bound-minimizing training."""

from __future__ import annotations

from .bounds import BOUND_NAMES, BoundInputs, BoundReport, bound_grad, evaluate_bound, optimize_hyperparams
from .coverage import CoverageConfig, CoverageReport, run_coverage
from .data import MetaDataset, SyntheticEnvSpec, TaskData, gen_synthetic, load_dataset, save_dataset
from .divergences import combine_squares, d_gamma, d_gamma_invert, kl_bernoulli, kl_bernoulli_inv_upper
from .errors import ConfigError, DomainError, FormatError, MetapacError, NumericalError
from .estimator import PacBayesMetaLearner
from .gaussians import DiagGaussian, IsotropicGaussian, KlMode, kl_diag, kl_hyper
from .trainer import MetaState, TrainConfig, adapt_and_eval, init_state, objective, train

__version__ = "0.1.0"

__all__ = [
    "BOUND_NAMES", "BoundInputs", "BoundReport", "ConfigError", "CoverageConfig", "CoverageReport", "DiagGaussian",
    "DomainError", "FormatError", "IsotropicGaussian", "KlMode", "MetaDataset", "MetaState", "MetapacError",
    "NumericalError", "PacBayesMetaLearner", "SyntheticEnvSpec", "TaskData", "TrainConfig", "adapt_and_eval",
    "bound_grad", "combine_squares", "d_gamma", "d_gamma_invert", "evaluate_bound", "gen_synthetic", "init_state",
    "kl_bernoulli", "kl_bernoulli_inv_upper", "kl_diag", "kl_hyper", "load_dataset", "objective",
    "optimize_hyperparams", "run_coverage", "save_dataset", "train",
]
