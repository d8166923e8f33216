"""State-of-health estimation from charge curves with bagged Gaussian processes."""

__version__ = "0.1.0"

from .ensemble import EnsembleConfig, aggregate, ensemble_predict, frd, train_ensemble
from .features import WindowSpec, build_feature_table, select_features, spearman, summarize, window_for
from .gpr import GPOptions, GPRHyperparams, fit, log_marginal_likelihood, predict
from .ingestion import compute_soh, load_histories, parse_cycling_table
from .synthetic import SyntheticFleetSpec, generate_synthetic_fleet

__all__ = [
    "EnsembleConfig", "GPOptions", "GPRHyperparams", "SyntheticFleetSpec", "WindowSpec", "aggregate",
    "build_feature_table", "compute_soh", "ensemble_predict", "fit", "frd", "generate_synthetic_fleet",
    "load_histories", "log_marginal_likelihood", "parse_cycling_table", "predict", "select_features",
    "spearman", "summarize", "train_ensemble", "window_for",
]
