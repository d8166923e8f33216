"""Bagged GPR: bootstrap bags, independent fits, inverse-std weighted fusion."""

from __future__ import annotations

import logging
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .errors import FitFailureError, NoModelsError, SohError
from .gpr import GPOptions, GPRModel, fit, predict

log = logging.getLogger(__name__)

ENSEMBLE_FORMAT = "sohbag.ensemble"
ENSEMBLE_FORMAT_VERSION = 1


@dataclass(frozen=True)
class EnsembleConfig:
    """m bags of n rows each.

    ``bag_unit="cell"`` draws a cell uniformly, then a row within it, so each
    cell carries equal weight regardless of how many cycles it logged.
    """

    m: int = 7
    n: int = 30
    master_seed: int = 0
    weight_epsilon: float = 1e-8
    bag_unit: str = "row"
    max_m: int = 1000
    max_n: int = 5000

    def __post_init__(self):
        if self.m < 1 or self.n < 2:
            raise ValueError(f"need m >= 1 and n >= 2, got m={self.m}, n={self.n}")
        if self.m > self.max_m or self.n > self.max_n:
            raise ValueError(f"m={self.m}, n={self.n} exceed resource bounds (m <= {self.max_m}, n <= {self.max_n})")
        if not self.weight_epsilon > 0:
            raise ValueError("weight_epsilon must be positive")
        if self.bag_unit not in ("row", "cell"):
            raise ValueError("bag_unit must be 'row' or 'cell'")


def bag_seed(master_seed: int, ordinal: int, stream: int = 0) -> np.random.SeedSequence:
    """Counter-based seed for bag ``ordinal``; independent of generation order."""
    return np.random.SeedSequence([int(master_seed) & 0xFFFFFFFFFFFFFFFF, int(ordinal), int(stream)])


def _seed_int(ss: np.random.SeedSequence) -> int:
    return int(ss.generate_state(1, np.uint64)[0])


def make_bag(n_rows: int, n: int, master_seed: int, ordinal: int, groups=None) -> np.ndarray:
    rng = np.random.default_rng(bag_seed(master_seed, ordinal))
    if groups is None:
        return rng.integers(0, n_rows, size=n)
    groups = np.asarray(groups)
    uniq, inverse = np.unique(groups, return_inverse=True)
    members = [np.flatnonzero(inverse == g) for g in range(len(uniq))]
    picks = rng.integers(0, len(uniq), size=n)
    offsets = rng.random(n)
    return np.array([members[g][int(u * len(members[g]))] for g, u in zip(picks, offsets)])


def make_bags(n_rows: int, config: EnsembleConfig, groups=None) -> list[np.ndarray]:
    """m index arrays of length n, drawn with replacement from range(n_rows)."""
    if n_rows < 1:
        raise ValueError("n_rows must be at least 1")
    if config.bag_unit == "cell" and groups is None:
        raise ValueError("bag_unit='cell' needs row group labels")
    g = groups if config.bag_unit == "cell" else None
    return [make_bag(n_rows, config.n, config.master_seed, a, g) for a in range(config.m)]


@dataclass
class BaggedEnsemble:
    models: list[GPRModel]
    bag_indices: list[np.ndarray]
    config: EnsembleConfig
    ordinals: list[int] = field(default_factory=list)
    fit_times: list[float] = field(default_factory=list)

    def __len__(self):
        return len(self.models)

    def head(self, m: int) -> BaggedEnsemble:
        """Sub-ensemble of the first m bag ordinals that trained successfully."""
        keep = [k for k, o in enumerate(self.ordinals) if o < m]
        return BaggedEnsemble(
            [self.models[k] for k in keep], [self.bag_indices[k] for k in keep],
            replace(self.config, m=m), [self.ordinals[k] for k in keep], [self.fit_times[k] for k in keep],
        )

    def to_dict(self) -> dict:
        c = self.config
        return {
            "format": ENSEMBLE_FORMAT,
            "format_version": ENSEMBLE_FORMAT_VERSION,
            "config": c.__dict__.copy(),
            "ordinals": list(self.ordinals),
            "bag_indices": [b.tolist() for b in self.bag_indices],
            "models": [mdl.to_dict() for mdl in self.models],
        }

    @classmethod
    def from_dict(cls, d: dict) -> BaggedEnsemble:
        if d.get("format") != ENSEMBLE_FORMAT or d.get("format_version") != ENSEMBLE_FORMAT_VERSION:
            raise ValueError(f"unsupported ensemble format {d.get('format')!r} v{d.get('format_version')}")
        models = [GPRModel.from_dict(md) for md in d["models"]]
        return cls(models, [np.array(b, dtype=np.int64) for b in d["bag_indices"]],
                   EnsembleConfig(**d["config"]), list(d["ordinals"]), [0.0] * len(models))


def _fit_bag(X, y, idx, opts: GPOptions, config: EnsembleConfig, ordinal: int):
    seeds = [_seed_int(bag_seed(config.master_seed, ordinal, 1)), _seed_int(bag_seed(config.master_seed, ordinal, 2))]
    errors = []
    for attempt, seed in enumerate(seeds):
        t0 = time.perf_counter()
        try:
            model = fit(X[idx], y[idx], replace(opts, seed=seed))
            return model, time.perf_counter() - t0, errors
        except SohError as exc:
            errors.append(f"attempt {attempt}: {exc}")
    return None, 0.0, errors


def train_ensemble(X, y, config: EnsembleConfig, gp_options: GPOptions | None = None, *,
                   workers: int = 1, groups=None) -> BaggedEnsemble:
    """Fit one GP per bag; results do not depend on ``workers``.

    A bag whose fit fails is retried once with another optimizer seed and then
    dropped with a warning.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64)
    opts = gp_options or GPOptions()
    bags = make_bags(len(X), config, groups)
    jobs = range(config.m)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda a: _fit_bag(X, y, bags[a], opts, config, a), jobs))
    else:
        results = [_fit_bag(X, y, bags[a], opts, config, a) for a in jobs]
    models, kept, ordinals, times = [], [], [], []
    for a, (model, dt, errors) in enumerate(results):
        if model is None:
            warnings.warn(f"bag {a} excluded after failed fits: {'; '.join(errors)}", stacklevel=2)
            continue
        models.append(model)
        kept.append(bags[a])
        ordinals.append(a)
        times.append(dt)
    if not models:
        raise FitFailureError(f"all {config.m} bags failed to fit")
    return BaggedEnsemble(models, kept, config, ordinals, times)


@dataclass(frozen=True)
class Prediction:
    y_pred: float
    sigma_pred: float
    per_model: tuple[tuple[float, float, float], ...]
    z: int


def aggregate_arrays(Y, S, epsilon: float = 1e-8):
    """Vectorized fusion over axis 0 (models). Returns ``(y_pred, sigma_pred, z)``.

    Weights are 1/max(sigma, epsilon). With a single nonzero weight the
    dispersion formula is undefined and that model's own sigma is returned.
    """
    Y = np.asarray(Y, dtype=np.float64)
    S = np.asarray(S, dtype=np.float64)
    if Y.shape[0] == 0:
        raise NoModelsError("no model outputs to aggregate")
    flat = Y.ndim == 1
    Y2, S2 = Y.reshape(len(Y), -1), S.reshape(len(S), -1)
    W = 1.0 / np.maximum(S2, epsilon)
    z = np.count_nonzero(W, axis=0)
    wsum = W.sum(axis=0)
    y_pred = (W * Y2).sum(axis=0) / wsum
    disp = (W * (Y2 - y_pred) ** 2).sum(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        sigma = np.sqrt(z * disp / ((z - 1) * wsum))
    lone = S2[np.argmax(W, axis=0), np.arange(Y2.shape[1])]
    sigma = np.where(z > 1, sigma, lone)
    if flat:
        return y_pred[0], sigma[0], int(z[0])
    return y_pred, sigma, z


def aggregate(per_model: Sequence[tuple[float, float]], epsilon: float = 1e-8) -> Prediction:
    """Inverse-std weighted mean and weighted standard deviation of model outputs."""
    if len(per_model) == 0:
        raise NoModelsError("no model outputs to aggregate")
    Y = np.array([p[0] for p in per_model], dtype=np.float64)
    S = np.array([p[1] for p in per_model], dtype=np.float64)
    y_pred, sigma, z = aggregate_arrays(Y, S, epsilon)
    W = 1.0 / np.maximum(S, epsilon)
    trace = tuple((float(a), float(b), float(w)) for a, b, w in zip(Y, S, W))
    return Prediction(float(y_pred), float(sigma), trace, int(z))


def frd(total_rows: float, config: EnsembleConfig) -> float:
    """Factor reduction of data, N / (m n)."""
    return total_rows / (config.m * config.n)


def model_outputs(ensemble: BaggedEnsemble, X) -> tuple[np.ndarray, np.ndarray]:
    """Per-model posterior means and stds, shape (models, points)."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    outs = [predict(mdl, X) for mdl in ensemble.models]
    return np.array([o[0] for o in outs]), np.array([o[1] for o in outs])


def ensemble_predict(ensemble: BaggedEnsemble, x_star) -> Prediction:
    x = np.asarray(x_star, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("ensemble_predict takes one feature vector; use ensemble_predict_batch")
    Y, S = model_outputs(ensemble, x[None, :])
    return aggregate(list(zip(Y[:, 0], S[:, 0])), ensemble.config.weight_epsilon)


def ensemble_predict_batch(ensemble: BaggedEnsemble, X):
    """Aggregated ``(y_pred, sigma_pred)`` arrays for every row of X."""
    Y, S = model_outputs(ensemble, X)
    y_pred, sigma, _ = aggregate_arrays(Y, S, ensemble.config.weight_epsilon)
    return y_pred, sigma
