"""Gaussian process regression with a Matern-5/2 ARD kernel and constant mean.

The constant-basis coefficient is profiled out by generalized least squares at
every likelihood evaluation, so the optimizer only sees the log length scales,
log signal variance and log noise variance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import linalg, optimize
from scipy.linalg import lapack
from scipy.spatial.distance import cdist

from .errors import (
    FitFailureError,
    InputDimensionError,
    InsufficientDataError,
    InvalidHyperparameterError,
    NonPositiveDefiniteError,
)

SQRT5 = math.sqrt(5.0)
LOG_2PI = math.log(2.0 * math.pi)
MODEL_FORMAT = "sohbag.gpr"
MODEL_FORMAT_VERSION = 1


@dataclass(frozen=True)
class GPRHyperparams:
    """Kernel and noise hyperparameters.

    A single length scale applied to multi-dimensional inputs means isotropic
    (non-ARD) mode.
    """

    length_scales: tuple[float, ...]
    signal_variance: float
    noise_variance: float
    basis_coefficient: float = 0.0

    def __post_init__(self):
        ls = tuple(float(v) for v in np.atleast_1d(self.length_scales))
        object.__setattr__(self, "length_scales", ls)
        if not ls or any(not v > 0 for v in ls):
            raise InvalidHyperparameterError(f"length scales must be positive, got {ls}")
        if not self.signal_variance > 0 or not self.noise_variance > 0:
            raise InvalidHyperparameterError("signal and noise variance must be positive")

    def log_params(self) -> np.ndarray:
        return np.log([*self.length_scales, self.signal_variance, self.noise_variance])

    @classmethod
    def from_log(cls, theta, beta: float = 0.0) -> GPRHyperparams:
        theta = np.asarray(theta, dtype=np.float64)
        return cls(tuple(np.exp(theta[:-2])), float(np.exp(theta[-2])), float(np.exp(theta[-1])), float(beta))


def _scales(hp: GPRHyperparams, d: int) -> np.ndarray:
    ls = np.asarray(hp.length_scales)
    if len(ls) == 1:
        return np.full(d, ls[0])
    if len(ls) != d:
        raise InputDimensionError(f"{len(ls)} length scales for {d}-dimensional inputs")
    return ls


def matern52(x, x_prime, hp: GPRHyperparams) -> float:
    """sigma_f^2 (1 + sqrt5 r + 5 r^2/3) exp(-sqrt5 r), r^2 = sum_d ((x_d - x'_d)/l_d)^2."""
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    x_prime = np.atleast_1d(np.asarray(x_prime, dtype=np.float64))
    if x.shape != x_prime.shape:
        raise InputDimensionError("x and x_prime differ in dimension")
    ls = _scales(hp, len(x))
    r = math.sqrt(float(np.sum(((x - x_prime) / ls) ** 2)))
    return hp.signal_variance * (1.0 + SQRT5 * r + 5.0 * r * r / 3.0) * math.exp(-SQRT5 * r)


def _sq_dist(A: np.ndarray, B: np.ndarray, ls: np.ndarray) -> np.ndarray:
    return cdist(A / ls, B / ls, "sqeuclidean")


def _matern_from_r(r: np.ndarray, sf2: float) -> np.ndarray:
    return sf2 * (1.0 + SQRT5 * r + (5.0 / 3.0) * r * r) * np.exp(-SQRT5 * r)


def kernel_matrix(A, B, hp: GPRHyperparams) -> np.ndarray:
    """Matern-5/2 cross-covariance between the rows of A and B."""
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    B = np.atleast_2d(np.asarray(B, dtype=np.float64))
    if A.shape[1] != B.shape[1]:
        raise InputDimensionError("input dimensions differ")
    ls = _scales(hp, A.shape[1])
    return _matern_from_r(np.sqrt(_sq_dist(A, B, ls)), hp.signal_variance)


JITTER_START = 1e-10
JITTER_RETRIES = 3


def _cholesky(A: np.ndarray, jitter: float | None = None) -> tuple[np.ndarray, float]:
    """Lower Cholesky factor, escalating diagonal jitter on failure.

    With ``jitter`` given the ladder is skipped and exactly that value is used.
    """
    if jitter is not None:
        ladder = [jitter]
    else:
        base = JITTER_START * float(np.mean(np.diag(A)))
        ladder = [0.0] + [base * 10.0**k for k in range(JITTER_RETRIES)]
    n = len(A)
    for jit in ladder:
        M = A + jit * np.eye(n) if jit else A
        L, info = lapack.dpotrf(M, lower=1, clean=1, overwrite_a=0)
        if info == 0:
            return L, jit
    raise NonPositiveDefiniteError(f"Cholesky failed after jitter {ladder[-1]:.3g}")


@dataclass
class _Evaluation:
    value: float
    grad: np.ndarray
    L: np.ndarray
    alpha: np.ndarray
    beta: float
    jitter: float


def _evaluate(theta, X, y, *, need_grad: bool = True, jitter=None) -> _Evaluation:
    theta = np.asarray(theta, dtype=np.float64)
    n, d = X.shape
    ls = np.exp(theta[:-2])
    if len(ls) == 1:
        ls = np.full(d, ls[0])
    sf2, sn2 = math.exp(theta[-2]), math.exp(theta[-1])

    xs = X / ls
    r2 = cdist(xs, xs, "sqeuclidean")
    r = np.sqrt(r2)
    e = np.exp(-SQRT5 * r)
    K = sf2 * (1.0 + SQRT5 * r + (5.0 / 3.0) * r2) * e
    A = K.copy()
    A[np.diag_indices(n)] += sn2
    L, jit = _cholesky(A, jitter)

    ones = np.ones(n)
    ainv_1 = linalg.cho_solve((L, True), ones)
    ainv_y = linalg.cho_solve((L, True), y)
    beta = float(ones @ ainv_y / (ones @ ainv_1))
    alpha = ainv_y - beta * ainv_1
    resid = y - beta
    logdet = 2.0 * np.sum(np.log(np.diag(L)))
    value = -0.5 * logdet - 0.5 * float(resid @ alpha) - 0.5 * n * LOG_2PI

    grad = np.zeros_like(theta)
    if need_grad:
        # dL/dθ = ½ tr((ααᵀ - A⁻¹) dA/dθ); beta is at its optimum so it drops out
        Ainv, info = lapack.dpotri(L, lower=1)
        if info != 0:
            raise NonPositiveDefiniteError("inverse from Cholesky factor failed")
        # only the lower triangle of dpotri's output is valid
        W = np.tril(np.outer(alpha, alpha) - Ainv)
        W *= 2.0
        W[np.diag_indices(n)] *= 0.5
        grad[-2] = 0.5 * np.vdot(W, K)
        grad[-1] = 0.5 * sn2 * np.trace(W)
        W *= (1.0 + SQRT5 * r) * e
        W *= sf2 * (5.0 / 3.0)
        if len(theta) - 2 == 1:
            grad[0] = 0.5 * np.vdot(W, r2)
        else:
            for k in range(d):
                grad[k] = 0.5 * np.vdot(W, cdist(xs[:, k:k + 1], xs[:, k:k + 1], "sqeuclidean"))
    return _Evaluation(float(value), grad, L, alpha, beta, jit)


def log_marginal_likelihood(hp: GPRHyperparams, X, y) -> tuple[float, np.ndarray]:
    """Log evidence with profiled constant mean.

    Returns ``(value, gradient)``, the gradient taken with respect to
    ``hp.log_params()`` (log length scales, log signal var, log noise var).
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64)
    if len(y) != len(X) or len(y) < 1:
        raise InsufficientDataError("X and y must have the same, non-zero number of rows")
    _scales(hp, X.shape[1])
    ev = _evaluate(hp.log_params(), X, y)
    return ev.value, ev.grad


@dataclass(frozen=True)
class GPOptions:
    n_starts: int = 4
    seed: int = 0
    bounds: tuple[float, float] = (1e-6, 1e6)
    ard: bool = True
    standardize: bool = True
    predictive_noise: bool = False
    max_iter: int = 1000
    gtol: float = 1e-8
    ftol: float = 1e-13

    def to_dict(self) -> dict:
        return {**self.__dict__, "bounds": list(self.bounds)}

    @classmethod
    def from_dict(cls, d: dict) -> GPOptions:
        return cls(**{**d, "bounds": tuple(d["bounds"])})


@dataclass(frozen=True, eq=False)
class GPRModel:
    """A fitted (or directly constructed) GP; immutable.

    ``train_inputs`` are stored as given; with standardization the kernel sees
    ``(x - input_mean) / input_scale`` and the length scales live in those
    units.
    """

    hyperparams: GPRHyperparams
    train_inputs: np.ndarray
    train_targets: np.ndarray
    input_mean: np.ndarray
    input_scale: np.ndarray
    chol: np.ndarray
    alpha: np.ndarray
    jitter: float
    log_likelihood: float
    predictive_noise: bool = False
    diagnostics: tuple = field(default=(), compare=False)

    @property
    def dim(self) -> int:
        return self.train_inputs.shape[1]

    def transform(self, X) -> np.ndarray:
        return (X - self.input_mean) / self.input_scale

    @classmethod
    def build(cls, hp: GPRHyperparams, X, y, *, input_mean=None, input_scale=None,
              predictive_noise=False, jitter=None, diagnostics=()) -> GPRModel:
        """Factorize for given hyperparameters; beta is re-profiled from the data."""
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        y = np.asarray(y, dtype=np.float64)
        d = X.shape[1]
        mu = np.zeros(d) if input_mean is None else np.asarray(input_mean, dtype=np.float64)
        sc = np.ones(d) if input_scale is None else np.asarray(input_scale, dtype=np.float64)
        _scales(hp, d)
        ev = _evaluate(hp.log_params(), (X - mu) / sc, y, need_grad=False, jitter=jitter)
        arrays = [X.copy(), y.copy(), mu.copy(), sc.copy(), ev.L, ev.alpha]
        for a in arrays:
            a.setflags(write=False)
        return cls(replace(hp, basis_coefficient=ev.beta), *arrays, ev.jitter, ev.value,
                   bool(predictive_noise), tuple(diagnostics))

    def to_dict(self) -> dict:
        hp = self.hyperparams
        return {
            "format": MODEL_FORMAT,
            "format_version": MODEL_FORMAT_VERSION,
            "length_scales": list(hp.length_scales),
            "signal_variance": hp.signal_variance,
            "noise_variance": hp.noise_variance,
            "basis_coefficient": hp.basis_coefficient,
            "input_mean": self.input_mean.tolist(),
            "input_scale": self.input_scale.tolist(),
            "train_inputs": self.train_inputs.tolist(),
            "train_targets": self.train_targets.tolist(),
            "jitter": self.jitter,
            "log_likelihood": self.log_likelihood,
            "predictive_noise": self.predictive_noise,
        }

    @classmethod
    def from_dict(cls, d: dict) -> GPRModel:
        if d.get("format") != MODEL_FORMAT or d.get("format_version") != MODEL_FORMAT_VERSION:
            raise ValueError(f"unsupported model format {d.get('format')!r} v{d.get('format_version')}")
        hp = GPRHyperparams(tuple(d["length_scales"]), d["signal_variance"], d["noise_variance"])
        X = np.array(d["train_inputs"], dtype=np.float64).reshape(len(d["train_targets"]), -1)
        return cls.build(hp, X, d["train_targets"], input_mean=d["input_mean"], input_scale=d["input_scale"],
                         predictive_noise=d["predictive_noise"], jitter=d["jitter"])


def _check_finite_rows(X, y):
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise ValueError("inputs and responses must be finite")


def fit(X, y, opts: GPOptions | None = None) -> GPRModel:
    """Maximize the log marginal likelihood by multi-start L-BFGS-B in log space.

    Start 0 uses per-dimension input spread for the length scales, var(y) for
    the signal variance and 0.1*var(y) for the noise; the remaining starts are
    seeded log-uniform perturbations of up to one decade. The best start wins.
    """
    opts = opts or GPOptions()
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64)
    if X.shape[0] != len(y):
        raise InputDimensionError("X and y row counts differ")
    _check_finite_rows(X, y)
    if len(np.unique(X, axis=0)) < 2:
        raise InsufficientDataError("need at least 2 distinct input rows")
    n, d = X.shape

    if opts.standardize:
        mu = X.mean(axis=0)
        sc = X.std(axis=0)
        sc[sc == 0] = 1.0
    else:
        mu, sc = np.zeros(d), np.ones(d)
    Z = (X - mu) / sc

    lo, hi = math.log(opts.bounds[0]), math.log(opts.bounds[1])
    spread = Z.std(axis=0)
    spread[spread == 0] = 1.0
    if not opts.ard:
        spread = np.array([float(np.mean(spread))])
    vy = float(np.var(y))
    if vy == 0:
        vy = opts.bounds[0]
    theta0 = np.clip(np.log([*spread, vy, 0.1 * vy]), lo, hi)
    rng = np.random.default_rng(opts.seed)
    starts = [theta0]
    for _ in range(max(opts.n_starts, 1) - 1):
        starts.append(np.clip(theta0 + rng.uniform(-math.log(10), math.log(10), size=len(theta0)), lo, hi))

    def objective(theta):
        try:
            ev = _evaluate(theta, Z, y)
        except NonPositiveDefiniteError:
            return 1e25, np.zeros_like(theta)
        if not math.isfinite(ev.value):
            return 1e25, np.zeros_like(theta)
        return -ev.value, -ev.grad

    best, diagnostics = None, []
    for s, start in enumerate(starts):
        try:
            res = optimize.minimize(
                objective, start, jac=True, method="L-BFGS-B", bounds=[(lo, hi)] * len(start),
                options={"maxiter": opts.max_iter, "gtol": opts.gtol, "ftol": opts.ftol},
            )
        except (ValueError, FloatingPointError, np.linalg.LinAlgError) as exc:
            diagnostics.append({"start": s, "error": str(exc)})
            continue
        value = -float(res.fun)
        ok = math.isfinite(value) and res.fun < 1e24
        diagnostics.append({"start": s, "lml": value if ok else None, "nit": int(res.nit),
                            "message": str(res.message)})
        if ok and (best is None or value > best[0]):
            best = (value, res.x)
    if best is None:
        raise FitFailureError("no start produced a finite likelihood", diagnostics)
    hp = GPRHyperparams.from_log(best[1])
    return GPRModel.build(hp, X, y, input_mean=mu, input_scale=sc,
                          predictive_noise=opts.predictive_noise, diagnostics=tuple(diagnostics))


def predict(model: GPRModel, x_star, *, include_noise: bool | None = None):
    """Posterior mean and standard deviation.

    A 1-D ``x_star`` is one point and gives floats; a 2-D array gives arrays.
    The latent variance is used unless observation noise is requested.
    """
    x = np.asarray(x_star, dtype=np.float64)
    single = x.ndim == 1
    Xs = np.atleast_2d(x)
    if Xs.shape[1] != model.dim:
        raise InputDimensionError(f"expected {model.dim} features, got {Xs.shape[1]}")
    hp = model.hyperparams
    Zs = model.transform(Xs)
    Z = model.transform(model.train_inputs)
    Ks = kernel_matrix(Z, Zs, hp)
    mean = hp.basis_coefficient + Ks.T @ model.alpha
    v = linalg.solve_triangular(model.chol, Ks, lower=True, check_finite=False)
    var = hp.signal_variance - np.sum(v * v, axis=0)
    noise = model.predictive_noise if include_noise is None else include_noise
    if noise:
        var = var + hp.noise_variance
    std = np.sqrt(np.maximum(var, 0.0))
    if single:
        return float(mean[0]), float(std[0])
    return mean, std
