"""Exact Gaussian-process regression with an ARD squared-exponential kernel.

Hyperparameters are handled in log space throughout, so positivity is
structural. The parameter vector layout is::

    [log signal_variance, log lengthscale_1, ..., log lengthscale_d, log noise_variance]
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, optimize
from scipy.spatial.distance import cdist
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.exceptions import ConvergenceWarning
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .exceptions import NumericalFailure

LOG_2PI = np.log(2.0 * np.pi)

# Log-space box for the optimizer; wide enough to never bind on sane data.
LOG_BOUNDS = (-25.0, 15.0)

JITTER_START = 1e-10
JITTER_STOP = 1e-4


@dataclass(frozen=True, eq=False)
class KernelHyper:
    """Signal variance, per-dimension lengthscales and noise variance."""

    signal_variance: float
    lengthscales: np.ndarray
    noise_variance: float

    def __post_init__(self):
        ls = np.atleast_1d(np.asarray(self.lengthscales, dtype=float)).copy()
        ls.setflags(write=False)
        object.__setattr__(self, "lengthscales", ls)
        object.__setattr__(self, "signal_variance", float(self.signal_variance))
        object.__setattr__(self, "noise_variance", float(self.noise_variance))
        values = np.concatenate([[self.signal_variance, self.noise_variance], ls])
        if not np.all(np.isfinite(values)) or np.any(values <= 0):
            raise ValueError(f"kernel hyperparameters must be finite and positive, got {self}")

    @property
    def n_dims(self) -> int:
        return self.lengthscales.shape[0]

    def to_log(self) -> np.ndarray:
        return np.log(np.concatenate([[self.signal_variance], self.lengthscales, [self.noise_variance]]))

    @classmethod
    def from_log(cls, theta) -> KernelHyper:
        theta = np.asarray(theta, dtype=float)
        return cls(np.exp(theta[0]), np.exp(theta[1:-1]), np.exp(theta[-1]))

    @classmethod
    def initial(cls, inputs, targets) -> KernelHyper:
        """Data-driven starting point: input std per dimension, target variance.

        Dimensions with zero spread (e.g. a latent slot shared by every row)
        get a unit lengthscale.
        """
        inputs = np.atleast_2d(np.asarray(inputs, dtype=float))
        targets = np.asarray(targets, dtype=float)
        ls = inputs.std(axis=0) if len(inputs) > 1 else np.ones(inputs.shape[1])
        ls = np.where(ls > 1e-8, ls, 1.0)
        var = float(targets.var()) if targets.size > 1 else 0.0
        if var <= 1e-12:
            var = max(float(np.mean(targets**2)), 1e-6) if targets.size else 1.0
        return cls(var, ls, 0.1 * var)

    def to_dict(self) -> dict:
        return {
            "signal_variance": self.signal_variance,
            "lengthscales": self.lengthscales.tolist(),
            "noise_variance": self.noise_variance,
        }

    @classmethod
    def from_dict(cls, d: dict) -> KernelHyper:
        return cls(d["signal_variance"], d["lengthscales"], d["noise_variance"])

    def __repr__(self):
        return (
            f"KernelHyper(signal_variance={self.signal_variance:.4g}, "
            f"lengthscales={np.array2string(self.lengthscales, precision=4)}, "
            f"noise_variance={self.noise_variance:.4g})"
        )


def _check_dims(x, hyper: KernelHyper, what="input"):
    if x.shape[-1] != hyper.n_dims:
        raise ValueError(f"{what} has dimension {x.shape[-1]}, kernel expects {hyper.n_dims}")


def kernel_eval(x1, x2, hyper: KernelHyper) -> float:
    """ARD squared-exponential covariance between two input vectors."""
    x1 = np.atleast_1d(np.asarray(x1, dtype=float))
    x2 = np.atleast_1d(np.asarray(x2, dtype=float))
    _check_dims(x1, hyper)
    _check_dims(x2, hyper)
    r = (x1 - x2) / hyper.lengthscales
    return float(hyper.signal_variance * np.exp(-0.5 * np.dot(r, r)))


def kernel_matrix(X1, X2, hyper: KernelHyper) -> np.ndarray:
    X1 = np.atleast_2d(X1)
    X2 = np.atleast_2d(X2)
    _check_dims(X1, hyper)
    _check_dims(X2, hyper)
    d2 = cdist(X1 / hyper.lengthscales, X2 / hyper.lengthscales, "sqeuclidean")
    return hyper.signal_variance * np.exp(-0.5 * d2)


def stable_cholesky(A: np.ndarray) -> tuple[np.ndarray, float]:
    """Lower Cholesky factor of ``A``, adding escalating diagonal jitter if needed.

    Returns the factor and the jitter that was added (0.0 if none).
    """
    try:
        return linalg.cholesky(A, lower=True, check_finite=False), 0.0
    except linalg.LinAlgError:
        pass
    n = A.shape[0]
    scale = np.trace(A) / n if n else 1.0
    if not np.isfinite(scale) or scale <= 0:
        raise NumericalFailure(f"kernel matrix has non-positive or non-finite trace ({scale})")
    jitter = JITTER_START
    while jitter <= JITTER_STOP * (1 + 1e-9):
        try:
            L = linalg.cholesky(A + jitter * scale * np.eye(n), lower=True, check_finite=False)
            return L, jitter * scale
        except linalg.LinAlgError:
            jitter *= 10.0
    raise NumericalFailure(
        f"Cholesky failed even with jitter up to {JITTER_STOP:g}*trace/n "
        f"(smallest attempted jitter {JITTER_START:g}*trace/n = {JITTER_START * scale:.3g})"
    )


def _mll_terms(hyper: KernelHyper, X, y):
    n = y.shape[0]
    K = kernel_matrix(X, X, hyper)
    Ky = K + hyper.noise_variance * np.eye(n)
    L, _ = stable_cholesky(Ky)
    alpha = linalg.cho_solve((L, True), y, check_finite=False)
    mll = -0.5 * y @ alpha - np.log(np.diag(L)).sum() - 0.5 * n * LOG_2PI

    # d mll / d theta = 0.5 tr((alpha alpha^T - Ky^-1) dKy/dtheta)
    Kinv = linalg.cho_solve((L, True), np.eye(n), check_finite=False)
    W = np.outer(alpha, alpha) - Kinv
    WK = W * K
    grad = np.empty(hyper.n_dims + 2)
    grad[0] = 0.5 * WK.sum()
    for j in range(hyper.n_dims):
        col = X[:, j] / hyper.lengthscales[j]
        D = (col[:, None] - col[None, :]) ** 2
        grad[1 + j] = 0.5 * np.sum(WK * D)
    grad[-1] = 0.5 * hyper.noise_variance * np.trace(W)
    return float(mll), grad, WK


def marginal_log_likelihood(hyper: KernelHyper, inputs, targets) -> tuple[float, np.ndarray]:
    """Log evidence of ``targets`` under a zero-mean GP and its gradient.

    The gradient is taken with respect to ``hyper.to_log()``. An empty dataset
    returns ``(0.0, empty array)``.
    """
    y = np.asarray(targets, dtype=float).ravel()
    n = y.shape[0]
    if n == 0:
        return 0.0, np.empty(0)
    X = np.asarray(inputs, dtype=float).reshape(n, -1)
    _check_dims(X, hyper)
    mll, grad, _ = _mll_terms(hyper, X, y)
    return mll, grad


def mll_input_gradient(hyper: KernelHyper, inputs, targets, cols) -> tuple[float, np.ndarray, np.ndarray]:
    """Marginal log likelihood, its log-hyperparameter gradient, and its gradient
    with respect to the input columns ``cols`` (shape ``n x len(cols)``)."""
    y = np.asarray(targets, dtype=float).ravel()
    X = np.asarray(inputs, dtype=float).reshape(len(y), -1)
    _check_dims(X, hyper)
    mll, grad, P = _mll_terms(hyper, X, y)
    row = P.sum(axis=1)
    gx = np.empty((len(y), len(cols)))
    for i, j in enumerate(cols):
        gx[:, i] = -(row * X[:, j] - P @ X[:, j]) / hyper.lengthscales[j] ** 2
    return mll, grad, gx


@dataclass(frozen=True, eq=False)
class GPModel:
    """A conditioned GP: hyperparameters, training data and cached factorization.

    Immutable after construction; use :func:`GPModel.build` to create one.
    """

    hyper: KernelHyper
    inputs: np.ndarray
    targets: np.ndarray
    chol: np.ndarray
    alpha: np.ndarray
    jitter: float = 0.0
    converged: bool = True
    mll_trace: tuple = field(default=())

    @classmethod
    def build(cls, hyper: KernelHyper, inputs, targets, **info) -> GPModel:
        y = np.asarray(targets, dtype=float).ravel().copy()
        X = np.asarray(inputs, dtype=float).reshape(len(y), -1).copy()
        _check_dims(X, hyper)
        Ky = kernel_matrix(X, X, hyper) + hyper.noise_variance * np.eye(len(y))
        L, jitter = stable_cholesky(Ky)
        alpha = linalg.cho_solve((L, True), y, check_finite=False)
        for arr in (X, y, L, alpha):
            arr.setflags(write=False)
        return cls(hyper, X, y, L, alpha, jitter, **info)

    @property
    def n_inputs(self) -> int:
        return self.inputs.shape[1]

    def log_likelihood(self) -> float:
        return marginal_log_likelihood(self.hyper, self.inputs, self.targets)[0]

    def to_dict(self) -> dict:
        return {
            "hyper": self.hyper.to_dict(),
            "inputs": self.inputs.tolist(),
            "targets": self.targets.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> GPModel:
        n_in = len(d["hyper"]["lengthscales"])
        X = np.asarray(d["inputs"], dtype=float).reshape(-1, n_in)
        return cls.build(KernelHyper.from_dict(d["hyper"]), X, d["targets"])


def gp_fit(inputs, targets, init: KernelHyper | None = None, max_iter: int = 200, gtol: float = 1e-6) -> GPModel:
    """Fit hyperparameters by maximizing the marginal likelihood with L-BFGS-B.

    The best point seen is returned, so the result never has a lower marginal
    likelihood than ``init``. If the optimizer stops without meeting ``gtol``
    the model carries ``converged=False`` and a ``ConvergenceWarning`` is issued.
    """
    y = np.asarray(targets, dtype=float).ravel()
    if y.size == 0:
        raise ValueError("gp_fit needs at least one observation")
    X = np.asarray(inputs, dtype=float).reshape(len(y), -1)
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise ValueError("gp_fit received non-finite data")
    if init is None:
        init = KernelHyper.initial(X, y)
    _check_dims(X, init)

    theta0 = np.clip(init.to_log(), *LOG_BOUNDS)
    best = {"theta": theta0, "f": np.inf}

    def objective(theta):
        try:
            f, g = marginal_log_likelihood(KernelHyper.from_log(theta), X, y)
        except NumericalFailure:
            return 1e25, np.zeros_like(theta)
        if -f < best["f"]:
            best["theta"], best["f"] = theta.copy(), -f
        return -f, -g

    f0, _ = objective(theta0)
    trace = [-f0]

    def record(intermediate_result):
        trace.append(-float(intermediate_result.fun))

    res = optimize.minimize(
        objective,
        theta0,
        jac=True,
        method="L-BFGS-B",
        bounds=[LOG_BOUNDS] * len(theta0),
        callback=record,
        options={"maxiter": max_iter, "gtol": gtol, "ftol": 1e-12},
    )
    converged = bool(res.success)
    if not converged:
        warnings.warn(f"GP hyperparameter fit did not converge: {res.message}", ConvergenceWarning, stacklevel=2)
    return GPModel.build(
        KernelHyper.from_log(best["theta"]), X, y, converged=converged, mll_trace=tuple(trace)
    )


def gp_predict_batch(model: GPModel, X_star) -> tuple[np.ndarray, np.ndarray]:
    """Posterior mean and latent-function variance at each row of ``X_star``."""
    X_star = np.atleast_2d(np.asarray(X_star, dtype=float))
    _check_dims(X_star, model.hyper, "query")
    Ks = kernel_matrix(X_star, model.inputs, model.hyper)
    mean = Ks @ model.alpha
    v = linalg.solve_triangular(model.chol, Ks.T, lower=True, check_finite=False)
    var = model.hyper.signal_variance - np.einsum("ij,ij->j", v, v)
    return mean, np.maximum(var, 0.0)


def gp_predict(model: GPModel, x_star) -> tuple[float, float]:
    """Posterior mean and variance of the latent function at a single input.

    The variance excludes observation noise and is clipped at zero.
    """
    x_star = np.atleast_1d(np.asarray(x_star, dtype=float))
    if x_star.ndim != 1:
        raise ValueError("gp_predict expects a single input vector")
    mean, var = gp_predict_batch(model, x_star[None, :])
    return float(mean[0]), float(var[0])


class ARDGaussianProcess(RegressorMixin, BaseEstimator):
    """Scikit-learn style wrapper around :func:`gp_fit` / :func:`gp_predict_batch`.

    Parameters
    ----------
    optimize : bool
        Fit hyperparameters by marginal likelihood; otherwise use the initial values.
    signal_variance, lengthscales, noise_variance : optional
        Initial hyperparameters. Missing values come from :meth:`KernelHyper.initial`.
    max_iter, gtol : optimizer controls.
    """

    def __init__(
        self,
        optimize=True,
        signal_variance=None,
        lengthscales=None,
        noise_variance=None,
        max_iter=200,
        gtol=1e-6,
    ):
        self.optimize = optimize
        self.signal_variance = signal_variance
        self.lengthscales = lengthscales
        self.noise_variance = noise_variance
        self.max_iter = max_iter
        self.gtol = gtol

    def _init_hyper(self, X, y) -> KernelHyper:
        default = KernelHyper.initial(X, y)
        return KernelHyper(
            default.signal_variance if self.signal_variance is None else self.signal_variance,
            default.lengthscales if self.lengthscales is None else np.broadcast_to(self.lengthscales, (X.shape[1],)),
            default.noise_variance if self.noise_variance is None else self.noise_variance,
        )

    def fit(self, X, y):
        X, y = check_X_y(X, y, y_numeric=True)
        init = self._init_hyper(X, y)
        if self.optimize:
            self.model_ = gp_fit(X, y, init, max_iter=self.max_iter, gtol=self.gtol)
        else:
            self.model_ = GPModel.build(init, X, y)
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X, return_std=False, return_var=False):
        check_is_fitted(self, "model_")
        X = check_array(X)
        mean, var = gp_predict_batch(self.model_, X)
        if return_var:
            return mean, var
        if return_std:
            return mean, np.sqrt(var)
        return mean

    def log_marginal_likelihood(self) -> float:
        check_is_fitted(self, "model_")
        return self.model_.log_likelihood()

