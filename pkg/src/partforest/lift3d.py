"""Gaussian-process regression from 2D joint positions to 3D poses.

Every output dimension gets its own zero-mean GP with an isotropic
squared-exponential kernel. Hyperparameters live in log space and are fitted
by maximizing the log marginal likelihood.
"""

from __future__ import annotations

import logging
import math
import struct
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.linalg.lapack import dpotri
from scipy.spatial.distance import cdist, pdist, squareform

from .imaging import ShapeError
from .model import FormatError, _Reader

log = logging.getLogger(__name__)

MAGIC = b"GPL1"
JITTER_STEPS = (1e-8, 1e-7, 1e-6)
_LOG_2PI = math.log(2.0 * math.pi)


class NumericalError(ArithmeticError):
    """A kernel matrix stayed indefinite after the largest jitter."""


class InitError(ValueError):
    """The objective is not finite at the initial hyperparameters."""


@dataclass(frozen=True)
class SeHyperparams:
    """Squared-exponential kernel hyperparameters, stored as logs."""

    log_signal_variance: float
    log_length_scale: float
    log_noise_variance: float

    @classmethod
    def from_values(cls, signal_variance, length_scale, noise_variance) -> "SeHyperparams":
        for name, v in (("signal_variance", signal_variance), ("length_scale", length_scale),
                        ("noise_variance", noise_variance)):
            if not (v > 0 and math.isfinite(v)):
                raise ValueError(f"{name} must be positive and finite, got {v}")
        return cls(math.log(signal_variance), math.log(length_scale), math.log(noise_variance))

    @classmethod
    def from_vector(cls, theta) -> "SeHyperparams":
        a, b, c = (float(v) for v in theta)
        return cls(a, b, c)

    def vector(self) -> np.ndarray:
        return np.array([self.log_signal_variance, self.log_length_scale, self.log_noise_variance])

    @property
    def signal_variance(self) -> float:
        return math.exp(self.log_signal_variance)

    @property
    def length_scale(self) -> float:
        return math.exp(self.log_length_scale)

    @property
    def noise_variance(self) -> float:
        return math.exp(self.log_noise_variance)


def se_kernel(x, x2, h: SeHyperparams) -> float:
    """k(x, x') = sf2 * exp(-|x - x'|^2 / (2 l^2))."""
    d = np.asarray(x, dtype=np.float64) - np.asarray(x2, dtype=np.float64)
    return h.signal_variance * math.exp(-float(d @ d) / (2.0 * h.length_scale**2))


def sq_dists(X, Z=None) -> np.ndarray:
    """Matrix of squared Euclidean distances between rows."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if Z is None:
        return squareform(pdist(X, "sqeuclidean"))
    # pairwise differences, not the |x|^2 + |z|^2 - 2 x.z expansion, so a row's
    # distances do not depend on what else is in the batch
    return cdist(X, np.atleast_2d(np.asarray(Z, dtype=np.float64)), "sqeuclidean")


def _se_from_dists(d2, h: SeHyperparams) -> np.ndarray:
    return h.signal_variance * np.exp(-d2 / (2.0 * h.length_scale**2))


def _factor(d2, h: SeHyperparams):
    """(K + sn2 I, chol, jitter, signal part) with escalating jitter."""
    kf = _se_from_dists(d2, h)
    K = kf + h.noise_variance * np.eye(len(kf))
    for jitter in (0.0,) + tuple(j * h.signal_variance for j in JITTER_STEPS):
        try:
            L = np.linalg.cholesky(K + jitter * np.eye(len(K)) if jitter else K)
        except np.linalg.LinAlgError:
            continue
        if jitter:
            log.debug("kernel matrix needed jitter %.3g", jitter)
        return K, L, jitter, kf
    raise NumericalError(
        f"kernel matrix not positive definite even with jitter {JITTER_STEPS[-1]:g} * signal variance"
    )


def kernel_matrix(X, h: SeHyperparams):
    """Return (K + sn2 I, lower Cholesky factor, jitter added to the diagonal)."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if len(X) < 1:
        raise ShapeError("kernel_matrix needs at least one input")
    K, L, jitter, _ = _factor(sq_dists(X), h)
    return K, L, jitter


def _chol_inverse(L):
    inv, info = dpotri(L, lower=1)
    if info != 0:
        raise NumericalError(f"inverse from Cholesky factor failed (info={info})")
    return np.tril(inv) + np.tril(inv, -1).T


def _lml_from_dists(d2, y, h: SeHyperparams):
    n = len(y)
    _, L, _, kf = _factor(d2, h)
    alpha = cho_solve((L, True), y)
    value = -0.5 * y @ alpha - np.log(np.diag(L)).sum() - 0.5 * n * _LOG_2PI
    # d/dtheta = 0.5 tr((alpha alpha^T - K^-1) dK/dtheta)
    W = np.outer(alpha, alpha) - _chol_inverse(L)
    grad = np.array([
        0.5 * np.sum(W * kf),
        0.5 * np.sum(W * kf * d2) / h.length_scale**2,
        0.5 * h.noise_variance * np.trace(W),
    ])
    return float(value), grad


def log_marginal_likelihood(X, y, h: SeHyperparams):
    """Log evidence of centered targets ``y`` and its gradient w.r.t. the log hyperparameters."""
    y = np.asarray(y, dtype=np.float64).ravel()
    if not np.all(np.isfinite(y)):
        raise ValueError("targets must be finite")
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if len(X) != len(y):
        raise ShapeError(f"{len(X)} inputs but {len(y)} targets")
    return _lml_from_dists(sq_dists(X), y, h)


def optimize_hyperparams(X, y, init: SeHyperparams, max_iter: int = 500, tol: float = 1e-6,
                         d2=None, history=None) -> SeHyperparams:
    """Gradient ascent on the log marginal likelihood in log-parameter space.

    Step lengths come from the Barzilai-Borwein rule and are halved until the
    objective does not decrease, so the iterates are monotone. Stops when the
    gradient's infinity norm drops below ``tol`` or after ``max_iter``
    iterations. ``history``, if a list, receives every accepted objective.
    """
    y = np.asarray(y, dtype=np.float64).ravel()
    if d2 is None:
        d2 = sq_dists(X)

    def objective(theta):
        # log-parameters beyond +-50 overflow the kernel; treat as infeasible
        if not np.all(np.abs(theta) < 50.0):
            return -np.inf, None
        try:
            with np.errstate(all="ignore"):
                value, grad = _lml_from_dists(d2, y, SeHyperparams.from_vector(theta))
        except (NumericalError, ValueError):
            return -np.inf, None
        if not (np.isfinite(value) and np.all(np.isfinite(grad))):
            return -np.inf, None
        return value, grad

    theta = init.vector()
    value, grad = objective(theta)
    if not np.isfinite(value):
        raise InitError("log marginal likelihood is not finite at the initial hyperparameters")
    if history is not None:
        history.append(value)
    step = 1e-2 / max(np.abs(grad).max(), 1e-12)
    prev = None
    for _ in range(max_iter):
        if np.abs(grad).max() < tol:
            break
        if prev is not None:
            s, g = theta - prev[0], grad - prev[1]
            sg = s @ g
            # ascent on a locally concave objective has s.g < 0
            if sg < 0:
                step = min(-(s @ s) / sg, 10.0 * step)
        for _ in range(60):
            trial = theta + step * grad
            t_value, t_grad = objective(trial)
            if np.isfinite(t_value) and t_value >= value:
                break
            step *= 0.5
        else:
            break
        prev = (theta, grad)
        theta, value, grad = trial, t_value, t_grad
        if history is not None:
            history.append(value)
    return SeHyperparams.from_vector(theta)


def default_init(X, y) -> SeHyperparams:
    """sf2 = var(y), l = median pairwise input distance, sn2 = 0.1 var(y)."""
    var = float(np.var(y))
    if var <= 0:
        var = 1.0
    d = pdist(np.atleast_2d(X))
    ell = float(np.median(d)) if len(d) and np.median(d) > 0 else 1.0
    return SeHyperparams.from_values(var, ell, 0.1 * var)


@dataclass(frozen=True)
class GpModel:
    inputs: np.ndarray  # centered, n x d
    input_mean: np.ndarray
    targets_mean: float
    alpha: np.ndarray
    chol: np.ndarray
    hyper: SeHyperparams
    jitter: float = 0.0


def fit_gp(X, y, hyper: SeHyperparams, input_mean=None) -> GpModel:
    """Condition a GP on raw inputs ``X`` and targets ``y`` with fixed hyperparameters."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64).ravel()
    mu_x = X.mean(axis=0) if input_mean is None else np.asarray(input_mean, dtype=np.float64)
    Xc = X - mu_x
    mu_y = float(y.mean())
    _, L, jitter = kernel_matrix(Xc, hyper)
    alpha = cho_solve((L, True), y - mu_y)
    return GpModel(Xc, mu_x, mu_y, alpha, L, hyper, jitter)


def _predict_many(inputs, input_mean, models, Xs):
    """Means and variances (m x n_out) for GPs sharing ``inputs``."""
    Xs = np.atleast_2d(np.asarray(Xs, dtype=np.float64)) - input_mean
    d2 = sq_dists(Xs, inputs)
    mean = np.empty((len(Xs), len(models)))
    var = np.empty_like(mean)
    for k, g in enumerate(models):
        ks = _se_from_dists(d2, g.hyper)
        # row-wise sum keeps each prediction independent of the batch it came in
        mean[:, k] = (ks * g.alpha).sum(axis=1) + g.targets_mean
        v = solve_triangular(g.chol, ks.T, lower=True)
        prior = g.hyper.signal_variance + g.hyper.noise_variance
        var[:, k] = np.maximum(prior - (v**2).sum(axis=0), np.finfo(float).tiny)
    return mean, var


def gp_predict(g: GpModel, x):
    """Predictive mean and variance (noise included) at one raw input."""
    mean, var = _predict_many(g.inputs, g.input_mean, [g], np.asarray(x, dtype=np.float64)[None, :])
    return float(mean[0, 0]), float(var[0, 0])


@dataclass(frozen=True)
class GpLifter:
    models: tuple
    output_means: np.ndarray

    @property
    def inputs(self) -> np.ndarray:
        return self.models[0].inputs

    @property
    def input_mean(self) -> np.ndarray:
        return self.models[0].input_mean

    @property
    def d_in(self) -> int:
        return self.inputs.shape[1]

    @property
    def d_out(self) -> int:
        return len(self.models)


def train_lifter(poses2d, poses3d, max_iter: int = 500, init=None) -> GpLifter:
    """Fit one GP per output dimension on shared, centered 2D inputs."""
    X = np.atleast_2d(np.asarray(poses2d, dtype=np.float64))
    Y = np.atleast_2d(np.asarray(poses3d, dtype=np.float64))
    if len(X) != len(Y):
        raise ShapeError(f"{len(X)} 2D poses but {len(Y)} 3D poses")
    if len(X) < 8:
        raise ShapeError(f"need at least 8 training poses, got {len(X)}")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(Y))):
        raise ValueError("training poses must be finite")
    mu_x = X.mean(axis=0)
    Xc = X - mu_x
    if len(np.unique(Xc, axis=0)) < len(Xc):
        warnings.warn("duplicate training inputs; kernel matrices rely on the noise term", stacklevel=2)
    d2 = sq_dists(Xc)
    models = []
    for k in range(Y.shape[1]):
        y = Y[:, k]
        mu_y = float(y.mean())
        yc = y - mu_y
        if np.ptp(yc) == 0.0:
            hyper = SeHyperparams.from_values(1.0, 1.0, 1e-6) if init is None else init
        else:
            start = default_init(Xc, yc) if init is None else init
            hyper = optimize_hyperparams(Xc, yc, start, max_iter=max_iter, d2=d2)
        K, L, jitter, _ = _factor(d2, hyper)
        alpha = cho_solve((L, True), yc)
        models.append(GpModel(Xc, mu_x, mu_y, alpha, L, hyper, jitter))
        log.debug("output %d: sf2 %.4g l %.4g sn2 %.4g", k, hyper.signal_variance, hyper.length_scale,
                  hyper.noise_variance)
    return GpLifter(tuple(models), np.array([g.targets_mean for g in models]))


def lift(lifter: GpLifter, pose2d):
    """3D mean (mm) and per-dimension predictive variance for one 2D pose or a batch."""
    x = np.asarray(pose2d, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[1] != lifter.d_in:
        raise ShapeError(f"expected {lifter.d_in} input values, got {x.shape[1]}")
    mean, var = _predict_many(lifter.inputs, lifter.input_mean, lifter.models, x)
    return (mean[0], var[0]) if single else (mean, var)


# -- serialization ---------------------------------------------------------------


def save_lifter(lifter: GpLifter, path) -> None:
    n, d_in = lifter.inputs.shape
    out = [MAGIC, struct.pack("<3I", n, d_in, lifter.d_out)]
    out.append(lifter.input_mean.astype("<f8").tobytes())
    out.append(lifter.inputs.astype("<f8").tobytes())
    for g in lifter.models:
        out.append(struct.pack("<5d", *g.hyper.vector(), g.jitter, g.targets_mean))
        out.append(g.alpha.astype("<f8").tobytes())
        out.append(g.chol.astype("<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(out))


def load_lifter(path) -> GpLifter:
    with open(path, "rb") as fh:
        r = _Reader(fh.read())
    if r.take(4) != MAGIC:
        raise FormatError("bad magic, not a lifter file", 0)
    n, d_in, d_out = r.unpack("<3I")
    if n < 1 or d_out < 1:
        raise FormatError(f"empty lifter (n={n}, d_out={d_out})", 4)
    input_mean = r.floats(d_in)
    inputs = r.floats(n * d_in).reshape(n, d_in)
    models = []
    for _ in range(d_out):
        a, b, c, jitter, mu_y = r.unpack("<5d")
        alpha = r.floats(n)
        chol = r.floats(n * n).reshape(n, n)
        models.append(GpModel(inputs, input_mean, mu_y, alpha, chol, SeHyperparams(a, b, c), jitter))
    if r.pos != len(r.data):
        raise FormatError("trailing bytes after lifter", r.pos)
    return GpLifter(tuple(models), np.array([g.targets_mean for g in models]))
