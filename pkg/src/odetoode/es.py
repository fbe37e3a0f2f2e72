"""Gaussian-smoothing ES gradients and stochastic Riemannian ascent.

The optimizer maximizes. Orthogonal and Stiefel blocks move by
``X <- exp(alpha A) X`` with the skew direction ``A = G X^T - X G^T``; the
bias and the symmetric generator matrices move additively.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .exceptions import DimensionError, EstimatorError, ManifoldDriftError
from .flows import BLOCKS, ThetaParams
from .grad import ThetaGradient
from .linalg import expm_skew, orthogonality_defect, spectral_norm, stiefel_defect

DRIFT_TOL = 1e-8
SCHEDULES = ("constant", "inverse_sqrt")


@dataclass(frozen=True)
class ESConfig:
    sigma: float = 0.1
    perturbations: int = 200
    schedule: str = "constant"
    step_size: float = 0.01
    seed: int = 0
    antithetic: bool = False
    norm_bound: float | None = None  # D: flag iterations with ||N||_2 or ||Q||_2 >= D
    bias_bound: float | None = None  # D_b: flag iterations with ||b||_2 >= D_b

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if int(self.perturbations) != self.perturbations or self.perturbations < 1:
            raise ValueError("perturbations must be a positive integer")
        if self.antithetic and self.perturbations % 2:
            raise ValueError("antithetic sampling needs an even number of perturbations")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"schedule must be one of {SCHEDULES}")
        if not self.step_size > 0:
            raise ValueError("step_size must be positive")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")

    def alpha(self, tau):
        """Step size for iteration ``tau >= 1``."""
        if self.schedule == "inverse_sqrt":
            return tau ** -0.5
        return self.step_size


def flat_length(dims):
    d, n, m = dims
    return n * d + m * n + n + 3 * n * n


def _block_shapes(dims):
    d, n, m = dims
    return {"omega1": (n, d), "omega2": (m, n), "bias": (n,),
            "n_mat": (n, n), "q": (n, n), "w0": (n, n)}


def flatten(theta):
    """Concatenate blocks in the order omega1, omega2, bias, n_mat, q, w0."""
    return np.concatenate([np.ravel(getattr(theta, name)) for name in BLOCKS])


def unflatten(vec, dims, cls=ThetaParams):
    """Inverse of :func:`flatten`; a leading batch axis is carried through.

    No manifold validation happens here: perturbed parameters are meant to be
    evaluated off the manifold.
    """
    vec = np.asarray(vec, dtype=np.float64)
    if vec.shape[-1] != flat_length(dims):
        raise DimensionError(f"flat vector has length {vec.shape[-1]}, expected {flat_length(dims)}")
    lead = vec.shape[:-1]
    out = {}
    start = 0
    for name, shape in _block_shapes(dims).items():
        size = math.prod(shape)
        out[name] = np.ascontiguousarray(vec[..., start:start + size]).reshape(lead + shape)
        start += size
    return cls(**out)


def perturbations(seed, iteration, count, dim):
    """Standard normal perturbations keyed by ``(seed, iteration)``.

    Row ``w`` is fixed by the key alone, independent of evaluation order.
    """
    rng = np.random.default_rng([seed, iteration])
    return rng.standard_normal((count, dim))


def _evaluate(evaluator, points, vectorized):
    if vectorized:
        values = np.asarray(evaluator(points), dtype=np.float64)
    else:
        values = np.array([evaluator(p) for p in points], dtype=np.float64)
    bad = np.nonzero(~np.isfinite(values))[0]
    if bad.size:
        raise EstimatorError(f"objective is not finite at perturbation {bad[0]}", index=int(bad[0]))
    return values


def es_terms(evaluator, theta_flat, cfg, iteration=0, vectorized=False):
    """Per-perturbation terms whose mean is the ES gradient estimate.

    Plain sampling yields ``F(theta + sigma eps_w) eps_w / sigma``; antithetic
    sampling pairs ``+-eps_w`` and yields ``(F+ - F-) eps_w / (2 sigma)``.
    """
    theta_flat = np.asarray(theta_flat, dtype=np.float64)
    count = cfg.perturbations // 2 if cfg.antithetic else cfg.perturbations
    eps = perturbations(cfg.seed, iteration, count, theta_flat.size)
    if cfg.antithetic:
        points = np.concatenate([theta_flat + cfg.sigma * eps, theta_flat - cfg.sigma * eps])
        values = _evaluate(evaluator, points, vectorized)
        diff = values[:count] - values[count:]
        return diff[:, None] * eps / (2.0 * cfg.sigma)
    values = _evaluate(evaluator, theta_flat + cfg.sigma * eps, vectorized)
    return values[:, None] * eps / cfg.sigma


def es_gradient(evaluator, theta_flat, cfg, iteration=0, vectorized=False):
    """Monte-Carlo estimate of the gradient of the Gaussian-smoothed objective."""
    return es_terms(evaluator, theta_flat, cfg, iteration, vectorized).mean(axis=0)


@dataclass(frozen=True)
class RiemannianGradient:
    """Skew blocks for omega1, omega2, w0; bias as is; symmetric n_mat, q."""

    omega1: np.ndarray
    omega2: np.ndarray
    bias: np.ndarray
    n_mat: np.ndarray
    q: np.ndarray
    w0: np.ndarray

    def blocks(self):
        return {name: getattr(self, name) for name in BLOCKS}

    def sq_norm(self):
        return float(sum(np.sum(b * b) for b in self.blocks().values()))


def tangent_skew(grad, point):
    """``G X^T - X G^T``: the skew direction for a left-multiplicative update."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != point.shape:
        raise DimensionError(f"gradient {grad.shape} does not match point {point.shape}")
    return grad @ point.T - point @ grad.T


def riemannian_project(euclid, theta):
    return RiemannianGradient(
        omega1=tangent_skew(euclid.omega1, theta.omega1),
        omega2=tangent_skew(euclid.omega2, theta.omega2),
        bias=np.asarray(euclid.bias, dtype=np.float64).copy(),
        n_mat=0.5 * (euclid.n_mat + euclid.n_mat.T),
        q=0.5 * (euclid.q + euclid.q.T),
        w0=tangent_skew(euclid.w0, theta.w0),
    )


def rotate(point, skew, alpha, defect=stiefel_defect):
    """``exp(alpha A) X`` with a drift check on the result."""
    out = expm_skew(alpha * skew) @ point
    err = float(defect(out))
    if err > DRIFT_TOL:
        raise ManifoldDriftError(f"manifold defect {err:.3e} after update")
    return out


def srgd_step(theta, rgrad, alpha):
    """One Riemannian ascent step of size ``alpha``."""
    return ThetaParams(
        omega1=rotate(theta.omega1, rgrad.omega1, alpha),
        omega2=rotate(theta.omega2, rgrad.omega2, alpha),
        bias=theta.bias + alpha * rgrad.bias,
        n_mat=theta.n_mat + alpha * rgrad.n_mat,
        q=theta.q + alpha * rgrad.q,
        w0=rotate(theta.w0, rgrad.w0, alpha, defect=orthogonality_defect),
    )


@dataclass
class TrainingHistory:
    """Per-iteration records of an ES run.

    ``objective[t]`` and ``grad_sq_norm[t]`` are measured at ``theta^(t)``;
    ``final_objective`` is ``F`` after the last update.
    """

    iteration: list = field(default_factory=list)
    objective: list = field(default_factory=list)
    grad_sq_norm: list = field(default_factory=list)
    running_min: list = field(default_factory=list)
    alpha: list = field(default_factory=list)
    n_norm: list = field(default_factory=list)
    q_norm: list = field(default_factory=list)
    b_norm: list = field(default_factory=list)
    bound_violation: list = field(default_factory=list)
    defect: list = field(default_factory=list)
    wall_clock: list = field(default_factory=list)
    final_objective: float | None = None
    theta: ThetaParams | None = None

    CSV_COLUMNS = ("iteration", "objective", "grad_sq_norm", "running_min", "alpha",
                   "n_norm", "q_norm", "b_norm", "bound_violation", "defect")

    def rows(self):
        return [tuple(getattr(self, c)[i] for c in self.CSV_COLUMNS)
                for i in range(len(self.iteration))]

    def trend_slope(self):
        """Least-squares slope of log(running min) against log(iteration).

        Reported next to the ``-0.5`` exponent of the convergence claim; it is
        a measurement, not a check.
        """
        rm = np.asarray(self.running_min, dtype=float)
        tau = np.arange(1, rm.size + 1, dtype=float)
        ok = rm > 0
        if ok.sum() < 2:
            return float("nan")
        return float(np.polyfit(np.log(tau[ok]), np.log(rm[ok]), 1)[0])


def _max_defect(theta):
    return float(max(stiefel_defect(theta.omega1), stiefel_defect(theta.omega2),
                     orthogonality_defect(theta.w0)))


def train_es(objective, theta0, cfg, iterations, vectorized=True, callback=None):
    """Stochastic Riemannian ES ascent.

    ``objective`` maps flat parameter vectors to scalar returns; with
    ``vectorized`` it receives a ``(B, l)`` batch and returns ``(B,)``.
    Perturbations of iteration ``tau`` are keyed by ``(cfg.seed, tau)``.
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    theta = theta0.validate()
    dims = theta.dims

    def score(flat):
        if vectorized:
            return float(objective(flat[None, :])[0])
        return float(objective(flat))

    hist = TrainingHistory()
    start = time.perf_counter()
    best = math.inf
    for tau in range(1, iterations + 1):
        flat = flatten(theta)
        value = score(flat)
        if not math.isfinite(value):
            raise EstimatorError(f"objective is not finite at iteration {tau}", index=tau)
        try:
            est = es_gradient(objective, flat, cfg, iteration=tau, vectorized=vectorized)
        except EstimatorError as exc:
            raise EstimatorError(f"iteration {tau}: {exc}", index=tau) from exc
        rgrad = riemannian_project(unflatten(est, dims, ThetaGradient), theta)
        sq = rgrad.sq_norm()
        best = min(best, sq)
        n_norm = float(spectral_norm(theta.n_mat))
        q_norm = float(spectral_norm(theta.q))
        b_norm = float(np.linalg.norm(theta.bias))
        violated = ((cfg.norm_bound is not None and max(n_norm, q_norm) >= cfg.norm_bound)
                    or (cfg.bias_bound is not None and b_norm >= cfg.bias_bound))
        alpha = cfg.alpha(tau)
        hist.iteration.append(tau - 1)
        hist.objective.append(value)
        hist.grad_sq_norm.append(sq)
        hist.running_min.append(best)
        hist.alpha.append(alpha)
        hist.n_norm.append(n_norm)
        hist.q_norm.append(q_norm)
        hist.b_norm.append(b_norm)
        hist.bound_violation.append(int(violated))
        hist.defect.append(_max_defect(theta))
        theta = srgd_step(theta, rgrad, alpha)
        hist.wall_clock.append(time.perf_counter() - start)
        if callback is not None:
            callback(tau, hist)
    hist.final_objective = score(flatten(theta))
    hist.theta = theta
    return hist
