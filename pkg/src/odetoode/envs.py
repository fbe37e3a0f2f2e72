"""Deterministic black-box environments and rollout scoring.

An environment maps ``(s, a)`` to ``(s', l)``. Its declared constants are a
per-step score bound ``M`` and Lipschitz constants ``L1`` (next state) and
``L2`` (score), both measured against ``||ds|| + ||da||``.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .es import flatten, unflatten
from .exceptions import DimensionError, IntegrationError
from .flows import FlowConfig, batched_policy
from .linalg import spectral_norm

E = math.e


@dataclass(frozen=True)
class ClippedLinearEnv:
    """``s' = clip(A s + B a, -R, R)`` and ``l = M tanh(c.s + w.a)``."""

    a_env: np.ndarray
    b_env: np.ndarray
    c: np.ndarray
    w: np.ndarray
    s0: np.ndarray
    horizon: int = 50
    radius: float = 10.0
    score_scale: float = 1.0

    def __post_init__(self):
        d = self.a_env.shape[0]
        if self.a_env.shape != (d, d):
            raise DimensionError("a_env must be square")
        if self.b_env.ndim != 2 or self.b_env.shape[0] != d:
            raise DimensionError(f"b_env must have {d} rows")
        m = self.b_env.shape[1]
        if self.c.shape != (d,) or self.w.shape != (m,) or self.s0.shape != (d,):
            raise DimensionError("score weights or s0 do not match the dimensions")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if not self.radius > 0 or not self.score_scale > 0:
            raise ValueError("radius and score_scale must be positive")

    @property
    def state_dim(self):
        return self.a_env.shape[0]

    @property
    def action_dim(self):
        return self.b_env.shape[1]

    @property
    def M(self):
        return float(self.score_scale)

    @property
    def L1(self):
        return float(max(spectral_norm(self.a_env), spectral_norm(self.b_env)))

    @property
    def L2(self):
        return float(self.score_scale * max(np.linalg.norm(self.c), np.linalg.norm(self.w)))


def default_env(seed=0, state_dim=8, action_dim=2, horizon=50, radius=10.0,
                score_scale=1.0, a_norm=0.9):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((state_dim, state_dim))
    a *= a_norm / spectral_norm(a)
    b = rng.standard_normal((state_dim, action_dim)) / math.sqrt(state_dim)
    c = rng.standard_normal(state_dim) / math.sqrt(state_dim)
    w = rng.standard_normal(action_dim) / math.sqrt(action_dim)
    s0 = rng.standard_normal(state_dim)
    return ClippedLinearEnv(a, b, c, w, s0, horizon, radius, score_scale)


def env_step(env, s, a):
    """One transition; accepts batched ``s (..., d)`` and ``a (..., m)``."""
    s = np.asarray(s, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    if s.shape[-1] != env.state_dim or a.shape[-1] != env.action_dim:
        raise DimensionError(f"state/action dims {s.shape[-1]}/{a.shape[-1]} do not match "
                             f"{env.state_dim}/{env.action_dim}")
    nxt = np.clip(_apply(env.a_env, s) + _apply(env.b_env, a), -env.radius, env.radius)
    score = env.score_scale * np.tanh(_apply(env.c[None, :], s)[..., 0] + _apply(env.w[None, :], a)[..., 0])
    return nxt, score


def _apply(mat, vecs):
    # row-by-row products: a 2-d BLAS call may round differently with batch size
    return (mat @ vecs[..., None])[..., 0]


def rollout(env, policy, batch_shape=()):
    """Run ``policy`` for ``K`` steps from ``s0``; returns (states, scores).

    ``states`` has shape ``(K+1,) + batch_shape + (d,)``.
    """
    s = np.broadcast_to(env.s0, batch_shape + (env.state_dim,)).copy()
    states = [s]
    scores = []
    for k in range(1, env.horizon + 1):
        a = policy(s)
        if not np.all(np.isfinite(a)):
            raise IntegrationError(f"non-finite action at rollout step {k}", step=k)
        s, l = env_step(env, s, a)
        states.append(s)
        scores.append(l)
    return np.stack(states), np.stack(scores)


def rollout_scores(env, flat, dims, cfg=None):
    """Total scores for a batch of flat parameter vectors ``(B, l)``."""
    cfg = cfg or FlowConfig()
    flat = np.atleast_2d(np.asarray(flat, dtype=np.float64))
    theta = unflatten(flat, dims)
    policy = batched_policy(theta, cfg)
    _, scores = rollout(env, policy, (flat.shape[0],))
    # sequential sum: a reduction over axis 0 switches to pairwise order when B == 1
    total = np.zeros(flat.shape[0])
    for l in scores:
        total = total + l
    return total


def rollout_score(env, theta, cfg=None):
    """``F(theta)``: the summed score of one rollout under ``theta``."""
    return float(rollout_scores(env, flatten(theta)[None, :], theta.dims, cfg)[0])


def make_objective(env, dims, cfg=None, threads=1):
    """Vectorized objective ``(B, l) -> (B,)`` for the ES trainer.

    With ``threads > 1`` the batch is split into contiguous chunks scored
    concurrently and concatenated in order; each row's score is independent of
    the chunking.
    """
    if threads <= 1:
        return lambda flat: rollout_scores(env, flat, dims, cfg)

    def objective(flat):
        flat = np.atleast_2d(flat)
        chunks = np.array_split(flat, min(threads, flat.shape[0]))
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(lambda c: rollout_scores(env, c, dims, cfg), chunks))
        return np.concatenate(parts)

    return objective


def gamma(k, L1):
    """``sum_{j<k} (L1 (1+e))^j`` in closed form."""
    if k < 0 or not L1 > 0:
        raise ValueError("need k >= 0 and L1 > 0")
    r = L1 * (1.0 + E)
    if abs(r - 1.0) <= 1e-12:
        return float(k)
    return (r ** k - 1.0) / (r - 1.0)


def exp_map_constant(D):
    """``B = 1 + (e-1)((1 + 1/D) e^{4D^2} - 1/D)``."""
    return 1.0 + (E - 1.0) * ((1.0 + 1.0 / D) * math.exp(4.0 * D * D) - 1.0 / D)


def state_offset_constant(env, D_b, s0=None, a_hat=None):
    """``A = L1((e-1) D_b + ||s0|| + ||a_hat||) + ||env1(s0, a_hat)||``."""
    s0 = env.s0 if s0 is None else np.asarray(s0, dtype=np.float64)
    a_hat = np.zeros(env.action_dim) if a_hat is None else np.asarray(a_hat, dtype=np.float64)
    s1, _ = env_step(env, s0, a_hat)
    return (env.L1 * ((E - 1.0) * D_b + np.linalg.norm(s0) + np.linalg.norm(a_hat))
            + float(np.linalg.norm(s1)))


def state_norm_bound(env, D_b, s0=None, a_hat=None):
    """Bound on every rolled-out state norm for parameters with ``||b|| <= D_b``."""
    s0 = env.s0 if s0 is None else s0
    K, L1 = env.horizon, env.L1
    return ((L1 * (1.0 + E)) ** K + 1.0) * float(np.linalg.norm(s0)) \
        + gamma(K, L1) * state_offset_constant(env, D_b, s0, a_hat)


def lipschitz_constant_C(env, D, D_b, s0=None, a_hat=None):
    """Lipschitz constant of ``F`` on parameters with ``||N||,||Q|| <= D``, ``||b|| <= D_b``.

    The reference action ``a_hat`` defaults to zero.
    """
    if not (D > 0 and D_b >= 0):
        raise ValueError("need D > 0 and D_b >= 0")
    s0 = env.s0 if s0 is None else np.asarray(s0, dtype=np.float64)
    K, L1, L2 = env.horizon, env.L1, env.L2
    g = gamma(K, L1)
    a_const = state_offset_constant(env, D_b, s0, a_hat)
    inner = (E * ((L1 * (1.0 + E)) ** K + 1.0) * float(np.linalg.norm(s0))
             + g * a_const + (E - 1.0) * D_b)
    return L2 * K * ((1.0 + E) * g * L1 + 1.0) * inner * exp_map_constant(D)


def smoothed_gradient_lipschitz(C, flat_len, sigma):
    """Lipschitz bound ``C sqrt(l) / sigma`` on the smoothed objective's gradient."""
    return C * math.sqrt(flat_len) / sigma


def es_second_moment_bound(env, flat_len, sigma):
    """``K^2 M^2 l / sigma^2``."""
    return (env.horizon * env.M) ** 2 * flat_len / sigma ** 2
