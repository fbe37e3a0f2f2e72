"""Matrix flows on the orthogonal group and the nested Euler integrator.

The main flow is ``x_i = x_{i-1} + eta * f(W_i x_{i-1} + b)`` and the matrix
flow is ``W_i = W_{i-1} exp(eta * A_i)`` with a skew velocity ``A_i`` supplied
by a generator. Because ``W_i`` never depends on ``x``, one matrix trajectory
serves every input of a batch (and every state of an RL rollout).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace
from typing import ClassVar

import numpy as np

from .exceptions import DimensionError, IntegrationError, ManifoldError
from .linalg import (
    as_orthogonal,
    as_stiefel,
    as_symmetric,
    expm,
    expm_skew,
    haar_random_orthogonal,
    random_stiefel,
    random_symmetric,
    transpose,
)

NONLINEARITIES = ("abs", "identity")
EMBED_FREQUENCIES = math.pi * np.array([1.0, 2.0, 4.0, 8.0])
GATE_HIDDEN = 32


def activation(z, kind):
    if kind == "abs":
        return np.abs(z)
    if kind == "identity":
        return z
    raise ValueError(f"unknown nonlinearity {kind!r}")


def activation_derivative(z, kind):
    # The subgradient of |x| at 0 is fixed to +1.
    if kind == "abs":
        return np.where(z >= 0.0, 1.0, -1.0)
    if kind == "identity":
        return np.ones_like(z)
    raise ValueError(f"unknown nonlinearity {kind!r}")


@dataclass(frozen=True)
class FlowConfig:
    depth_steps: int = 25
    horizon: float = 1.0
    step: float | None = None
    nonlinearity: str = "abs"

    def __post_init__(self):
        if int(self.depth_steps) != self.depth_steps or self.depth_steps < 1:
            raise ValueError("depth_steps must be a positive integer")
        if not self.horizon > 0:
            raise ValueError("horizon must be positive")
        if self.step is not None and not self.step > 0:
            raise ValueError("step must be positive")
        if self.nonlinearity not in NONLINEARITIES:
            raise ValueError(f"nonlinearity must be one of {NONLINEARITIES}")

    @property
    def eta(self):
        return self.step if self.step is not None else self.horizon / self.depth_steps

    def times(self):
        return self.eta * np.arange(self.depth_steps + 1)


def time_embedding(t):
    """Sinusoidal embedding of a scalar time (sin and cos of four frequencies)."""
    angles = EMBED_FREQUENCIES * t
    return np.concatenate([np.sin(angles), np.cos(angles)])


@dataclass(frozen=True)
class IsoGenerator:
    """Double-bracket velocity ``[W^T Q W, N]`` with symmetric ``Q`` and ``N``.

    Off the symmetric/orthogonal manifold (ES perturbations, finite
    differences) the bracket is projected onto its skew part so the matrix
    flow still exponentiates a skew matrix.
    """

    q: np.ndarray
    n_mat: np.ndarray
    kind: ClassVar[str] = "iso"
    param_names: ClassVar[tuple] = ("q", "n_mat")

    @property
    def dim(self):
        return self.q.shape[-1]

    def validate(self):
        as_symmetric(self.q)
        as_symmetric(self.n_mat)
        if self.q.shape != self.n_mat.shape:
            raise DimensionError("Q and N must have the same shape")
        return self

    def params(self):
        return {"q": self.q, "n_mat": self.n_mat}

    def with_params(self, params):
        return replace(self, **params)

    def velocity(self, t, w):
        if w.shape[-1] != self.dim:
            raise DimensionError(f"W has dim {w.shape[-1]}, generator has {self.dim}")
        h = transpose(w) @ self.q @ w
        c = h @ self.n_mat - self.n_mat @ h
        return 0.5 * (c - transpose(c))

    def velocity_vjp(self, t, w, g):
        """Pull back a cotangent ``g`` of the velocity to ``W`` and parameters."""
        h = transpose(w) @ self.q @ w
        gs = 0.5 * (g - transpose(g))
        n_t = transpose(self.n_mat)
        gh = gs @ n_t - n_t @ gs
        gn = transpose(h) @ gs - gs @ transpose(h)
        gq = w @ gh @ transpose(w)
        gw = self.q @ w @ transpose(gh) + transpose(self.q) @ w @ gh
        return gw, {"q": gq, "n_mat": gn}


@dataclass(frozen=True)
class GatedGenerator:
    """Weighted sum of antisymmetrized gate-network outputs.

    Each gate is a one-hidden-layer tanh network from the time embedding to an
    unstructured ``n x n`` matrix ``M_g``; the velocity is
    ``sum_g a_g (M_g - M_g^T)``. ``W`` is not an input.
    """

    coeffs: np.ndarray  # (G,)
    w_in: np.ndarray  # (G, H, E)
    b_in: np.ndarray  # (G, H)
    w_out: np.ndarray  # (G, n*n, H)
    b_out: np.ndarray  # (G, n*n)
    kind: ClassVar[str] = "gated"
    param_names: ClassVar[tuple] = ("coeffs", "w_in", "b_in", "w_out", "b_out")

    @property
    def dim(self):
        return math.isqrt(self.b_out.shape[-1])

    @property
    def gate_count(self):
        return self.coeffs.shape[0]

    def validate(self):
        g = self.coeffs.shape[0]
        if self.coeffs.ndim != 1:
            raise DimensionError("coefficients must be a vector")
        for name in self.param_names[1:]:
            if getattr(self, name).shape[0] != g:
                raise DimensionError(f"{name} must have one entry per gate")
        if self.dim ** 2 != self.b_out.shape[-1]:
            raise DimensionError("gate output size is not a square")
        return self

    @classmethod
    def random(cls, dim, gate_count=1, seed=None, scale=1.0, hidden=GATE_HIDDEN):
        rng = np.random.default_rng(seed)
        e = 2 * EMBED_FREQUENCIES.size
        return cls(
            coeffs=np.full(gate_count, 1.0 / gate_count),
            w_in=rng.standard_normal((gate_count, hidden, e)) / math.sqrt(e),
            b_in=0.1 * rng.standard_normal((gate_count, hidden)),
            w_out=scale * rng.standard_normal((gate_count, dim * dim, hidden)) / math.sqrt(hidden),
            b_out=np.zeros((gate_count, dim * dim)),
        ).validate()

    def params(self):
        return {name: getattr(self, name) for name in self.param_names}

    def with_params(self, params):
        return replace(self, **params)

    def _gates(self, t):
        emb = time_embedding(t)
        hidden = np.tanh(self.w_in @ emb + self.b_in)
        out = (self.w_out @ hidden[..., None])[..., 0] + self.b_out
        n = self.dim
        return emb, hidden, out.reshape(-1, n, n)

    def gate_outputs(self, t):
        return self._gates(t)[2]

    def velocity(self, t, w=None):
        m = self._gates(t)[2]
        b = m - transpose(m)
        return np.tensordot(self.coeffs, b, axes=1)

    def velocity_vjp(self, t, w, g):
        emb, hidden, m = self._gates(t)
        b = m - transpose(m)
        g_coeffs = np.einsum("gij,ij->g", b, g)
        gb = self.coeffs[:, None, None] * g
        gm = (gb - transpose(gb)).reshape(self.gate_count, -1)
        g_w_out = gm[:, :, None] * hidden[:, None, :]
        g_hidden = np.einsum("gkh,gk->gh", self.w_out, gm)
        g_pre = g_hidden * (1.0 - hidden ** 2)
        g_w_in = g_pre[:, :, None] * emb[None, None, :]
        grads = {
            "coeffs": g_coeffs,
            "w_in": g_w_in,
            "b_in": g_pre,
            "w_out": g_w_out,
            "b_out": gm,
        }
        return None, grads


@dataclass(frozen=True)
class TrigBaselineGenerator:
    """Unconstrained weight matrix with trigonometric-polynomial entries.

    ``W(t) = sum_k a_k sin(t)^k + b_k cos(t)^k`` for ``k = 0..degree``. This is
    a contrast baseline; nothing keeps ``W(t)`` on the orthogonal group.
    """

    a: np.ndarray  # (degree+1, n, n)
    b: np.ndarray  # (degree+1, n, n)
    kind: ClassVar[str] = "trig"
    param_names: ClassVar[tuple] = ("a", "b")

    @property
    def degree(self):
        return self.a.shape[0] - 1

    @property
    def dim(self):
        return self.a.shape[-1]

    def validate(self):
        if self.a.shape != self.b.shape or self.a.ndim != 3 or self.a.shape[1] != self.a.shape[2]:
            raise DimensionError("trig coefficient tensors must both be (degree+1, n, n)")
        return self

    @classmethod
    def random(cls, dim, degree=5, seed=None, scale=1.0):
        rng = np.random.default_rng(seed)
        shape = (degree + 1, dim, dim)
        norm = scale / math.sqrt(dim)
        return cls(a=norm * rng.standard_normal(shape), b=norm * rng.standard_normal(shape)).validate()

    def params(self):
        return {"a": self.a, "b": self.b}

    def with_params(self, params):
        return replace(self, **params)

    def _powers(self, t):
        k = np.arange(self.degree + 1)
        return np.sin(t) ** k, np.cos(t) ** k

    def matrix(self, t):
        ps, pc = self._powers(t)
        return np.tensordot(ps, self.a, axes=1) + np.tensordot(pc, self.b, axes=1)

    def matrix_vjp(self, t, g):
        ps, pc = self._powers(t)
        return {"a": ps[:, None, None] * g, "b": pc[:, None, None] * g}


@dataclass(frozen=True)
class FlowTape:
    """Per-step record of one forward integration.

    ``x[i]`` and ``w[i]`` are the state and weight matrix after step ``i``
    (index 0 holds the initial condition); ``z[i-1]`` and ``velocity[i-1]``
    belong to step ``i``. ``x`` may carry batch dimensions between the step
    axis and the feature axis.
    """

    x: np.ndarray
    z: np.ndarray
    w: np.ndarray
    velocity: np.ndarray | None
    rotation: np.ndarray | None
    eta: float
    nonlinearity: str
    kind: str

    @property
    def depth_steps(self):
        return self.z.shape[0]

    @property
    def x_final(self):
        return self.x[-1]


def step_matrix_flow(w, a, eta):
    """One exponential-map step ``W exp(eta A)``."""
    if not eta > 0:
        raise ValueError("eta must be positive")
    return w @ expm_skew(eta * np.asarray(a, dtype=np.float64))


def matrix_trajectory(w0, generator, cfg):
    """Integrate the matrix flow alone.

    Returns ``(w, velocity, rotation)`` with ``w`` of shape ``(N+1, ..., n, n)``.
    The ISO generator may carry leading batch dimensions in ``w0``, ``q`` and
    ``n_mat`` to integrate many parameter sets at once.
    """
    eta = cfg.eta
    n_steps = cfg.depth_steps
    times = cfg.times()
    if generator.kind == "trig":
        ws = np.stack([generator.matrix(t) for t in times])
        return ws, None, None
    w = np.asarray(w0, dtype=np.float64)
    if w.shape[-1] != generator.dim:
        raise DimensionError(f"W0 has dim {w.shape[-1]}, generator has {generator.dim}")
    ws = [w]
    vel = []
    rot = []
    for i in range(1, n_steps + 1):
        a = generator.velocity(times[i - 1], w)
        if not np.all(np.isfinite(a)):
            raise IntegrationError(f"non-finite velocity at step {i}", step=i)
        e = expm(eta * a)
        w = w @ e
        vel.append(a)
        rot.append(e)
        ws.append(w)
    ws, vel, rot = np.stack(ws), np.stack(vel), np.stack(rot)
    return ws, vel, rot


def forward(x0, w0, generator, cfg, bias=None):
    """Integrate the nested system and return the full tape.

    ``x0`` is ``(n,)`` or batched ``(..., n)``; one matrix trajectory is shared
    by the whole batch.
    """
    x = np.asarray(x0, dtype=np.float64)
    n = generator.dim
    if x.shape[-1] != n:
        raise DimensionError(f"x0 has dim {x.shape[-1]}, flow has {n}")
    b = np.zeros(n) if bias is None else np.asarray(bias, dtype=np.float64)
    if b.shape != (n,):
        raise DimensionError(f"bias must have shape ({n},)")
    ws, vel, rot = matrix_trajectory(w0, generator, cfg)
    if ws.ndim != 3:
        raise DimensionError("forward takes a single parameter set; use matrix_trajectory for batches")
    eta = cfg.eta
    f = cfg.nonlinearity
    xs = np.empty((cfg.depth_steps + 1,) + x.shape)
    zs = np.empty((cfg.depth_steps,) + x.shape)
    xs[0] = x
    for i in range(1, cfg.depth_steps + 1):
        z = x @ ws[i].T + b
        x = x + eta * activation(z, f)
        if not np.all(np.isfinite(x)):
            raise IntegrationError(f"non-finite state at step {i}", step=i)
        zs[i - 1] = z
        xs[i] = x
    return FlowTape(x=xs, z=zs, w=ws, velocity=vel, rotation=rot, eta=eta,
                    nonlinearity=f, kind=generator.kind)


def trig_baseline_forward(x0, generator, cfg, bias=None):
    if generator.kind != "trig":
        raise ValueError("expected a TrigBaselineGenerator")
    return forward(x0, None, generator, cfg, bias=bias)


BLOCKS = ("omega1", "omega2", "bias", "n_mat", "q", "w0")


@dataclass(frozen=True)
class ThetaParams:
    """Trainable parameters of the ISO policy ``s -> Omega2 x_N``.

    Shapes: ``omega1 (n, d)``, ``omega2 (m, n)``, ``bias (n,)``, ``n_mat``,
    ``q``, ``w0`` all ``(n, n)``. Construction does not validate (perturbed
    parameters are evaluated off-manifold on purpose); call :meth:`validate`.
    """

    omega1: np.ndarray
    omega2: np.ndarray
    bias: np.ndarray
    n_mat: np.ndarray
    q: np.ndarray
    w0: np.ndarray

    @property
    def dims(self):
        """``(state_dim, hidden, action_dim)``."""
        return self.omega1.shape[1], self.omega1.shape[0], self.omega2.shape[0]

    def validate(self):
        d, n, m = self.dims
        expected = {"omega1": (n, d), "omega2": (m, n), "bias": (n,),
                    "n_mat": (n, n), "q": (n, n), "w0": (n, n)}
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise DimensionError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")
        as_stiefel(self.omega1)
        as_stiefel(self.omega2)
        as_symmetric(self.n_mat)
        as_symmetric(self.q)
        as_orthogonal(self.w0)
        if not np.all(np.isfinite(self.bias)):
            raise ManifoldError("bias has non-finite entries")
        return self

    def generator(self):
        return IsoGenerator(q=self.q, n_mat=self.n_mat)

    def blocks(self):
        return {name: getattr(self, name) for name in BLOCKS}

    @classmethod
    def random(cls, state_dim, hidden, action_dim, seed=None, scale=1.0, bias_scale=0.1):
        rng = np.random.default_rng(seed)
        return cls(
            omega1=random_stiefel(hidden, state_dim, rng),
            omega2=random_stiefel(action_dim, hidden, rng),
            bias=bias_scale * rng.standard_normal(hidden),
            n_mat=random_symmetric(hidden, rng, scale),
            q=random_symmetric(hidden, rng, scale),
            w0=haar_random_orthogonal(hidden, rng),
        ).validate()


@dataclass(frozen=True)
class PolicyTape:
    state: np.ndarray
    flow: FlowTape
    action: np.ndarray


def iso_velocity(gen, w):
    return gen.velocity(0.0, np.asarray(w, dtype=np.float64))


def gated_velocity(gen, t):
    return gen.velocity(float(t))


def policy_tape(s, theta, cfg):
    s = np.asarray(s, dtype=np.float64)
    d, n, m = theta.dims
    if s.shape[-1] != d:
        raise DimensionError(f"state has dim {s.shape[-1]}, policy expects {d}")
    flow = forward(s @ theta.omega1.T, theta.w0, theta.generator(), cfg, bias=theta.bias)
    return PolicyTape(state=s, flow=flow, action=flow.x_final @ theta.omega2.T)


def policy_forward(s, theta, cfg):
    """Action ``Omega2 x_N`` for state ``s`` with ``x_0 = Omega1 s``."""
    return policy_tape(s, theta, cfg).action


def stack_thetas(thetas):
    """Stack a sequence of parameter sets into one batched ``ThetaParams``."""
    return ThetaParams(**{f.name: np.stack([getattr(t, f.name) for t in thetas])
                          for f in fields(ThetaParams)})


def batched_policy(theta, cfg):
    """Precompute the matrix trajectory of (possibly batched) parameters.

    Returns a function mapping states ``(B, d)`` to actions ``(B, m)``, where
    ``B`` matches the leading batch dimension of ``theta``'s blocks.
    """
    gen = IsoGenerator(q=theta.q, n_mat=theta.n_mat)
    ws = matrix_trajectory(theta.w0, gen, cfg)[0]
    eta = cfg.eta
    f = cfg.nonlinearity
    om1 = theta.omega1
    om2 = theta.omega2
    b = theta.bias

    def act(s):
        x = (om1 @ s[..., None])[..., 0]
        for i in range(1, cfg.depth_steps + 1):
            z = (ws[i] @ x[..., None])[..., 0] + b
            x = x + eta * activation(z, f)
        return (om2 @ x[..., None])[..., 0]

    return act
