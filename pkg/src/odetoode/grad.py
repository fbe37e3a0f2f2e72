"""Reverse-mode differentiation through a recorded flow tape.

Gradients are column vectors and each Euler step contributes the transposed
Jacobian ``(I + eta diag(f'(z_i)) W_i)^T``. The matrix-flow part is pulled back
through ``exp`` with the adjoint of its Frechet derivative,
``<G, L(X, E)> = <L(X^T, G), E>``.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .exceptions import DimensionError, IntegrationError
from .flows import BLOCKS, activation_derivative
from .linalg import expm_frechet


@dataclass(frozen=True)
class ActivationGradients:
    """``g[i] = dL/dx_i`` for ``i = 0..N`` (batch dims allowed before features)."""

    g: np.ndarray

    @property
    def depth_steps(self):
        return self.g.shape[0] - 1


@dataclass(frozen=True)
class ThetaGradient:
    """Euclidean gradient with one block per :class:`ThetaParams` field."""

    omega1: np.ndarray
    omega2: np.ndarray
    bias: np.ndarray
    n_mat: np.ndarray
    q: np.ndarray
    w0: np.ndarray

    def blocks(self):
        return {name: getattr(self, name) for name in BLOCKS}


@dataclass(frozen=True)
class FlowGradient:
    """Everything :func:`flow_backward` pulls back from ``dL/dx_N``."""

    activations: ActivationGradients
    x0: np.ndarray
    bias: np.ndarray
    w0: np.ndarray | None
    params: dict


def lemma1_bounds(depth_steps, eta=None):
    """Finite-depth gradient-ratio bounds ``(|1-eta|^N, (1+eta)^N)``.

    With ``eta = 1/N`` these tend to ``(1/e, e)``.
    """
    if eta is None:
        eta = 1.0 / depth_steps
    return abs(1.0 - eta) ** depth_steps, (1.0 + eta) ** depth_steps


def activation_gradients(tape, g_final):
    g = np.asarray(g_final, dtype=np.float64)
    if g.shape != tape.x_final.shape:
        raise DimensionError(f"terminal gradient {g.shape} does not match state {tape.x_final.shape}")
    if not np.all(np.isfinite(g)):
        raise IntegrationError("terminal gradient is not finite")
    out = np.empty_like(tape.x)
    out[-1] = g
    for i in range(tape.depth_steps, 0, -1):
        d = tape.eta * activation_derivative(tape.z[i - 1], tape.nonlinearity) * g
        g = g + d @ tape.w[i]
        out[i - 1] = g
    return ActivationGradients(out)


def gradient_ratio_profile(grads):
    """Ratios ``||g_i|| / ||g_N||`` for ``i = 0..N`` (per batch item)."""
    norms = np.linalg.norm(grads.g, axis=-1)
    final = norms[-1]
    if np.any(final == 0.0):
        raise ValueError("terminal gradient has zero norm")
    return norms / final


def _outer_sum(d, x):
    """``sum_b d_b x_b^T`` over any leading batch dimensions."""
    return d.reshape(-1, d.shape[-1]).T @ x.reshape(-1, x.shape[-1])


def flow_backward(tape, generator, g_final, w0=None):
    """Pull ``dL/dx_N`` back to ``x_0``, the bias, ``W_0`` and generator params."""
    g = np.asarray(g_final, dtype=np.float64)
    if g.shape != tape.x_final.shape:
        raise DimensionError(f"terminal gradient {g.shape} does not match state {tape.x_final.shape}")
    if tape.kind != generator.kind:
        raise DimensionError(f"tape was produced by a {tape.kind} flow, not {generator.kind}")
    n = tape.w.shape[-1]
    eta = tape.eta
    times = eta * np.arange(tape.depth_steps + 1)
    acts = np.empty_like(tape.x)
    acts[-1] = g
    g_bias = np.zeros(n)
    g_params = {k: np.zeros_like(v) for k, v in generator.params().items()}
    g_w = np.zeros((n, n))
    for i in range(tape.depth_steps, 0, -1):
        d = eta * activation_derivative(tape.z[i - 1], tape.nonlinearity) * g
        g_bias += d.reshape(-1, n).sum(axis=0)
        g_w = g_w + _outer_sum(d, tape.x[i - 1])
        g = g + d @ tape.w[i]
        acts[i - 1] = g
        if generator.kind == "trig":
            for k, v in generator.matrix_vjp(times[i], g_w).items():
                g_params[k] += v
            g_w = np.zeros((n, n))
            continue
        # W_i = W_{i-1} E_i with E_i = exp(eta A_i)
        w_prev = tape.w[i - 1]
        g_e = w_prev.T @ g_w
        x_skew = eta * tape.velocity[i - 1]
        _, g_x = expm_frechet(-x_skew, g_e)
        g_w = g_w @ tape.rotation[i - 1].T
        g_w_gen, gp = generator.velocity_vjp(times[i - 1], w_prev, eta * g_x)
        if g_w_gen is not None:
            g_w = g_w + g_w_gen
        for k, v in gp.items():
            g_params[k] += v
    return FlowGradient(
        activations=ActivationGradients(acts),
        x0=g,
        bias=g_bias,
        w0=None if generator.kind == "trig" else g_w,
        params=g_params,
    )


def parameter_gradients(tape, theta, g_action):
    """Euclidean gradient of a loss w.r.t. every block of ``theta``.

    ``tape`` is the :class:`PolicyTape` of ``theta`` and ``g_action`` is
    ``dL/d(action)`` (for a loss of ``x_N`` directly, pass it through an
    identity ``omega2``).
    """
    d, n, m = theta.dims
    g_action = np.asarray(g_action, dtype=np.float64)
    if g_action.shape[-1] != m or tape.flow.w.shape[-1] != n:
        raise DimensionError("tape and theta shapes disagree")
    g_x = g_action @ theta.omega2
    fg = flow_backward(tape.flow, theta.generator(), g_x)
    return ThetaGradient(
        omega1=_outer_sum(fg.x0, tape.state),
        omega2=_outer_sum(g_action, tape.flow.x_final),
        bias=fg.bias,
        n_mat=fg.params["n_mat"],
        q=fg.params["q"],
        w0=fg.w0,
    )


def finite_difference(fn, x, h=1e-5):
    """Central-difference gradient of a scalar function of an array."""
    if not h > 0:
        raise ValueError("h must be positive")
    x = np.array(x, dtype=np.float64, order="C")
    grad = np.empty_like(x)
    flat = x.reshape(-1)
    out = grad.reshape(-1)
    for j in range(flat.size):
        orig = flat[j]
        flat[j] = orig + h
        fp = fn(x.copy())
        flat[j] = orig - h
        fm = fn(x.copy())
        flat[j] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise IntegrationError(f"non-finite loss at coordinate {j}")
        out[j] = (fp - fm) / (2.0 * h)
    return grad


def finite_difference_gradient(loss_fn, theta, h=1e-5):
    """Ambient-space central differences for every block of ``theta``.

    Manifold blocks are perturbed entrywise, leaving the manifold; this checks
    the Euclidean gradient before any Riemannian projection.
    """
    grads = {}
    for name in BLOCKS:
        grads[name] = finite_difference(
            lambda v, name=name: loss_fn(replace(theta, **{name: v})),
            getattr(theta, name), h)
    return ThetaGradient(**grads)
