"""Shared independent oracles for the test suite."""

import numpy as np

from odetoode.flows import FlowConfig, ThetaParams, policy_tape
from odetoode.linalg import random_symmetric, spectral_norm

FD_H = 1e-5
FD_REL = 1e-4
FD_ABS = 1e-7
KINK = 1e-3


def block_error(analytic, numeric):
    """Largest entrywise miss, normalized by the looser of the two tolerances."""
    scale = max(FD_REL * np.max(np.abs(numeric)), FD_ABS)
    return float(np.max(np.abs(analytic - numeric)) / scale)


def fd_instance(rng, d=4, n=6, m=2, depth=10, max_norm=2.0):
    """A random policy, state and linear action loss with no ``|z|`` near a kink."""
    cfg = FlowConfig(depth_steps=depth)
    while True:
        theta = ThetaParams.random(d, n, m, seed=rng, bias_scale=0.5)
        n_mat = random_symmetric(n, rng)
        q = random_symmetric(n, rng)
        n_mat *= rng.uniform(0.1, max_norm) / spectral_norm(n_mat)
        q *= rng.uniform(0.1, max_norm) / spectral_norm(q)
        theta = ThetaParams(theta.omega1, theta.omega2, theta.bias, n_mat, q, theta.w0)
        s = rng.standard_normal(d)
        tape = policy_tape(s, theta, cfg)
        if np.min(np.abs(tape.flow.z)) >= KINK:
            c = rng.standard_normal(m)
            return theta, s, c, cfg, tape
