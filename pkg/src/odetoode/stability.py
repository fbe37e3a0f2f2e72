"""Verification harness: gradient-ratio grids, baseline contrast, bound audits.

Every cell draws its randomness from a generator keyed by the cell's own
coordinates, so a report does not depend on thread count or cell order.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .envs import (default_env, es_second_moment_bound, lipschitz_constant_C, rollout,
                   rollout_scores, state_norm_bound)
from .es import ESConfig, flat_length, flatten, perturbations
from .flows import (FlowConfig, GatedGenerator, IsoGenerator, ThetaParams, TrigBaselineGenerator,
                    batched_policy, forward, stack_thetas)
from .grad import activation_gradients, lemma1_bounds
from .linalg import (expm_skew, haar_random_orthogonal, random_skew, random_stiefel,
                     random_symmetric, spectral_norm)

SLACK = 1e-9
GENERATORS = ("iso", "gated")


@dataclass(frozen=True)
class GridSpec:
    dims: tuple = (2, 4, 8, 16, 32)
    depths: tuple = (10, 100, 1000)
    generators: tuple = GENERATORS
    nonlinearities: tuple = ("abs", "identity")
    seeds: tuple = (0, 1, 2, 3, 4)
    horizon: float = 1.0
    init_scale: float = 1.0

    def __post_init__(self):
        for name in ("dims", "depths", "generators", "nonlinearities", "seeds"):
            if not getattr(self, name):
                raise ValueError(f"grid axis {name} is empty")
        if any(d < 1 for d in self.dims) or any(n < 1 for n in self.depths):
            raise ValueError("dims and depths must be positive")
        if not set(self.generators) <= set(GENERATORS):
            raise ValueError(f"generators must be drawn from {GENERATORS}")

    def cells(self):
        return [(d, n, g, f, s) for d in self.dims for n in self.depths
                for g in self.generators for f in self.nonlinearities for s in self.seeds]


@dataclass(frozen=True)
class CellResult:
    dim: int
    depth: int
    generator: str
    nonlinearity: str
    seed: int
    min_ratio: float
    max_ratio: float
    lower: float
    upper: float
    passed: bool
    error: str = ""


@dataclass
class StabilityReport:
    rows: list = field(default_factory=list)

    COLUMNS = ("dim", "depth", "generator", "nonlinearity", "seed", "min_ratio",
               "max_ratio", "lower", "upper", "passed", "error")

    @property
    def passed(self):
        return bool(self.rows) and all(r.passed for r in self.rows)

    def csv_rows(self):
        return [tuple(getattr(r, c) for c in self.COLUMNS) for r in self.rows]

    def summary(self):
        failed = [asdict(r) for r in self.rows if not r.passed]
        return {
            "cells": len(self.rows),
            "failed": len(failed),
            "passed": self.passed,
            "min_ratio": min((r.min_ratio for r in self.rows), default=math.nan),
            "max_ratio": max((r.max_ratio for r in self.rows), default=math.nan),
            "asymptotic_bounds": [1.0 / math.e, math.e],
            "failures": failed[:20],
        }


def _cell_rng(*key):
    return np.random.default_rng([hash_int(k) for k in key])


def hash_int(value):
    """Stable integer key for ints and short strings (``hash`` is salted)."""
    if isinstance(value, str):
        return int.from_bytes(value.encode(), "little") % (2 ** 63)
    return int(value)


def random_generator(kind, dim, rng, scale=1.0):
    if kind == "iso":
        return IsoGenerator(q=random_symmetric(dim, rng, scale), n_mat=random_symmetric(dim, rng, scale))
    if kind == "gated":
        return GatedGenerator.random(dim, 2, rng, scale)
    raise ValueError(f"unknown generator {kind!r}")


def ratio_range(tape, rng):
    """Min and max of ``||dL/dx_i|| / ||dL/dx_N||`` for a terminal gradient on the sphere."""
    g = rng.standard_normal(tape.x_final.shape)
    g /= np.linalg.norm(g)
    norms = np.linalg.norm(activation_gradients(tape, g).g, axis=-1)
    ratios = norms / norms[-1]
    return float(ratios.min()), float(ratios.max())


def run_cell(cell, spec):
    d, n_steps, kind, f, seed = cell
    cfg = FlowConfig(depth_steps=n_steps, horizon=spec.horizon, nonlinearity=f)
    lo, hi = lemma1_bounds(n_steps, cfg.eta)
    rng = _cell_rng(seed, d, n_steps, kind, f)
    try:
        gen = random_generator(kind, d, rng, spec.init_scale)
        w0 = haar_random_orthogonal(d, rng)
        x0 = rng.standard_normal(d)
        bias = 0.1 * rng.standard_normal(d)
        tape = forward(x0, w0, gen, cfg, bias=bias)
        rmin, rmax = ratio_range(tape, rng)
    except (ArithmeticError, ValueError) as exc:
        return CellResult(d, n_steps, kind, f, seed, math.nan, math.nan, lo, hi, False,
                          f"{type(exc).__name__}: {exc}")
    ok = rmin >= lo - SLACK and rmax <= hi + SLACK
    return CellResult(d, n_steps, kind, f, seed, rmin, rmax, lo, hi, ok)


def _map(fn, items, threads):
    if threads is None or threads <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def verify_lemma1(spec=None, threads=1):
    """Check every gradient ratio of every grid cell against the finite-depth bounds."""
    spec = spec or GridSpec()
    return StabilityReport(_map(lambda c: run_cell(c, spec), spec.cells(), threads))


@dataclass(frozen=True)
class ContrastSpec:
    dims: tuple = (4, 16)
    depths: tuple = (10, 100, 1000)
    seeds: tuple = (0, 1, 2)
    baseline_scales: tuple = (0.0, 1.0, 3.0)
    trig_degree: int = 3
    nonlinearity: str = "abs"

    def __post_init__(self):
        if not (self.dims and self.depths and self.seeds and self.baseline_scales):
            raise ValueError("contrast grid axes must be nonempty")

    def cells(self):
        return [(d, n, c, s) for d in self.dims for n in self.depths
                for c in self.baseline_scales for s in self.seeds]


@dataclass(frozen=True)
class ContrastRow:
    dim: int
    depth: int
    baseline_scale: float
    seed: int
    ode_min: float
    ode_max: float
    ode_passed: bool
    baseline_min: float
    baseline_max: float
    baseline_error: str = ""


@dataclass
class ContrastReport:
    rows: list = field(default_factory=list)

    COLUMNS = ("dim", "depth", "baseline_scale", "seed", "ode_min", "ode_max", "ode_passed",
               "baseline_min", "baseline_max", "baseline_error")

    @property
    def passed(self):
        return bool(self.rows) and all(r.ode_passed for r in self.rows)

    def csv_rows(self):
        return [tuple(getattr(r, c) for c in self.COLUMNS) for r in self.rows]


def contrast_cell(cell, spec):
    d, n_steps, scale, seed = cell
    cfg = FlowConfig(depth_steps=n_steps, nonlinearity=spec.nonlinearity)
    lo, hi = lemma1_bounds(n_steps, cfg.eta)
    rng = _cell_rng(seed, d, n_steps, "contrast")
    x0 = rng.standard_normal(d)
    bias = 0.1 * rng.standard_normal(d)
    iso = random_generator("iso", d, rng)
    w0 = haar_random_orthogonal(d, rng)
    g_rng = _cell_rng(seed, d, n_steps, "terminal")
    omin, omax = ratio_range(forward(x0, w0, iso, cfg, bias=bias), g_rng)
    ok = omin >= lo - SLACK and omax <= hi + SLACK
    base = TrigBaselineGenerator.random(d, spec.trig_degree, _cell_rng(seed, d, n_steps, "trig"), scale)
    g_rng = _cell_rng(seed, d, n_steps, "terminal")
    try:
        with np.errstate(over="ignore", invalid="ignore"):
            bmin, bmax = ratio_range(forward(x0, None, base, cfg, bias=bias), g_rng)
        err = ""
    except ArithmeticError as exc:
        bmin = bmax = math.nan
        err = f"{type(exc).__name__}: {exc}"
    return ContrastRow(d, n_steps, float(scale), seed, omin, omax, ok, bmin, bmax, err)


def baseline_contrast(spec=None, threads=1):
    """Side-by-side ratio ranges: ISO flow (asserted) against the trig baseline (measured)."""
    spec = spec or ContrastSpec()
    return ContrastReport(_map(lambda c: contrast_cell(c, spec), spec.cells(), threads))


@dataclass(frozen=True)
class AuditResult:
    name: str
    samples: int
    worst_margin: float  # max over samples of lhs - rhs; <= slack means pass
    bound: float
    passed: bool
    detail: str = ""
    estimate: float = math.nan  # point estimate behind a statistical audit


@dataclass
class AppendixReport:
    audits: list = field(default_factory=list)

    COLUMNS = ("name", "samples", "worst_margin", "bound", "passed", "detail")

    @property
    def passed(self):
        return bool(self.audits) and all(a.passed for a in self.audits)

    def csv_rows(self):
        return [tuple(getattr(a, c) for c in self.COLUMNS) for a in self.audits]

    def __getitem__(self, name):
        for a in self.audits:
            if a.name == name:
                return a
        raise KeyError(name)


def bounded_theta(state_dim, hidden, action_dim, D, D_b, rng):
    """On-manifold parameters with ``||N||_2, ||Q||_2 <= D`` and ``||b||_2 <= D_b``."""
    def sym():
        s = random_symmetric(hidden, rng)
        return s * (D * rng.uniform() / spectral_norm(s))

    b = rng.standard_normal(hidden)
    b *= D_b * rng.uniform() / np.linalg.norm(b)
    return ThetaParams(
        omega1=random_stiefel(hidden, state_dim, rng),
        omega2=random_stiefel(action_dim, hidden, rng),
        bias=b, n_mat=sym(), q=sym(),
        w0=haar_random_orthogonal(hidden, rng),
    )


def nearby_theta(theta, D, D_b, rng, radius=0.05):
    """A small on-manifold move of ``theta`` that keeps the norm conditions."""
    def turn(x):
        return expm_skew(random_skew(x.shape[0], rng, radius)) @ x

    def sym(s):
        t = s + radius * random_symmetric(s.shape[0], rng)
        norm = spectral_norm(t)
        return t if norm <= D else t * (D / norm)

    b = theta.bias + radius * rng.standard_normal(theta.bias.shape)
    nb = np.linalg.norm(b)
    return ThetaParams(omega1=turn(theta.omega1), omega2=turn(theta.omega2),
                       bias=b if nb <= D_b else b * (D_b / nb),
                       n_mat=sym(theta.n_mat), q=sym(theta.q), w0=turn(theta.w0))


def _audit(name, lhs, rhs, bound, detail=""):
    margin = float(np.max(np.asarray(lhs) - np.asarray(rhs)))
    return AuditResult(name, int(np.size(lhs)), margin, float(bound), margin <= SLACK, detail)


@dataclass(frozen=True)
class AppendixSpec:
    hidden: int = 16
    depth_steps: int = 25
    samples: int = 1000
    D: float = 1.0
    D_b: float = 1.0
    sigma: float = 0.1
    es_estimates: int = 10000
    es_perturbations: int = 1
    seed: int = 0


def verify_appendix_bounds(env=None, spec=None):
    """Audit the policy-norm, Lipschitz, second-moment, contraction and state-norm bounds."""
    env = env or default_env(0)
    spec = spec or AppendixSpec()
    cfg = FlowConfig(depth_steps=spec.depth_steps)
    rng = np.random.default_rng([spec.seed, 7])
    d, n, m = env.state_dim, spec.hidden, env.action_dim
    dims = (d, n, m)
    audits = []

    # policy output norm
    thetas = [bounded_theta(d, n, m, spec.D, spec.D_b, rng) for _ in range(spec.samples)]
    batch = stack_thetas(thetas)
    states = 3.0 * rng.standard_normal((spec.samples, d))
    actions = batched_policy(batch, cfg)(states)
    lhs = np.linalg.norm(actions, axis=-1)
    rhs = math.e * np.linalg.norm(states, axis=-1) + (math.e - 1.0) * np.linalg.norm(batch.bias, axis=-1)
    audits.append(_audit("policy_norm", lhs, rhs, math.nan))

    # Lipschitz constant of F: half independent pairs, half nearby pairs
    C = lipschitz_constant_C(env, spec.D, spec.D_b)
    others = [bounded_theta(d, n, m, spec.D, spec.D_b, rng) if k % 2 == 0
              else nearby_theta(t, spec.D, spec.D_b, rng) for k, t in enumerate(thetas)]
    f1 = np.stack([flatten(t) for t in thetas])
    f2 = np.stack([flatten(t) for t in others])
    s1 = rollout_scores(env, f1, dims, cfg)
    s2 = rollout_scores(env, f2, dims, cfg)
    dist = np.linalg.norm(f1 - f2, axis=-1)
    audits.append(_audit("lipschitz_F", np.abs(s1 - s2), C * dist, C))

    # ES second moment at a fixed on-manifold theta
    theta = thetas[0]
    l = flat_length(dims)
    es_cfg = ESConfig(sigma=spec.sigma, perturbations=spec.es_perturbations, seed=spec.seed)
    base = flatten(theta)
    v = spec.es_perturbations
    sq = np.empty(spec.es_estimates)
    chunk = max(1, 512 // v)
    for start in range(0, spec.es_estimates, chunk):
        its = range(start, min(start + chunk, spec.es_estimates))
        eps = np.stack([perturbations(es_cfg.seed, it, v, l) for it in its])
        vals = rollout_scores(env, base + spec.sigma * eps.reshape(-1, l), dims, cfg)
        est = (vals.reshape(len(its), v)[..., None] * eps).mean(axis=1) / spec.sigma
        sq[start:start + len(its)] = np.einsum("ij,ij->i", est, est)
    mean = sq.mean()
    se = sq.std(ddof=1) / math.sqrt(sq.size) if sq.size > 1 else 0.0
    bound = es_second_moment_bound(env, l, spec.sigma)
    audits.append(AuditResult("es_second_moment", int(sq.size), float(mean - 4.0 * se - bound),
                              bound, bool(mean - 4.0 * se <= bound),
                              f"mean={float(mean)!r} se={float(se)!r}", float(mean)))

    # exp-map contraction on skew pairs
    k = spec.samples
    a1 = np.stack([random_skew(n, rng, rng.uniform(0.1, 3.0)) for _ in range(k)])
    a2 = np.stack([random_skew(n, rng, rng.uniform(0.1, 3.0)) for _ in range(k)])
    lhs = spectral_norm(expm_skew(a1) - expm_skew(a2))
    rhs = spectral_norm(a1 - a2)
    audits.append(_audit("exp_contraction", lhs, rhs, math.nan))

    # rolled-out state norms
    policy = batched_policy(batch, cfg)
    traj, _ = rollout(env, policy, (spec.samples,))
    bound = state_norm_bound(env, spec.D_b)
    audits.append(_audit("state_norm", np.linalg.norm(traj, axis=-1).max(), bound, bound))
    return AppendixReport(audits)
