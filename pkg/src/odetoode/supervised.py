"""Classifier built from the nested flow and trained with exact gradients.

``x_0 = Omega1 u``, the flow runs to ``x_N``, and ``logits = V x_N``. The
embedding and ``W0`` stay on their manifolds under Riemannian descent; the
readout ``V`` is an unconstrained matrix.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .es import rotate, tangent_skew
from .exceptions import DatasetError, DimensionError, IntegrationError
from .flows import (FlowConfig, GatedGenerator, IsoGenerator, TrigBaselineGenerator,
                    forward)
from .grad import flow_backward, lemma1_bounds
from .linalg import (haar_random_orthogonal, orthogonality_defect, random_stiefel,
                     random_symmetric)

GENERATOR_KINDS = ("iso", "gated", "trig_baseline")


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray  # (count, d)
    labels: np.ndarray  # (count,) int
    class_count: int

    def __post_init__(self):
        if self.features.ndim != 2:
            raise DatasetError("features must be a 2-d array")
        if self.labels.shape != (self.features.shape[0],):
            raise DatasetError("features and labels have different lengths")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise DatasetError(f"labels must lie in [0, {self.class_count})")

    def __len__(self):
        return self.labels.size

    @property
    def dim(self):
        return self.features.shape[1]


def synth_dataset(kind, count, seed=0, dim=2):
    """Two-class synthetic data.

    ``blobs``: unit-variance Gaussians centred at ``+-2u`` for a random unit
    ``u``; points falling on the wrong side of the hyperplane ``u.x = 0`` are
    redrawn, so the classes are linearly separable. ``rings``: noisy circles of
    radius 1 and 3 in the first two coordinates, not linearly separable.
    """
    if count < 2:
        raise ValueError("count must be >= 2")
    rng = np.random.default_rng(seed)
    labels = np.arange(count) % 2
    sign = np.where(labels == 1, 1.0, -1.0)
    if kind == "blobs":
        u = rng.standard_normal(dim)
        u /= np.linalg.norm(u)
        x = rng.standard_normal((count, dim)) + 2.0 * sign[:, None] * u
        bad = sign * (x @ u) <= 0
        while np.any(bad):
            x[bad] = rng.standard_normal((int(bad.sum()), dim)) + 2.0 * sign[bad, None] * u
            bad = sign * (x @ u) <= 0
    elif kind == "rings":
        if dim < 2:
            raise ValueError("rings need dim >= 2")
        angle = rng.uniform(0.0, 2.0 * np.pi, count)
        radius = np.where(labels == 1, 3.0, 1.0) + 0.1 * rng.standard_normal(count)
        x = 0.1 * rng.standard_normal((count, dim))
        x[:, 0] = radius * np.cos(angle)
        x[:, 1] = radius * np.sin(angle)
    else:
        raise ValueError(f"unknown dataset kind {kind!r}")
    return Dataset(x, labels, 2)


def load_csv(path):
    """Read ``label,f0,f1,...`` rows; line numbers in errors are 1-based."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DatasetError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    expected = ["label"] + [f"f{j}" for j in range(len(header) - 1)]
    if len(header) < 2 or header != expected:
        raise DatasetError(f"{path}: line 1: header must be label,f0,f1,...")
    width = len(header)
    labels, feats = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != width:
            raise DatasetError(f"{path}: line {lineno}: expected {width} fields, got {len(row)}")
        try:
            label = int(row[0])
            values = [float(c) for c in row[1:]]
        except ValueError as exc:
            raise DatasetError(f"{path}: line {lineno}: {exc}") from None
        if label < 0:
            raise DatasetError(f"{path}: line {lineno}: negative label")
        if not all(math.isfinite(v) for v in values):
            raise DatasetError(f"{path}: line {lineno}: non-finite feature")
        labels.append(label)
        feats.append(values)
    if not labels:
        raise DatasetError(f"{path}: no data rows")
    labels = np.array(labels, dtype=int)
    return Dataset(np.array(feats, dtype=np.float64), labels, int(labels.max()) + 1)


@dataclass(frozen=True)
class SupervisedConfig:
    hidden: int = 128
    depth_steps: int = 100
    step: float = 0.01
    epochs: int = 100
    learning_rate: float = 0.1
    batch_size: int = 32
    nonlinearity: str = "abs"
    generator: str = "iso"
    gate_count: int = 1
    trig_degree: int = 5
    init_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        for name in ("hidden", "depth_steps", "epochs", "batch_size", "gate_count"):
            if int(getattr(self, name)) != getattr(self, name) or getattr(self, name) < 1:
                raise ValueError(f"{name} must be a positive integer")
        for name in ("step", "learning_rate", "init_scale"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.trig_degree < 0:
            raise ValueError("trig_degree must be >= 0")
        if self.generator not in GENERATOR_KINDS:
            raise ValueError(f"generator must be one of {GENERATOR_KINDS}")
        self.flow_config()

    def flow_config(self):
        return FlowConfig(depth_steps=self.depth_steps, horizon=self.depth_steps * self.step,
                          step=self.step, nonlinearity=self.nonlinearity)


@dataclass(frozen=True)
class ClassifierParams:
    omega1: np.ndarray  # (n, d), orthonormal columns
    readout: np.ndarray  # (k, n)
    bias: np.ndarray  # (n,)
    w0: np.ndarray  # (n, n); ignored by the trig baseline
    generator: object

    @classmethod
    def random(cls, input_dim, class_count, cfg):
        rng = np.random.default_rng(cfg.seed)
        n = cfg.hidden
        if n < input_dim:
            raise DimensionError("hidden width must be at least the input dimension")
        if cfg.generator == "iso":
            gen = IsoGenerator(q=random_symmetric(n, rng, cfg.init_scale),
                               n_mat=random_symmetric(n, rng, cfg.init_scale))
        elif cfg.generator == "gated":
            gen = GatedGenerator.random(n, cfg.gate_count, rng, cfg.init_scale)
        else:
            gen = TrigBaselineGenerator.random(n, cfg.trig_degree, rng, cfg.init_scale)
        return cls(
            omega1=random_stiefel(n, input_dim, rng),
            readout=rng.standard_normal((class_count, n)) / math.sqrt(n),
            bias=np.zeros(n),
            w0=haar_random_orthogonal(n, rng),
            generator=gen,
        )


def classify_tape(x, params, cfg):
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != params.omega1.shape[1]:
        raise DimensionError(f"input has dim {x.shape[-1]}, classifier expects {params.omega1.shape[1]}")
    tape = forward(x @ params.omega1.T, params.w0, params.generator, cfg.flow_config(),
                   bias=params.bias)
    return tape, tape.x_final @ params.readout.T


def classify_forward(x, params, cfg):
    """Logits ``V x_N`` for inputs ``x`` of shape ``(d,)`` or ``(B, d)``."""
    return classify_tape(x, params, cfg)[1]


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(logits, labels):
    z = logits - logits.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    return float(-logp[np.arange(labels.size), labels].mean())


def loss_and_gradients(x, labels, params, cfg):
    """Mean cross-entropy, its gradients, and per-example gradient-ratio ranges."""
    tape, logits = classify_tape(x, params, cfg)
    p = softmax(logits)
    loss = cross_entropy(logits, labels)
    g_logits = p.copy()
    g_logits[np.arange(labels.size), labels] -= 1.0
    g_logits /= labels.size
    g_xn = g_logits @ params.readout
    fg = flow_backward(tape, params.generator, g_xn)
    norms = np.linalg.norm(fg.activations.g, axis=-1)  # (N+1, B)
    live = norms[-1] > 0
    ratios = norms[:, live] / norms[-1, live]
    grads = {
        "omega1": fg.x0.T @ x,
        "readout": g_logits.T @ tape.x_final,
        "bias": fg.bias,
        "w0": fg.w0,
        "generator": fg.params,
    }
    ratio_range = (float(ratios.min()), float(ratios.max())) if ratios.size else (math.nan, math.nan)
    return loss, grads, ratio_range


def descent_step(params, grads, lr):
    """Riemannian descent: rotations for ``Omega1``/``W0``, additive elsewhere."""
    gen = params.generator
    new_gen = {}
    for name, g in grads["generator"].items():
        if gen.kind == "iso":
            g = 0.5 * (g + g.T)
        new_gen[name] = getattr(gen, name) - lr * g
    w0 = params.w0
    if grads["w0"] is not None:
        w0 = rotate(w0, tangent_skew(grads["w0"], w0), -lr, defect=orthogonality_defect)
    return ClassifierParams(
        omega1=rotate(params.omega1, tangent_skew(grads["omega1"], params.omega1), -lr),
        readout=params.readout - lr * grads["readout"],
        bias=params.bias - lr * grads["bias"],
        w0=w0,
        generator=gen.with_params(new_gen),
    )


@dataclass
class SupervisedHistory:
    epoch: list = field(default_factory=list)
    loss: list = field(default_factory=list)
    accuracy: list = field(default_factory=list)
    min_ratio: list = field(default_factory=list)
    max_ratio: list = field(default_factory=list)
    bounds: tuple = (0.0, math.inf)
    params: ClassifierParams | None = None

    CSV_COLUMNS = ("epoch", "loss", "accuracy", "min_ratio", "max_ratio")

    def rows(self):
        return [tuple(getattr(self, c)[i] for c in self.CSV_COLUMNS)
                for i in range(len(self.epoch))]

    def ratios_within_bounds(self, slack=1e-9):
        lo, hi = self.bounds
        return all(a >= lo - slack and b <= hi + slack
                   for a, b in zip(self.min_ratio, self.max_ratio) if not math.isnan(a))


def evaluate(ds, params, cfg):
    logits = classify_forward(ds.features, params, cfg)
    return cross_entropy(logits, ds.labels), float(np.mean(logits.argmax(axis=-1) == ds.labels))


def train_supervised(ds, cfg, params=None, callback=None):
    """Mini-batch Riemannian descent on softmax cross-entropy.

    Each epoch visits the data in an order drawn from ``(seed, epoch)``. Loss
    and accuracy are measured on the full dataset after the epoch; the ratio
    columns span every example of every batch in the epoch.
    """
    if len(ds) == 0:
        raise DatasetError("dataset is empty")
    if params is None:
        params = ClassifierParams.random(ds.dim, ds.class_count, cfg)
    hist = SupervisedHistory(bounds=lemma1_bounds(cfg.depth_steps, cfg.step))
    count = len(ds)
    for epoch in range(1, cfg.epochs + 1):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(count)
        lo, hi = math.inf, -math.inf
        for start in range(0, count, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss, grads, (rmin, rmax) = loss_and_gradients(ds.features[idx], ds.labels[idx], params, cfg)
            if not math.isfinite(loss):
                raise IntegrationError(f"non-finite loss at epoch {epoch}", step=epoch)
            if not math.isnan(rmin):
                lo, hi = min(lo, rmin), max(hi, rmax)
            params = descent_step(params, grads, cfg.learning_rate)
        loss, acc = evaluate(ds, params, cfg)
        if not math.isfinite(loss):
            raise IntegrationError(f"non-finite loss at epoch {epoch}", step=epoch)
        hist.epoch.append(epoch)
        hist.loss.append(loss)
        hist.accuracy.append(acc)
        hist.min_ratio.append(lo if lo <= hi else math.nan)
        hist.max_ratio.append(hi if lo <= hi else math.nan)
        if callback is not None:
            callback(epoch, hist)
    hist.params = params
    return hist

