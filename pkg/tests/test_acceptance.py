"""End-to-end acceptance gate; a PASS/FAIL line per criterion is printed in the summary."""

import math
import time

import numpy as np
import pytest

from oracles import FD_H, block_error, fd_instance
from odetoode.cli import run
from odetoode.envs import default_env, make_objective
from odetoode.es import ESConfig, es_terms, train_es
from odetoode.flows import BLOCKS, FlowConfig, IsoGenerator, ThetaParams, matrix_trajectory
from odetoode.flows import policy_forward
from odetoode.grad import finite_difference_gradient, parameter_gradients
from odetoode.linalg import (eig_symmetric, haar_random_orthogonal, orthogonality_defect,
                             random_symmetric, symmetrize)
from odetoode.stability import (AppendixSpec, ContrastSpec, GridSpec, baseline_contrast,
                                verify_appendix_bounds, verify_lemma1)
from odetoode.supervised import SupervisedConfig, synth_dataset, train_supervised


@pytest.fixture(scope="module")
def bound_report():
    return verify_appendix_bounds(default_env(), AppendixSpec())


@pytest.mark.criterion(1, "gradient ratios within finite-depth bounds on the full grid")
def test_gradient_ratio_grid(record_property):
    start = time.perf_counter()
    report = verify_lemma1(GridSpec())
    elapsed = time.perf_counter() - start
    s = report.summary()
    record_property("detail", f"{s['cells']} cells, {s['failed']} failed, ratios in "
                              f"[{s['min_ratio']:.4f}, {s['max_ratio']:.4f}], {elapsed:.1f}s")
    assert s["cells"] == 5 * 3 * 2 * 2 * 5
    assert report.passed, s["failures"]
    assert 0 < s["min_ratio"] and s["max_ratio"] <= math.e
    assert elapsed < 120


@pytest.mark.criterion(2, "orthogonality drift over 10^4 steps at d = 16")
def test_orthogonality_drift(record_property):
    rng = np.random.default_rng(2)
    gen = IsoGenerator(random_symmetric(16, rng), random_symmetric(16, rng))
    ws, _, _ = matrix_trajectory(haar_random_orthogonal(16, rng), gen, FlowConfig(depth_steps=10_000))
    worst = max(orthogonality_defect(w) for w in ws)
    record_property("detail", f"worst defect {worst:.2e}")
    assert len(ws) == 10_001
    assert worst <= 1e-10


@pytest.mark.criterion(3, "isospectrality along ISO trajectories")
def test_isospectrality(record_property):
    rng = np.random.default_rng(3)
    worst = 0.0
    for dim in (2, 8, 16, 32):
        gen = IsoGenerator(random_symmetric(dim, rng, 2.0), random_symmetric(dim, rng, 2.0))
        ws, _, _ = matrix_trajectory(haar_random_orthogonal(dim, rng), gen,
                                     FlowConfig(depth_steps=1000))
        lam = eig_symmetric(gen.q)
        for w in ws:
            worst = max(worst, float(np.max(np.abs(eig_symmetric(symmetrize(w.T @ gen.q @ w)) - lam))))
    record_property("detail", f"worst eigenvalue gap {worst:.2e}")
    assert worst <= 1e-8


@pytest.mark.criterion(4, "parameter gradients match finite differences on 20 instances")
def test_gradient_correctness(record_property):
    rng = np.random.default_rng(4)
    worst = 0.0
    for k in range(20):
        n = int(rng.integers(2, 9))
        depth = int(rng.integers(1, 21))
        d = int(rng.integers(1, n + 1))
        m = int(rng.integers(1, n + 1))
        theta, s, c, cfg, tape = fd_instance(rng, d=d, n=n, m=m, depth=depth)
        analytic = parameter_gradients(tape, theta, c)
        numeric = finite_difference_gradient(lambda th: c @ policy_forward(s, th, cfg), theta, FD_H)
        for name in BLOCKS:
            worst = max(worst, block_error(getattr(analytic, name), getattr(numeric, name)))
    record_property("detail", f"worst error {worst:.2e} of tolerance")
    assert worst <= 1.0


@pytest.mark.criterion(5, "ES estimator: linear, constant and second-moment checks")
def test_es_estimator(bound_report, record_property):
    v = 100_000
    rng = np.random.default_rng(5)
    c = rng.standard_normal(10)
    theta = rng.standard_normal(10)
    cfg = ESConfig(perturbations=v, seed=5)
    lin = es_terms(lambda p: p @ c, theta, cfg, vectorized=True)
    lin_z = np.abs(lin.mean(axis=0) - c) / (lin.std(axis=0, ddof=1) / math.sqrt(v))
    const = es_terms(lambda p: np.full(p.shape[0], 2.5), theta, cfg, iteration=1, vectorized=True)
    const_z = np.abs(const.mean(axis=0)) / (const.std(axis=0, ddof=1) / math.sqrt(v))
    audit = bound_report["es_second_moment"]
    record_property("detail", f"max z linear {lin_z.max():.2f}, constant {const_z.max():.2f}; "
                              f"second moment {audit.estimate:.4g} <= {audit.bound:.4g}")
    assert np.all(lin_z <= 4.0)
    assert np.all(const_z <= 4.0)
    assert audit.samples == 10_000
    assert audit.passed and audit.estimate <= audit.bound


@pytest.mark.criterion(6, "Lipschitz, policy-norm and exp-contraction audits")
def test_lipschitz_audits(bound_report, record_property):
    names = ("lipschitz_F", "policy_norm", "exp_contraction")
    audits = [bound_report[n] for n in names]
    record_property("detail", ", ".join(f"{a.name} margin {a.worst_margin:.3g} over {a.samples}"
                                        for a in audits))
    for a in audits:
        assert a.samples == 1000 and a.passed, a


@pytest.mark.criterion(7, "ES training improves reward over 10 seeds x 200 iterations")
def test_es_training(record_property):
    env = default_env()
    cfg_flow = FlowConfig(depth_steps=25)
    start = time.perf_counter()
    initial, final, slopes = [], [], []
    for seed in range(10):
        theta0 = ThetaParams.random(env.state_dim, 16, env.action_dim, seed=seed)
        objective = make_objective(env, theta0.dims, cfg_flow)
        hist = train_es(objective, theta0, ESConfig(seed=seed), 200)
        rm = hist.running_min
        assert all(b <= a for a, b in zip(rm, rm[1:]))
        initial.append(hist.objective[0])
        final.append(hist.final_objective)
        slopes.append(hist.trend_slope())
    elapsed = time.perf_counter() - start
    record_property("detail", f"mean reward {np.mean(initial):.3f} -> {np.mean(final):.3f}; "
                              f"running-min slope {np.mean(slopes):.3f} (reference -0.5); "
                              f"{elapsed:.0f}s")
    assert np.mean(final) > np.mean(initial)
    assert elapsed < 600


@pytest.mark.criterion(8, "blobs classification with iso and gated generators")
@pytest.mark.parametrize("generator", ["iso", "gated"])
def test_supervised_blobs(generator, record_property):
    ds = synth_dataset("blobs", 200, seed=0)
    cfg = SupervisedConfig(hidden=16, depth_steps=20, step=0.05, epochs=200, learning_rate=0.1,
                           batch_size=50, generator=generator)
    hist = train_supervised(ds, cfg)
    reached = next((e for e, a in zip(hist.epoch, hist.accuracy) if a >= 0.95), None)
    record_property("detail", f"{generator}: 95% at epoch {reached}, final {hist.accuracy[-1]:.3f}, "
                              f"ratios [{min(hist.min_ratio):.3f}, {max(hist.max_ratio):.3f}] "
                              f"vs [{hist.bounds[0]:.3f}, {hist.bounds[1]:.3f}]")
    assert reached is not None
    assert hist.ratios_within_bounds()


@pytest.mark.criterion(9, "byte-identical CSVs across --threads")
def test_thread_reproducibility(tmp_path, record_property):
    es = ["--iterations", "5", "--set", "es.runs=2", "--perturbations", "40"]
    bounds = ["--samples", "200", "--es-estimates", "1000"]
    runs = [("stability", [], ("report.csv", "contrast.csv")),
            ("train-es", es, ("history.csv",)),
            ("verify-bounds", bounds, ("report.csv",))]
    checked = 0
    for command, extra, files in runs:
        outs = []
        for threads in (1, 4):
            out = tmp_path / f"{command}-{threads}"
            args = [command, "--seed", "7", "--threads", str(threads), "--out", str(out),
                    "--no-timestamp"] + extra
            assert run(args) == 0
            outs.append(out)
        for name in files:
            assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes(), (command, name)
            checked += 1
    record_property("detail", f"{checked} CSVs identical for threads 1 and 4")


@pytest.mark.criterion(10, "baseline contrast report")
def test_baseline_contrast(record_property):
    report = baseline_contrast(ContrastSpec())
    measured = [r.baseline_max for r in report.rows if not math.isnan(r.baseline_max)]
    record_property("detail", f"{len(report.rows)} rows; ODEtoODE in bounds; baseline max ratio "
                              f"{max(measured):.4g}")
    assert len(report.rows) == 2 * 3 * 3 * 3
    assert report.passed
    assert all(math.isfinite(r.ode_min) and math.isfinite(r.ode_max) for r in report.rows)
    assert all(not math.isnan(r.baseline_max) or r.baseline_error for r in report.rows)
