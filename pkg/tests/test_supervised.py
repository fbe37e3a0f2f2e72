import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import FD_H, block_error
from odetoode.exceptions import DatasetError, DimensionError
from odetoode.flows import IsoGenerator
from odetoode.grad import finite_difference, lemma1_bounds
from odetoode.supervised import (ClassifierParams, Dataset, SupervisedConfig, classify_forward,
                                 classify_tape, cross_entropy, evaluate, load_csv,
                                 loss_and_gradients, softmax, synth_dataset, train_supervised)

SMALL = dict(hidden=6, depth_steps=10, step=0.05, batch_size=20)


def test_config_defaults_and_validation():
    cfg = SupervisedConfig()
    assert (cfg.hidden, cfg.step, cfg.epochs, cfg.generator) == (128, 0.01, 100, "iso")
    assert math.isclose(cfg.flow_config().eta, 0.01)
    for bad in (dict(hidden=0), dict(step=0.0), dict(generator="conv"), dict(epochs=1.5)):
        with pytest.raises(ValueError):
            SupervisedConfig(**bad)


def test_zero_input_gives_zero_logits():
    cfg = SupervisedConfig(**SMALL)
    params = ClassifierParams.random(3, 4, cfg)
    assert np.array_equal(classify_forward(np.zeros(3), params, cfg), np.zeros(4))
    x = np.array([0.3, -0.2, 1.0])
    assert np.array_equal(classify_forward(x, params, cfg), classify_forward(x.copy(), params, cfg))
    with pytest.raises(DimensionError):
        classify_forward(np.zeros(2), params, cfg)


def test_one_step_hand_trace():
    cfg = SupervisedConfig(hidden=1, depth_steps=1, step=1.0, nonlinearity="identity")
    one = np.ones((1, 1))
    params = ClassifierParams(one, one, np.ones(1), one, IsoGenerator(one, one))
    assert np.allclose(classify_forward(np.array([0.7]), params, cfg), [2 * 0.7 + 1.0], atol=1e-15)


@given(st.integers(0, 2 ** 32 - 1))
def test_softmax_sums_to_one(seed):
    z = np.random.default_rng(seed).standard_normal((5, 4)) * 30
    p = softmax(z)
    assert np.all(np.abs(p.sum(axis=-1) - 1.0) <= 1e-12) and np.all(p >= 0)


def test_cross_entropy_examples():
    assert math.isclose(cross_entropy(np.zeros((3, 2)), np.array([0, 1, 0])), math.log(2))
    assert cross_entropy(np.array([[1000.0, 0.0]]), np.array([0])) == 0.0


@pytest.mark.parametrize("kind", ["iso", "gated", "trig_baseline"])
def test_loss_gradients_match_finite_differences(kind):
    rng = np.random.default_rng({"iso": 0, "gated": 1, "trig_baseline": 2}[kind])
    cfg = SupervisedConfig(hidden=4, depth_steps=6, step=0.1, generator=kind, trig_degree=2,
                           init_scale=0.5, seed=3)
    params = ClassifierParams.random(2, 3, cfg)
    while True:
        x = rng.standard_normal((3, 2))
        if np.min(np.abs(classify_tape(x, params, cfg)[0].z)) > 1e-3:
            break
    labels = np.array([0, 2, 1])
    _, grads, _ = loss_and_gradients(x, labels, params, cfg)

    def loss_with(**changes):
        fields = {**params.__dict__, **changes}
        return cross_entropy(classify_forward(x, ClassifierParams(**fields), cfg), labels)

    for name in ("omega1", "readout", "bias") + (() if kind == "trig_baseline" else ("w0",)):
        numeric = finite_difference(lambda v: loss_with(**{name: v}), getattr(params, name), FD_H)
        assert block_error(grads[name], numeric) <= 1.0, name
    gen = params.generator
    for name, value in gen.params().items():
        numeric = finite_difference(
            lambda v: loss_with(generator=gen.with_params({name: v})), value, FD_H)
        assert block_error(grads["generator"][name], numeric) <= 1.0, name


def test_memorization_single_example():
    ds = Dataset(np.array([[0.5, -1.0]]), np.array([1]), 2)
    cfg = SupervisedConfig(hidden=4, depth_steps=10, step=0.1, epochs=500, learning_rate=0.5,
                           batch_size=1)
    hist = train_supervised(ds, cfg)
    assert hist.loss[-1] <= 1e-3
    assert all(b <= a for a, b in zip(hist.loss, hist.loss[1:]))
    assert hist.accuracy[-1] == 1.0


def test_training_is_deterministic_and_tracks_ratios():
    ds = synth_dataset("blobs", 60, seed=4)
    cfg = SupervisedConfig(**SMALL, epochs=3, seed=5)
    a = train_supervised(ds, cfg)
    b = train_supervised(ds, cfg)
    assert a.rows() == b.rows()
    assert a.epoch == [1, 2, 3]
    assert a.bounds == lemma1_bounds(10, 0.05)
    assert a.ratios_within_bounds()


def test_blobs_are_linearly_separable():
    for seed in range(3):
        ds = synth_dataset("blobs", 200, seed=seed)
        design = np.hstack([ds.features, np.ones((200, 1))])
        target = np.where(ds.labels == 1, 1.0, -1.0)
        w, *_ = np.linalg.lstsq(design, target, rcond=None)
        assert np.mean((design @ w > 0) == (ds.labels == 1)) >= 0.99


def test_synth_dataset_properties():
    ds = synth_dataset("blobs", 201, seed=1)
    assert len(ds) == 201 and ds.dim == 2 and ds.class_count == 2
    assert abs(int(np.sum(ds.labels == 0)) - int(np.sum(ds.labels == 1))) <= 1
    again = synth_dataset("blobs", 201, seed=1)
    assert np.array_equal(ds.features, again.features)
    rings = synth_dataset("rings", 100, seed=2)
    r = np.linalg.norm(rings.features, axis=1)
    assert np.all(r[rings.labels == 0] < 2) and np.all(r[rings.labels == 1] > 2)
    with pytest.raises(ValueError):
        synth_dataset("moons", 10)
    with pytest.raises(ValueError):
        synth_dataset("blobs", 1)


def test_evaluate_accuracy_range():
    ds = synth_dataset("rings", 40, seed=3)
    cfg = SupervisedConfig(**SMALL)
    loss, acc = evaluate(ds, ClassifierParams.random(2, 2, cfg), cfg)
    assert loss > 0 and 0.0 <= acc <= 1.0


def write(tmp_path, text):
    path = tmp_path / "data.csv"
    path.write_text(text)
    return str(path)


def test_load_csv_valid(tmp_path):
    ds = load_csv(write(tmp_path, "label,f0,f1\n0,1.0,2.0\n1,-1,0.5\n2,3,4\n"))
    assert len(ds) == 3 and ds.class_count == 3
    assert np.array_equal(ds.features[1], [-1.0, 0.5])


@pytest.mark.parametrize("text,line", [
    ("", None),
    ("label,f0\n", None),
    ("label,x,y\n0,1,2\n", 1),
    ("label,f0,f1\n0,1,2\n1,abc,2\n", 3),
    ("label,f0,f1\n0,1,2\n1,2\n", 3),
    ("label,f0\n-1,2\n", 2),
    ("label,f0\n0,nan\n", 2),
])
def test_load_csv_errors(tmp_path, text, line):
    with pytest.raises(DatasetError) as err:
        load_csv(write(tmp_path, text))
    if line is not None:
        assert f"line {line}" in str(err.value)


def test_load_csv_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_csv(str(tmp_path / "absent.csv"))


def test_dataset_validation():
    with pytest.raises(DatasetError):
        Dataset(np.zeros((3, 2)), np.array([0, 1]), 2)
    with pytest.raises(DatasetError):
        Dataset(np.zeros((2, 2)), np.array([0, 2]), 2)
