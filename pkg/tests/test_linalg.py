import math

import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings
from hypothesis import strategies as st

from odetoode.exceptions import DimensionError, ManifoldError
from odetoode.linalg import (antisymmetrize, as_orthogonal, as_skew, as_stiefel, as_symmetric,
                             commutator, eig_symmetric, expm, expm_frechet, expm_skew,
                             haar_random_orthogonal, orthogonality_defect, random_skew,
                             random_stiefel, random_symmetric, spectral_norm, symmetrize)


def taylor_exp(a, terms=40):
    out = np.eye(a.shape[0])
    term = np.eye(a.shape[0])
    for k in range(1, terms + 1):
        term = term @ a / k
        out = out + term
    return out


seeds = st.integers(0, 2 ** 32 - 1)
dims = st.integers(1, 12)


def test_antisymmetrize_examples():
    s = random_symmetric(4, 0)
    assert np.array_equal(antisymmetrize(s), np.zeros((4, 4)))
    assert np.array_equal(antisymmetrize([[0.0, 1.0], [0.0, 0.0]]), [[0.0, 1.0], [-1.0, 0.0]])
    a = random_skew(5, 1)
    assert np.array_equal(antisymmetrize(a), 2 * a)


def test_antisymmetrize_rejects_nonsquare():
    with pytest.raises(DimensionError):
        antisymmetrize(np.ones((2, 3)))


def test_symmetrize_examples():
    assert np.allclose(symmetrize(random_skew(4, 0)), 0.0, atol=0)
    s = random_symmetric(4, 3)
    assert np.array_equal(symmetrize(s), s)
    assert np.array_equal(symmetrize([[1.0, 2.0], [0.0, 1.0]]), [[1.0, 1.0], [1.0, 1.0]])
    with pytest.raises(DimensionError):
        symmetrize(np.ones((3, 2)))


def test_commutator_examples():
    b = np.random.default_rng(0).standard_normal((3, 3))
    assert np.array_equal(commutator(np.eye(3), b), np.zeros((3, 3)))
    out = commutator(np.diag([1.0, 2.0]), [[0.0, 1.0], [1.0, 0.0]])
    assert np.array_equal(out, [[0.0, -1.0], [1.0, 0.0]])
    assert np.array_equal(commutator(np.diag([1.0, 5.0]), np.diag([3.0, -2.0])), np.zeros((2, 2)))
    with pytest.raises(DimensionError):
        commutator(np.eye(2), np.eye(3))


@given(dims, seeds)
def test_commutator_of_symmetric_is_skew(n, seed):
    rng = np.random.default_rng(seed)
    c = commutator(random_symmetric(n, rng), random_symmetric(n, rng))
    assert np.array_equal(c, -c.T)


def test_expm_skew_examples():
    assert np.array_equal(expm_skew(np.zeros((4, 4))), np.eye(4))
    r = expm_skew([[0.0, math.pi / 2], [-math.pi / 2, 0.0]])
    assert np.allclose(r, [[0.0, 1.0], [-1.0, 0.0]], atol=1e-15)
    a = random_skew(6, 11)
    assert np.max(np.abs(expm_skew(a) - taylor_exp(a))) <= 1e-10


def test_expm_skew_rejects_nonskew_and_nonfinite():
    with pytest.raises(ManifoldError):
        expm_skew(np.ones((2, 2)))
    bad = np.zeros((2, 2))
    bad[0, 1], bad[1, 0] = np.nan, np.nan
    with pytest.raises(ManifoldError):
        expm_skew(bad)


@settings(max_examples=60)
@given(dims, seeds, st.floats(0.0, 10.0))
def test_expm_skew_is_orthogonal(n, seed, scale):
    r = expm_skew(random_skew(n, seed, scale))
    assert orthogonality_defect(r) <= 1e-10


@settings(max_examples=40)
@given(st.integers(1, 10), seeds, st.floats(0.0, 10.0))
def test_expm_matches_scipy(n, seed, norm):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((n, n))
    a *= norm / max(np.linalg.norm(a, 2), 1e-300)
    ref = scipy.linalg.expm(a)
    assert np.linalg.norm(expm(a) - ref) <= 1e-12 * max(1.0, np.linalg.norm(ref)) * 10


def test_expm_batch_items_are_independent():
    rng = np.random.default_rng(3)
    batch = np.stack([random_skew(5, rng, s) for s in (0.001, 0.3, 2.0, 40.0)])
    together = expm(batch)
    for k in range(batch.shape[0]):
        assert np.array_equal(together[k], expm(batch[k]))


def test_expm_frechet_examples():
    a = random_skew(4, 0)
    _, l0 = expm_frechet(a, np.zeros((4, 4)))
    assert np.array_equal(l0, np.zeros((4, 4)))
    e = np.random.default_rng(1).standard_normal((4, 4))
    r, l1 = expm_frechet(np.zeros((4, 4)), e)
    assert np.allclose(r, np.eye(4), atol=1e-15)
    assert np.allclose(l1, e, atol=1e-14)


def test_expm_frechet_finite_difference_oracle():
    rng = np.random.default_rng(7)
    a = random_skew(4, rng)
    e = rng.standard_normal((4, 4))
    h = 1e-6
    fd = (scipy.linalg.expm(a + h * e) - scipy.linalg.expm(a - h * e)) / (2 * h)
    _, l = expm_frechet(a, e)
    assert np.max(np.abs(l - fd)) <= 1e-6


@settings(max_examples=40)
@given(st.integers(1, 8), seeds)
def test_expm_frechet_relative_accuracy(n, seed):
    rng = np.random.default_rng(seed)
    a = random_skew(n, rng)
    a /= max(1.0, np.linalg.norm(a, 2))
    e = rng.standard_normal((n, n))
    e /= max(1.0, np.linalg.norm(e, 2))
    h = 1e-5
    fd = (scipy.linalg.expm(a + h * e) - scipy.linalg.expm(a - h * e)) / (2 * h)
    _, l = expm_frechet(a, e)
    assert np.linalg.norm(l - fd) <= 1e-5 * max(np.linalg.norm(fd), 1e-300)
    ref = scipy.linalg.expm_frechet(a, e, compute_expm=False)
    assert np.allclose(l, ref, atol=1e-12)


def test_expm_frechet_dimension_mismatch():
    with pytest.raises(DimensionError):
        expm_frechet(np.zeros((3, 3)), np.zeros((2, 2)))


@settings(max_examples=40)
@given(st.integers(1, 10), seeds)
def test_expm_contraction(n, seed):
    rng = np.random.default_rng(seed)
    a1 = random_skew(n, rng, rng.uniform(0, 4))
    a2 = random_skew(n, rng, rng.uniform(0, 4))
    lhs = spectral_norm(expm_skew(a1) - expm_skew(a2))
    assert lhs <= spectral_norm(a1 - a2) + 1e-10


def test_haar_examples():
    w = haar_random_orthogonal(1, 5)
    assert w.shape == (1, 1) and abs(w[0, 0]) == 1.0
    assert np.array_equal(haar_random_orthogonal(6, 9), haar_random_orthogonal(6, 9))
    assert orthogonality_defect(haar_random_orthogonal(16, 2)) <= 1e-10


def test_haar_entry_symmetry():
    # each entry of a Haar matrix has mean 0 and variance 1/dim
    rng = np.random.default_rng(0)
    n, count = 16, 10_000
    vals = np.array([haar_random_orthogonal(n, rng)[0, 0] for _ in range(count)])
    assert abs(vals.mean()) <= 4 * math.sqrt(1.0 / n / count)


def test_eig_symmetric_examples():
    assert np.allclose(eig_symmetric(np.eye(3)), [1, 1, 1])
    assert np.allclose(eig_symmetric(np.diag([3.0, 1.0, 2.0])), [1, 2, 3])
    s = random_symmetric(5, 4)
    lam, v = np.linalg.eigh(s)
    assert np.linalg.norm(s - v @ np.diag(lam) @ v.T) <= 1e-8
    assert np.allclose(eig_symmetric(s), lam, atol=1e-12)
    assert abs(eig_symmetric(s).sum() - np.trace(s)) <= 1e-8
    with pytest.raises(ManifoldError):
        eig_symmetric([[1.0, 2.0], [0.0, 1.0]])


@given(dims, seeds)
def test_conjugation_preserves_spectrum(n, seed):
    rng = np.random.default_rng(seed)
    q = random_symmetric(n, rng)
    w = haar_random_orthogonal(n, rng)
    h = w.T @ q @ w
    assert np.allclose(eig_symmetric(symmetrize(h)), eig_symmetric(q), atol=1e-8)


def test_orthogonality_defect_examples():
    assert orthogonality_defect(np.eye(4)) == 0.0
    assert math.isclose(orthogonality_defect(2 * np.eye(2)), 3 * math.sqrt(2), rel_tol=1e-15)


def test_structural_validators():
    assert as_skew(random_skew(3, 0)) is not None
    assert as_symmetric(random_symmetric(3, 0)) is not None
    as_orthogonal(haar_random_orthogonal(3, 0))
    with pytest.raises(ManifoldError):
        as_orthogonal(2 * np.eye(3))
    with pytest.raises(ManifoldError):
        as_symmetric(random_skew(3, 0, 1.0) + np.eye(3))
    with pytest.raises(ManifoldError):
        as_skew(np.eye(2) * 1e-11)
    as_skew(np.eye(2) * 1e-13)


@given(st.integers(1, 9), st.integers(1, 9), seeds)
def test_random_stiefel(rows, cols, seed):
    om = random_stiefel(rows, cols, seed)
    assert om.shape == (rows, cols)
    as_stiefel(om)


@pytest.mark.parametrize("scale", [10.0, 1e3, 1e5])
def test_expm_skew_large_norm_stays_orthogonal(scale):
    a = random_skew(16, 3, scale)
    r = expm_skew(a)
    assert orthogonality_defect(r) <= 1e-12
    ref = scipy.linalg.expm(a)
    assert np.max(np.abs(r - ref)) <= 1e-14 * spectral_norm(a) * 16


def test_expm_skew_mixed_batch_matches_items():
    batch = np.stack([random_skew(4, k, s) for k, s in enumerate((0.01, 50.0, 1.0, 400.0))])
    together = expm_skew(batch)
    for k in range(4):
        assert np.array_equal(together[k], expm_skew(batch[k]))
