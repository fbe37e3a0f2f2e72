"""Dense real linear algebra on structured square matrices.

Matrices are plain ``numpy`` float64 arrays. The ``as_*`` helpers validate the
structural type (skew, symmetric, orthogonal, Stiefel) and return the array
unchanged; a violation raises :class:`ManifoldError` rather than repairing the
input. Most routines accept leading batch dimensions ``(..., n, n)``.
"""

from __future__ import annotations

import math

import numpy as np

from .exceptions import DimensionError, ManifoldError

SKEW_TOL = 1e-12
SYM_TOL = 1e-12
ORTHO_TOL = 1e-9

# Higham (2005) Pade coefficients and 1-norm thresholds.
_PADE = {
    3: (120.0, 60.0, 12.0, 1.0),
    5: (30240.0, 15120.0, 3360.0, 420.0, 30.0, 1.0),
    7: (17297280.0, 8648640.0, 1995840.0, 277200.0, 25200.0, 1512.0, 56.0, 1.0),
    9: (17643225600.0, 8821612800.0, 2075673600.0, 302702400.0, 30270240.0,
        2162160.0, 110880.0, 3960.0, 90.0, 1.0),
    13: (64764752532480000.0, 32382376266240000.0, 7771770303897600.0,
         1187353796428800.0, 129060195264000.0, 10559470521600.0,
         670442572800.0, 33522128640.0, 1323241920.0, 40840800.0, 960960.0,
         16380.0, 182.0, 1.0),
}
_THETA = {
    3: 1.495585217958292e-2,
    5: 2.539398330063230e-1,
    7: 9.504178996162932e-1,
    9: 2.097847961257068e0,
    13: 5.371920351148152e0,
}


def transpose(a):
    return np.swapaxes(a, -1, -2)


def _as_array(m):
    a = np.asarray(m, dtype=np.float64)
    if a.ndim < 2:
        raise DimensionError(f"expected a matrix, got shape {a.shape}")
    return a


def _require_square(a, name="matrix"):
    if a.shape[-1] != a.shape[-2]:
        raise DimensionError(f"{name} must be square, got shape {a.shape}")


def as_matrix(m):
    a = _as_array(m)
    if not np.all(np.isfinite(a)):
        raise ManifoldError("matrix has non-finite entries")
    return a


def as_skew(m, tol=SKEW_TOL):
    a = as_matrix(m)
    _require_square(a)
    err = np.max(np.abs(a + transpose(a)), initial=0.0)
    if err > tol:
        raise ManifoldError(f"not skew-symmetric: max |A + A^T| = {err:.3e}")
    return a


def as_symmetric(m, tol=SYM_TOL):
    a = as_matrix(m)
    _require_square(a)
    err = np.max(np.abs(a - transpose(a)), initial=0.0)
    if err > tol:
        raise ManifoldError(f"not symmetric: max |A - A^T| = {err:.3e}")
    return a


def as_orthogonal(m, tol=ORTHO_TOL):
    a = as_matrix(m)
    _require_square(a)
    err = np.max(orthogonality_defect(a), initial=0.0)
    if err > tol:
        raise ManifoldError(f"not orthogonal: ||W^T W - I||_F = {err:.3e}")
    return a


def stiefel_defect(m):
    """Frobenius defect of the orthonormality constraint of a Stiefel matrix.

    Tall (or square) matrices need orthonormal columns, wide ones orthonormal
    rows.
    """
    a = np.asarray(m, dtype=np.float64)
    rows, cols = a.shape[-2:]
    gram = transpose(a) @ a if rows >= cols else a @ transpose(a)
    eye = np.eye(gram.shape[-1])
    return np.linalg.norm(gram - eye, axis=(-2, -1))


def as_stiefel(m, tol=ORTHO_TOL):
    a = as_matrix(m)
    err = np.max(stiefel_defect(a), initial=0.0)
    if err > tol:
        raise ManifoldError(f"not a Stiefel matrix: defect = {err:.3e}")
    return a


def orthogonality_defect(w):
    """Return ``||W^T W - I||_F`` (batched over leading dimensions)."""
    a = _as_array(w)
    _require_square(a)
    eye = np.eye(a.shape[-1])
    return np.linalg.norm(transpose(a) @ a - eye, axis=(-2, -1))


def antisymmetrize(m):
    """Return ``M - M^T`` (no factor of one half)."""
    a = _as_array(m)
    _require_square(a)
    return a - transpose(a)


def symmetrize(m):
    """Return ``(M + M^T) / 2``."""
    a = _as_array(m)
    _require_square(a)
    return 0.5 * (a + transpose(a))


def commutator(a, b):
    """Lie bracket ``AB - BA``."""
    a = _as_array(a)
    b = _as_array(b)
    _require_square(a, "A")
    _require_square(b, "B")
    if a.shape[-1] != b.shape[-1]:
        raise DimensionError(f"commutator of {a.shape} and {b.shape}")
    return a @ b - b @ a


def _pade(a, m):
    coeffs = _PADE[m]
    eye = np.broadcast_to(np.eye(a.shape[-1]), a.shape)
    a2 = a @ a
    if m == 13:
        a4 = a2 @ a2
        a6 = a4 @ a2
        b = coeffs
        u = a @ (a6 @ (b[13] * a6 + b[11] * a4 + b[9] * a2)
                 + b[7] * a6 + b[5] * a4 + b[3] * a2 + b[1] * eye)
        v = (a6 @ (b[12] * a6 + b[10] * a4 + b[8] * a2)
             + b[6] * a6 + b[4] * a4 + b[2] * a2 + b[0] * eye)
    else:
        powers = [eye, a2]
        for _ in range((m - 1) // 2 - 1):
            powers.append(powers[-1] @ a2)
        u_inner = sum(coeffs[2 * k + 1] * p for k, p in enumerate(powers))
        v = sum(coeffs[2 * k] * p for k, p in enumerate(powers))
        u = a @ u_inner
    return np.linalg.solve(v - u, v + u)


def expm(a):
    """Matrix exponential by scaling and squaring with diagonal Pade.

    Works on any real square matrix (the Frechet block trick needs the general
    case) with arbitrary leading batch dimensions. Each batch item picks its
    own Pade degree and squaring count, so an item's result does not depend on
    what else shares the batch.
    """
    a = _as_array(a)
    _require_square(a)
    if not np.all(np.isfinite(a)):
        raise ManifoldError("expm of a matrix with non-finite entries")
    batch_shape = a.shape[:-2]
    n = a.shape[-1]
    flat = a.reshape(-1, n, n)
    norms = np.abs(flat).sum(axis=-2).max(axis=-1)
    out = np.empty_like(flat)

    degree = np.full(flat.shape[0], 13)
    for m in (9, 7, 5, 3):
        degree[norms <= _THETA[m]] = m
    squarings = np.zeros(flat.shape[0], dtype=int)
    big = norms > _THETA[13]
    if np.any(big):
        squarings[big] = np.ceil(np.log2(norms[big] / _THETA[13])).astype(int)

    for m in np.unique(degree):
        idx = np.nonzero(degree == m)[0]
        s = squarings[idx]
        scaled = flat[idx] / np.ldexp(1.0, s)[:, None, None]
        r = _pade(scaled, int(m))
        for k in range(int(s.max(initial=0))):
            live = s > k
            r[live] = r[live] @ r[live]
        out[idx] = r
    return out.reshape(batch_shape + (n, n))


def expm_skew(a):
    """Exponential of a skew-symmetric matrix; the result is orthogonal.

    Items small enough for unscaled Pade use :func:`expm`. Larger ones go
    through the eigendecomposition of the Hermitian ``iA``, which stays
    orthogonal to rounding at any norm where repeated squaring would not.
    """
    a = as_skew(a)
    n = a.shape[-1]
    flat = a.reshape(-1, n, n)
    big = np.abs(flat).sum(axis=-2).max(axis=-1) > _THETA[13]
    if not np.any(big):
        return expm(a)
    out = np.empty_like(flat)
    if not np.all(big):
        out[~big] = expm(flat[~big])
    lam, v = np.linalg.eigh(1j * flat[big])
    # A = V diag(-i lam) V^H
    out[big] = ((v * np.exp(-1j * lam)[:, None, :]) @ np.conj(np.swapaxes(v, -1, -2))).real
    return out.reshape(a.shape)


def expm_frechet(a, e):
    """Return ``(exp(A), L(A, E))`` for skew ``A``.

    ``L(A, E)`` is the directional derivative of ``exp`` at ``A`` along ``E``,
    read off the upper-right block of ``exp([[A, E], [0, A]])``.
    """
    a = as_skew(a)
    e = _as_array(e)
    if e.shape[-2:] != a.shape[-2:]:
        raise DimensionError(f"direction {e.shape} does not match {a.shape}")
    a, e = np.broadcast_arrays(a, e)
    n = a.shape[-1]
    block = np.zeros(a.shape[:-2] + (2 * n, 2 * n))
    block[..., :n, :n] = a
    block[..., n:, n:] = a
    block[..., :n, n:] = e
    r = expm(block)
    return r[..., :n, :n], r[..., :n, n:]


def eig_symmetric(s):
    """Eigenvalues of a symmetric matrix in ascending order."""
    return np.linalg.eigvalsh(as_symmetric(s))


def spectral_norm(m):
    return np.linalg.norm(np.asarray(m, dtype=np.float64), ord=2, axis=(-2, -1))


def haar_random_orthogonal(dim, seed=None):
    """Haar-distributed orthogonal matrix via QR with the R-diagonal sign fix."""
    if dim < 1:
        raise DimensionError("dim must be positive")
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((dim, dim))
    q, r = np.linalg.qr(z)
    return q * np.where(np.diag(r) < 0, -1.0, 1.0)


def random_stiefel(rows, cols, seed=None):
    """Random Stiefel matrix with orthonormal columns (tall) or rows (wide)."""
    rng = np.random.default_rng(seed)
    tall = rows >= cols
    big, small = (rows, cols) if tall else (cols, rows)
    q, r = np.linalg.qr(rng.standard_normal((big, small)))
    q = q * np.where(np.diag(r) < 0, -1.0, 1.0)
    return q if tall else np.ascontiguousarray(q.T)


def random_symmetric(dim, seed=None, scale=1.0):
    rng = np.random.default_rng(seed)
    m = rng.standard_normal((dim, dim))
    return scale * 0.5 * (m + m.T) / math.sqrt(dim)


def random_skew(dim, seed=None, scale=1.0):
    rng = np.random.default_rng(seed)
    m = rng.standard_normal((dim, dim))
    return scale * 0.5 * (m - m.T)
