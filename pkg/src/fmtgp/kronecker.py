"""Kronecker-structured linear algebra for ``K_S ⊗ K_f ⊗ K_u``.

Vectorization convention
------------------------
A response tensor ``Y`` has shape ``(S, n_f, n_u)`` and is flattened in
row-major order: the task index varies slowest and the scalar-grid index
fastest.  With this order ``np.kron(A_S, np.kron(A_f, A_u)) @ Y.ravel()``
equals ``(Y ×_u A_u ×_f A_f ×_S A_S).ravel()``.  This is the column-major
vec of the axis-reversed tensor, so the factor on the left of the
Kronecker product acts on the slowest axis.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import (
    IndefiniteBlockError,
    InvalidFactorError,
    NotPositiveDefiniteError,
    ShapeError,
    SizeGuardError,
)

JITTER_LEVELS = (1e-10, 1e-8, 1e-6)
NAIVE_MAX_N = 20000
BLOCK_NAMES = ("K_S", "K_f", "K_u")


def vec(Y):
    return np.ascontiguousarray(Y).reshape(-1)


def unvec(x, shape):
    x = np.asarray(x)
    if x.size != int(np.prod(shape)):
        raise ShapeError(f"vector of length {x.size} cannot be reshaped to {tuple(shape)}")
    return x.reshape(shape)


def mode_product(X, A, mode):
    """``X ×_mode A``: multiply every mode-``mode`` fibre of ``X`` by ``A``."""
    if A.shape[1] != X.shape[mode]:
        raise ShapeError(f"matrix with {A.shape[1]} columns applied to mode of size {X.shape[mode]}")
    return np.moveaxis(np.tensordot(A, X, axes=(1, mode)), 0, mode)


def _mode_triangular_solve(X, T, mode, lower, trans=False):
    Xm = np.moveaxis(X, mode, 0)
    shape = Xm.shape
    sol = scipy.linalg.solve_triangular(T, Xm.reshape(shape[0], -1), lower=lower,
                                        trans="T" if trans else "N", check_finite=False)
    return np.moveaxis(sol.reshape(shape), 0, mode)


@dataclass(frozen=True)
class KroneckerCholesky:
    """Cholesky factors of the three blocks with the jitter that was added.

    ``jitter`` holds the absolute diagonal shift applied to each block.
    """

    L_S: np.ndarray
    L_f: np.ndarray
    L_u: np.ndarray
    jitter: tuple = (0.0, 0.0, 0.0)
    log_det_L: float = float("nan")

    def __post_init__(self):
        if np.isnan(self.log_det_L):
            object.__setattr__(self, "log_det_L", kron_logdet(self))

    @property
    def factors(self):
        return self.L_S, self.L_f, self.L_u

    @property
    def shape(self):
        return tuple(L.shape[0] for L in self.factors)

    @property
    def n(self):
        return int(np.prod(self.shape))


def cholesky_with_jitter(K, name="K", levels=JITTER_LEVELS):
    """Lower Cholesky factor, escalating diagonal jitter on failure.

    Returns ``(L, jitter)`` where ``jitter`` is the absolute shift added.
    """
    K = np.asarray(K, dtype=float)
    try:
        return np.linalg.cholesky(K), 0.0
    except np.linalg.LinAlgError:
        pass
    scale = float(np.mean(np.diag(K)))
    if not scale > 0:
        raise NotPositiveDefiniteError(name)
    eye = np.eye(K.shape[0])
    for eps in levels:
        jitter = eps * scale
        try:
            return np.linalg.cholesky(K + jitter * eye), jitter
        except np.linalg.LinAlgError:
            continue
    raise NotPositiveDefiniteError(name)


def block_cholesky(blocks, jitter_levels=JITTER_LEVELS):
    """Factor each block independently; see :func:`cholesky_with_jitter`."""
    out, jit = [], []
    for name, K in zip(BLOCK_NAMES, blocks):
        L, j = cholesky_with_jitter(K, name, jitter_levels)
        out.append(L)
        jit.append(j)
    return KroneckerCholesky(*out, jitter=tuple(jit))


def kron_logdet(kc):
    """``log|L_S ⊗ L_f ⊗ L_u|`` from the factor diagonals."""
    L_S, L_f, L_u = kc.factors if isinstance(kc, KroneckerCholesky) else kc
    diags = [np.diag(L) for L in (L_S, L_f, L_u)]
    if any(np.any(d <= 0) for d in diags):
        raise InvalidFactorError("Cholesky factors must have a strictly positive diagonal")
    S, n_f, n_u = (d.size for d in diags)
    return float(n_f * n_u * np.sum(np.log(diags[0]))
                 + S * n_u * np.sum(np.log(diags[1]))
                 + S * n_f * np.sum(np.log(diags[2])))


def _as_tensor(y, shape):
    y = np.asarray(y, dtype=float)
    if y.shape == tuple(shape):
        return y
    if y.ndim == 1:
        return unvec(y, shape)
    raise ShapeError(f"response of shape {y.shape} does not match {tuple(shape)}")


def modewise_lower_solve(kc, y):
    """``alpha = (L_S ⊗ L_f ⊗ L_u)^{-1} vec(y)`` by three batched solves.

    Solves along the scalar mode, then the functional mode, then the task
    mode.  Neither ``L`` nor its inverse is formed.
    """
    A = _as_tensor(y, kc.shape)
    A = _mode_triangular_solve(A, kc.L_u, 2, lower=True)
    A = _mode_triangular_solve(A, kc.L_f, 1, lower=True)
    A = _mode_triangular_solve(A, kc.L_S, 0, lower=True)
    return vec(A)


def modewise_upper_solve(kc, x):
    """``(L_S ⊗ L_f ⊗ L_u)^{-T} vec(x)``."""
    A = _as_tensor(x, kc.shape)
    A = _mode_triangular_solve(A, kc.L_S, 0, lower=True, trans=True)
    A = _mode_triangular_solve(A, kc.L_f, 1, lower=True, trans=True)
    A = _mode_triangular_solve(A, kc.L_u, 2, lower=True, trans=True)
    return vec(A)


def kron_matvec(A_S, A_f, A_u, x):
    """``(A_S ⊗ A_f ⊗ A_u) x`` through mode products."""
    A_S, A_f, A_u = (np.asarray(A, dtype=float) for A in (A_S, A_f, A_u))
    shape = (A_S.shape[1], A_f.shape[1], A_u.shape[1])
    X = _as_tensor(x, shape)
    X = X @ A_u.T
    X = mode_product(X, A_f, 1)
    X = mode_product(X, A_S, 0)
    return vec(X)


def _guard(n, max_n):
    if n > max_n:
        raise SizeGuardError(f"dense path refused for n = {n} > {max_n}")


def dense_kron(A_S, A_f, A_u, max_n=NAIVE_MAX_N):
    """Explicit Kronecker matrix (size-guarded)."""
    _guard(A_S.shape[0] * A_f.shape[0] * A_u.shape[0], max_n)
    return np.kron(np.kron(A_S, A_f), A_u)


def naive_apply(A_S, A_f, A_u, x, max_n=NAIVE_MAX_N):
    """Dense baseline for :func:`kron_matvec`: builds the full matrix."""
    return dense_kron(np.asarray(A_S, float), np.asarray(A_f, float), np.asarray(A_u, float),
                      max_n) @ np.asarray(x, dtype=float).reshape(-1)


def naive_lower_solve(L_S, L_f, L_u, y, max_n=NAIVE_MAX_N):
    """Dense baseline for :func:`modewise_lower_solve`.

    Forms ``L = L_S ⊗ L_f ⊗ L_u`` explicitly and runs one dense forward
    substitution.
    """
    L = dense_kron(L_S, L_f, L_u, max_n)
    # L.T is Fortran-contiguous, so LAPACK works in place without a copy of L
    return scipy.linalg.solve_triangular(L.T, np.asarray(y, float).reshape(-1), lower=False,
                                         trans="T", check_finite=False)


# -- eigen path (noise) ------------------------------------------------------------------

@dataclass(frozen=True)
class KroneckerEigen:
    """Per-block symmetric eigendecompositions ``K_d = Q_d diag(lam_d) Q_d^T``."""

    Q: tuple
    lam: tuple

    @property
    def shape(self):
        return tuple(q.shape[0] for q in self.Q)

    def spectrum(self):
        lS, lf, lu = self.lam
        return lS[:, None, None] * lf[None, :, None] * lu[None, None, :]


def block_eigen(blocks, tol=1e-8):
    Qs, lams = [], []
    for name, K in zip(BLOCK_NAMES, blocks):
        lam, Q = np.linalg.eigh(np.asarray(K, dtype=float))
        lmax = max(lam[-1], 0.0)
        if lam[0] < -tol * lmax:
            raise IndefiniteBlockError(name, lam[0], lam[-1])
        Qs.append(Q)
        lams.append(np.clip(lam, 0.0, None))
    return KroneckerEigen(tuple(Qs), tuple(lams))


def rotate(eig, x, transpose=False):
    """Apply ``Q_S ⊗ Q_f ⊗ Q_u`` (or its transpose) to a tensor."""
    Q = [q.T if transpose else q for q in eig.Q]
    X = _as_tensor(x, eig.shape)
    X = X @ Q[2].T
    X = mode_product(X, Q[1], 1)
    return mode_product(X, Q[0], 0)


def kron_eigen_solve(blocks, noise_variance, y, eig=None):
    """Solve ``(K + noise I) x = y`` and return ``(x, log|K + noise I|)``.

    ``x`` is returned as a flat vector in the package's vec order.
    """
    if noise_variance < 0:
        raise ValueError("noise variance must be non-negative")
    eig = eig or block_eigen(blocks)
    D = eig.spectrum() + noise_variance
    Yt = rotate(eig, y, transpose=True)
    X = rotate(eig, Yt / D)
    return vec(X), float(np.sum(np.log(D)))
