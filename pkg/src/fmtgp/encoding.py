"""Finite-dimensional encodings of functional covariates.

Every functional channel is sampled on a common grid.  A :class:`Basis`
holds the atoms evaluated on that grid together with the quadrature
weights used for every continuous inner product, so projections, Gram
matrices and distances are all computed with the same rule.

Supported encodings are PCA, clamped B-splines (Cox--de Boor), Haar
wavelets, and the two hybrids where PCA is run on the B-spline or Haar
coefficients.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.linalg

from .errors import (
    EncodingError,
    InvalidKnotsError,
    InvalidLevelError,
    ReducedRankError,
    ShapeError,
    SingularProjectionError,
)


class BasisKind(str, Enum):
    PCA = "PCA"
    BSPLINE = "BSPLINE"
    HAAR = "HAAR"
    BSPLINE_PCA = "BSPLINE_PCA"
    HAAR_PCA = "HAAR_PCA"

    @classmethod
    def _missing_(cls, value):
        if isinstance(value, str):
            key = value.strip().upper().replace("-", "_").replace("+", "_")
            for member in cls:
                if member.value == key:
                    return member
        return None


def quadrature_weights(grid, domain=None):
    """Cell-width quadrature weights for samples on ``grid``.

    Each grid point owns the part of ``domain`` closer to it than to any
    other point.  With the default domain ``(grid[0], grid[-1])`` this is
    exactly the trapezoid rule; with a cell-centred grid on ``domain`` it
    is the midpoint rule, which integrates piecewise-constant atoms
    aligned with the cells exactly.
    """
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 1 or grid.size < 2:
        raise ShapeError("grid must be one-dimensional with at least 2 points")
    if np.any(np.diff(grid) <= 0):
        raise ShapeError("grid must be strictly increasing")
    a, b = (grid[0], grid[-1]) if domain is None else map(float, domain)
    mids = 0.5 * (grid[1:] + grid[:-1])
    edges = np.concatenate([[a], mids, [b]])
    return np.diff(edges)


@dataclass(frozen=True)
class FunctionalSample:
    """One channel of one replicate, discretized on ``grid``."""

    channel_index: int
    grid: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        grid = np.asarray(self.grid, dtype=float)
        values = np.asarray(self.values, dtype=float)
        if grid.ndim != 1 or grid.size < 2:
            raise ShapeError("grid must be one-dimensional with at least 2 points")
        if np.any(np.diff(grid) <= 0):
            raise ShapeError("grid must be strictly increasing")
        if values.shape != grid.shape:
            raise ShapeError(f"values shape {values.shape} does not match grid {grid.shape}")
        if not np.all(np.isfinite(values)):
            raise ValueError("functional sample contains non-finite values")
        if self.channel_index < 1:
            raise ValueError("channel_index is 1-based")
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "values", values)


@dataclass(frozen=True)
class Basis:
    """Basis atoms evaluated on a grid.

    Attributes
    ----------
    kind : BasisKind
    grid : ndarray, shape (n_grid,)
    atoms : ndarray, shape (p, n_grid)
        Row ``r`` is the r-th basis function on the grid.
    weights : ndarray, shape (n_grid,)
        Quadrature weights defining the inner product on the grid.
    gram : ndarray, shape (p, p)
        ``atoms @ diag(weights) @ atoms.T``.
    mean : ndarray or None
        Subtracted from samples before projection (PCA only).
    eigenvalues : ndarray or None
        Full sorted spectrum for PCA bases.
    meta : dict
        Construction parameters (order, knots, level, ...).
    """

    kind: BasisKind
    grid: np.ndarray
    atoms: np.ndarray
    weights: np.ndarray
    gram: np.ndarray
    mean: np.ndarray | None = None
    eigenvalues: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    @property
    def size(self):
        return self.atoms.shape[0]

    def project(self, values):
        """Least-squares coefficients for one sample or a stack of samples."""
        values = np.asarray(values, dtype=float)
        single = values.ndim == 1
        F = np.atleast_2d(values)
        if F.shape[1] != self.grid.size:
            raise ShapeError(f"samples have {F.shape[1]} grid points, basis has {self.grid.size}")
        if self.mean is not None:
            F = F - self.mean
        try:
            factor = scipy.linalg.cho_factor(self.gram, lower=True)
        except np.linalg.LinAlgError as exc:
            raise SingularProjectionError("basis Gram matrix is singular on this grid") from exc
        eig = np.linalg.eigvalsh(self.gram)
        if eig[0] <= 1e-12 * max(eig[-1], np.finfo(float).tiny):
            raise SingularProjectionError(
                f"basis design is rank deficient (Gram condition {eig[-1] / max(eig[0], 1e-300):.2e})")
        rhs = (F * self.weights) @ self.atoms.T
        beta = scipy.linalg.cho_solve(factor, rhs.T).T
        return beta[0] if single else beta

    def reconstruct(self, coeffs):
        out = np.asarray(coeffs) @ self.atoms
        if self.mean is not None:
            out = out + self.mean
        return out

    def select(self, index):
        """Sub-basis made of the atoms in ``index`` (order preserved)."""
        index = np.asarray(index, dtype=int)
        atoms = self.atoms[index]
        meta = dict(self.meta, selected=index.tolist())
        eig = None if self.eigenvalues is None else self.eigenvalues
        return Basis(self.kind, self.grid, atoms, self.weights,
                     _gram(atoms, self.weights), self.mean, eig, meta)

    def to_dict(self):
        return {
            "kind": self.kind.value,
            "grid": self.grid.tolist(),
            "atoms": self.atoms.tolist(),
            "weights": self.weights.tolist(),
            "gram": self.gram.tolist(),
            "mean": None if self.mean is None else self.mean.tolist(),
            "eigenvalues": None if self.eigenvalues is None else self.eigenvalues.tolist(),
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d):
        opt = lambda v: None if v is None else np.asarray(v, dtype=float)  # noqa: E731
        return cls(BasisKind(d["kind"]), np.asarray(d["grid"], dtype=float),
                   np.asarray(d["atoms"], dtype=float), np.asarray(d["weights"], dtype=float),
                   np.asarray(d["gram"], dtype=float), opt(d.get("mean")),
                   opt(d.get("eigenvalues")), dict(d.get("meta") or {}))

    def to_json(self, path):
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def from_json(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


def _gram(atoms, weights):
    G = (atoms * weights) @ atoms.T
    return 0.5 * (G + G.T)


def project_onto_basis(sample, basis):
    """Coefficients minimizing the quadrature-weighted squared residual.

    Parameters
    ----------
    sample : FunctionalSample or array_like
        A sample on ``basis.grid`` (a bare array is taken to be on that grid).
    basis : Basis

    Raises
    ------
    SingularProjectionError
        If the atoms are linearly dependent on the grid.
    """
    if isinstance(sample, FunctionalSample):
        if sample.grid.shape != basis.grid.shape or not np.allclose(sample.grid, basis.grid,
                                                                    rtol=0, atol=1e-12):
            raise ShapeError("sample and basis are not on the same grid")
        values = sample.values
    else:
        values = np.asarray(sample, dtype=float)
        if values.ndim != 1:
            raise ShapeError("project_onto_basis takes one sample; use Basis.project for stacks")
    return basis.project(values)


# -- PCA ----------------------------------------------------------------------

def _fix_signs(vectors):
    # rows; largest-magnitude entry made positive for reproducibility
    idx = np.argmax(np.abs(vectors), axis=1)
    signs = np.sign(vectors[np.arange(vectors.shape[0]), idx])
    signs[signs == 0] = 1.0
    return vectors * signs[:, None]


def _n_components_for_inertia(eigenvalues, inertia):
    lam = np.clip(eigenvalues, 0.0, None)
    total = lam.sum()
    ratio = np.cumsum(lam) / total
    # guard against the last cumulative ratio rounding to just below 1
    return int(min(np.searchsorted(ratio, inertia - 1e-15) + 1, lam.size))


def pca_fit(samples, grid, n_components=None, inertia=None):
    """Functional PCA of replicates sampled on a common grid.

    The atoms are the leading eigenvectors of ``(1/n_f) Fc^T Fc`` where
    ``Fc`` is the centred sample matrix.  They are orthonormal for the
    plain Euclidean inner product on the grid, so the basis weights are
    all one and the Gram matrix is the identity.  Give exactly one of
    ``n_components`` or ``inertia``.
    """
    F = np.asarray(samples, dtype=float)
    grid = np.asarray(grid, dtype=float)
    if F.ndim != 2 or F.shape[1] != grid.size:
        raise ShapeError(f"samples must be (n_f, {grid.size}), got {F.shape}")
    if F.shape[0] < 2:
        raise ValueError("PCA needs at least 2 replicates")
    if (n_components is None) == (inertia is None):
        raise ValueError("give exactly one of n_components or inertia")
    n_f = F.shape[0]
    mean = F.mean(axis=0)
    Fc = F - mean
    _, sv, vt = np.linalg.svd(Fc, full_matrices=False)
    eigenvalues = np.zeros(grid.size)
    eigenvalues[: sv.size] = sv**2 / n_f
    lam_max = eigenvalues[0]
    n_pos = int(np.sum(eigenvalues > max(1e-12 * lam_max, 0.0))) if lam_max > 0 else 0
    if n_pos == 0:
        raise ReducedRankError("all PCA eigenvalues are zero (constant dataset)")
    if inertia is not None:
        if not 0 < inertia <= 1:
            raise ValueError("inertia threshold must lie in (0, 1]")
        n_components = _n_components_for_inertia(eigenvalues, inertia)
    if n_components < 1:
        raise ValueError("n_components must be >= 1")
    if n_components > n_pos:
        raise ReducedRankError(f"requested {n_components} components but only {n_pos} "
                               "eigenvalues are positive")
    atoms = _fix_signs(vt[:n_components])
    weights = np.ones(grid.size)
    return Basis(BasisKind.PCA, grid, atoms, weights, _gram(atoms, weights), mean,
                 eigenvalues, {"n_components": int(n_components)})


def explained_inertia(basis):
    lam = np.clip(basis.eigenvalues, 0.0, None)
    return float(lam[: basis.size].sum() / lam.sum())


# -- B-splines ----------------------------------------------------------------

def clamped_knots(order, interior_knots, domain):
    a, b = map(float, domain)
    interior = np.asarray(interior_knots, dtype=float)
    return np.concatenate([np.full(order, a), interior, np.full(order, b)])


def bspline_design(knots, order, u):
    """Evaluate all order-``order`` B-splines on ``u`` by Cox--de Boor.

    Terms with a vanishing denominator are dropped.  The last non-empty
    knot interval is closed on the right so the basis sums to one on the
    whole closed domain.

    Returns
    -------
    ndarray, shape (len(knots) - order, len(u))
    """
    t = np.asarray(knots, dtype=float)
    u = np.atleast_1d(np.asarray(u, dtype=float))
    if order < 1:
        raise InvalidKnotsError("B-spline order must be >= 1")
    if np.any(np.diff(t) < 0):
        raise InvalidKnotsError("knot vector must be non-decreasing")
    if t.size < order + 1:
        raise InvalidKnotsError("knot vector too short for this order")
    n_int = t.size - 1
    B = ((t[:-1, None] <= u) & (u < t[1:, None])).astype(float)
    nonempty = np.nonzero(t[1:] > t[:-1])[0]
    if nonempty.size:
        last = nonempty[-1]
        B[last, u == t[last + 1]] = 1.0
    for k in range(2, order + 1):
        n_k = n_int - k + 1
        out = np.zeros((n_k, u.size))
        for r in range(n_k):
            d1 = t[r + k - 1] - t[r]
            d2 = t[r + k] - t[r + 1]
            if d1 > 0:
                out[r] += (u - t[r]) / d1 * B[r]
            if d2 > 0:
                out[r] += (t[r + k] - u) / d2 * B[r + 1]
        B = out
    return B


def bspline_basis(order, interior_knot_count, domain, grid, interior_knots=None):
    """Clamped B-spline basis with ``interior_knot_count + order`` atoms.

    Interior knots are equally spaced inside ``domain`` unless given
    explicitly.  The Gram matrix uses the grid quadrature weights.
    """
    a, b = map(float, domain)
    if not b > a:
        raise InvalidKnotsError("domain must satisfy a < b")
    if interior_knots is None:
        interior_knots = np.linspace(a, b, interior_knot_count + 2)[1:-1]
    interior_knots = np.asarray(interior_knots, dtype=float)
    if interior_knots.size != interior_knot_count:
        raise InvalidKnotsError("interior_knots length does not match interior_knot_count")
    if interior_knots.size and (np.any(np.diff(interior_knots) <= 0)
                                or interior_knots[0] <= a or interior_knots[-1] >= b):
        raise InvalidKnotsError("interior knots must be strictly increasing inside the domain")
    knots = clamped_knots(order, interior_knots, (a, b))
    grid = np.asarray(grid, dtype=float)
    atoms = bspline_design(knots, order, grid)
    weights = quadrature_weights(grid, (a, b))
    meta = {"order": int(order), "knots": knots.tolist(), "domain": [a, b]}
    return Basis(BasisKind.BSPLINE, grid, atoms, weights, _gram(atoms, weights), meta=meta)


# -- Haar wavelets --------------------------------------------------------------

def haar_atoms(level, domain, u):
    """Scaling atom plus detail atoms for scales ``0..level`` on ``u``.

    Atoms are normalized to unit L2 norm on ``domain``.  Order: the
    scaling function, then details by increasing scale and translation.
    """
    if level < 0:
        raise InvalidLevelError("wavelet level must be >= 0")
    a, b = map(float, domain)
    u = np.atleast_1d(np.asarray(u, dtype=float))
    width = b - a
    t = (u - a) / width
    inside = (t >= 0) & (t <= 1)
    t = np.where(t >= 1, np.nextafter(1.0, 0.0), t)
    rows = [np.where(inside, 1.0, 0.0)]
    for j in range(level + 1):
        x = 2.0**j * t
        k = np.floor(x)
        frac = x - k
        for kk in range(2**j):
            on = inside & (k == kk)
            rows.append(np.where(on, np.where(frac < 0.5, 1.0, -1.0), 0.0) * 2.0 ** (j / 2))
    return np.vstack(rows) / np.sqrt(width)


def haar_basis(level, domain, grid):
    """Truncated Haar system (2**(level+1) atoms) sampled on ``grid``.

    When the grid is cell-centred on ``domain`` with a cell count that is
    a multiple of ``2**(level+1)`` the quadrature is exact and the Gram
    matrix is the identity to rounding.  Otherwise the Gram matrix is the
    quadrature approximation and is used as such downstream.
    """
    if level < 0:
        raise InvalidLevelError("wavelet level must be >= 0")
    grid = np.asarray(grid, dtype=float)
    atoms = haar_atoms(level, domain, grid)
    weights = quadrature_weights(grid, domain)
    meta = {"level": int(level), "domain": [float(domain[0]), float(domain[1])]}
    return Basis(BasisKind.HAAR, grid, atoms, weights, _gram(atoms, weights), meta=meta)


# -- PCA on coefficients --------------------------------------------------------

@dataclass(frozen=True)
class CoefficientPCA:
    """PCA fitted on basis coefficients; maps coefficients to scores."""

    mean: np.ndarray
    components: np.ndarray  # (p*, p)
    eigenvalues: np.ndarray  # full spectrum, decreasing
    whiten: bool = False

    @property
    def n_components(self):
        return self.components.shape[0]

    def transform(self, coeffs):
        scores = (np.asarray(coeffs, dtype=float) - self.mean) @ self.components.T
        if self.whiten:
            scores = scores / np.sqrt(np.maximum(self.eigenvalues[: self.n_components], 1e-12))
        return scores

    def explained(self):
        lam = np.clip(self.eigenvalues, 0.0, None)
        return float(lam[: self.n_components].sum() / lam.sum())

    def to_dict(self):
        return {"mean": self.mean.tolist(), "components": self.components.tolist(),
                "eigenvalues": self.eigenvalues.tolist(), "whiten": self.whiten}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["mean"], float), np.asarray(d["components"], float),
                   np.asarray(d["eigenvalues"], float), bool(d["whiten"]))


def fit_coefficient_pca(coeffs, target_dim=None, inertia=None, whiten=False):
    B = np.asarray(coeffs, dtype=float)
    if B.ndim != 2:
        raise ShapeError("coefficient matrix must be 2-D")
    if (target_dim is None) == (inertia is None):
        raise ValueError("give exactly one of target_dim or inertia")
    n, p = B.shape
    mean = B.mean(axis=0)
    _, sv, vt = np.linalg.svd(B - mean, full_matrices=True)
    eigenvalues = np.zeros(p)
    eigenvalues[: sv.size] = sv**2 / n
    rank = int(np.sum(eigenvalues > 1e-12 * eigenvalues[0])) if eigenvalues[0] > 0 else 0
    if inertia is not None:
        if rank == 0:
            raise ReducedRankError("coefficient matrix has zero variance")
        target_dim = _n_components_for_inertia(eigenvalues, inertia)
    if target_dim > p:
        raise ReducedRankError(f"target dimension {target_dim} exceeds coefficient length {p}")
    if target_dim > rank and not (target_dim == p and not whiten):
        raise ReducedRankError(f"target dimension {target_dim} exceeds coefficient rank {rank}")
    return CoefficientPCA(mean, _fix_signs(vt[:target_dim]), eigenvalues, whiten)


def pca_on_coefficients(coeffs, target_dim, whiten=False):
    """Scores of centred coefficient vectors on the leading directions.

    With ``target_dim`` equal to the coefficient length and no whitening
    this is a rigid rotation, so pairwise distances are preserved.
    """
    return fit_coefficient_pca(coeffs, target_dim, whiten=whiten).transform(coeffs)


# -- distances ------------------------------------------------------------------

def weighted_l2_sq(a, b, lengthscales, grams=None):
    """Squared length-scale-weighted L2 distance between two encoded inputs.

    ``a`` and ``b`` are sequences of per-channel coefficient vectors;
    ``grams`` the per-channel Gram matrices (identity when omitted).
    """
    ls = np.atleast_1d(np.asarray(lengthscales, dtype=float))
    if len(a) != len(b) or len(a) != ls.size:
        raise ShapeError(f"channel counts differ: {len(a)}, {len(b)}, {ls.size} length-scales")
    if np.any(ls <= 0):
        raise ValueError("length-scales must be positive")
    total = 0.0
    for d in range(len(a)):
        da = np.asarray(a[d], dtype=float)
        db = np.asarray(b[d], dtype=float)
        if da.shape != db.shape or da.ndim != 1:
            raise ShapeError(f"channel {d}: coefficient shapes {da.shape} and {db.shape} differ")
        delta = da - db
        if grams is None or grams[d] is None:
            q = delta @ delta
        else:
            G = np.asarray(grams[d])
            if G.shape != (delta.size, delta.size):
                raise ShapeError(f"channel {d}: Gram shape {G.shape} does not match coefficients")
            q = delta @ G @ delta
        total += q / ls[d] ** 2
    return float(total)


@dataclass(frozen=True)
class EncodedInputs:
    """Per-channel coefficient matrices of ``n`` replicates plus Gram matrices."""

    coeffs: tuple
    grams: tuple

    def __post_init__(self):
        coeffs = tuple(np.atleast_2d(np.asarray(c, dtype=float)) for c in self.coeffs)
        grams = tuple(np.asarray(g, dtype=float) for g in self.grams)
        if len(coeffs) != len(grams):
            raise ShapeError("channel count differs from number of Gram matrices")
        if len({c.shape[0] for c in coeffs}) > 1:
            raise ShapeError("channels disagree on the number of replicates")
        for c, g in zip(coeffs, grams):
            if g.shape != (c.shape[1], c.shape[1]):
                raise ShapeError("Gram matrix does not match coefficient length")
            if not np.all(np.isfinite(c)):
                raise ValueError("encoded coefficients must be finite")
        object.__setattr__(self, "coeffs", coeffs)
        object.__setattr__(self, "grams", grams)

    @property
    def n(self):
        return self.coeffs[0].shape[0]

    @property
    def n_channels(self):
        return len(self.coeffs)

    def row(self, i):
        return [c[i] for c in self.coeffs]

    def take(self, index):
        return EncodedInputs(tuple(c[index] for c in self.coeffs), self.grams)

    def pairwise_sq(self, other=None):
        """Unweighted squared distances per channel, shape (d_f, n, m).

        Dividing channel ``d`` by ``l_d**2`` and summing gives the squared
        weighted distance.  For ``other=None`` the result is exactly
        symmetric with a zero diagonal.
        """
        other_ = self if other is None else other
        if other_.n_channels != self.n_channels:
            raise ShapeError("channel counts differ")
        out = np.empty((self.n_channels, self.n, other_.n))
        for d, (A, B, G) in enumerate(zip(self.coeffs, other_.coeffs, self.grams)):
            if A.shape[1] != B.shape[1]:
                raise ShapeError(f"channel {d}: coefficient lengths differ")
            delta = A[:, None, :] - B[None, :, :]
            out[d] = np.einsum("ijp,pq,ijq->ij", delta, G, delta)
        np.maximum(out, 0.0, out=out)
        if other is None:
            iu = np.triu_indices(self.n, 1)
            for d in range(self.n_channels):
                out[d][(iu[1], iu[0])] = out[d][iu]
                np.fill_diagonal(out[d], 0.0)
        return out

    def to_dict(self):
        return {"coeffs": [c.tolist() for c in self.coeffs], "grams": [g.tolist() for g in self.grams]}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(np.asarray(c, float) for c in d["coeffs"]),
                   tuple(np.asarray(g, float) for g in d["grams"]))


# -- fitted per-channel encoders ------------------------------------------------

@dataclass(frozen=True)
class ChannelEncoder:
    basis: Basis
    coefficient_pca: CoefficientPCA | None = None

    @property
    def gram(self):
        if self.coefficient_pca is not None:
            return np.eye(self.coefficient_pca.n_components)
        return self.basis.gram

    def transform(self, samples):
        beta = self.basis.project(samples)
        if self.coefficient_pca is not None:
            beta = self.coefficient_pca.transform(beta)
        return np.atleast_2d(beta)

    def to_dict(self):
        return {"basis": self.basis.to_dict(),
                "coefficient_pca": None if self.coefficient_pca is None
                else self.coefficient_pca.to_dict()}

    @classmethod
    def from_dict(cls, d):
        cp = d.get("coefficient_pca")
        return cls(Basis.from_dict(d["basis"]), None if cp is None else CoefficientPCA.from_dict(cp))


def _most_energetic(basis, samples, k):
    beta = basis.project(samples)
    energy = np.mean(beta**2, axis=0) * np.diag(basis.gram)
    keep = np.sort(np.argsort(-energy, kind="stable")[:k])
    return basis.select(keep)


@dataclass(frozen=True)
class EncodingConfig:
    """Encoding settings shared by every channel.

    ``d_proj`` coefficients are kept per channel.  For BSPLINE and HAAR
    the full basis is built first and the ``d_proj`` most energetic atoms
    (largest mean squared coefficient over training replicates) are
    retained.  Hybrids run whitened PCA on the full coefficient vectors.
    """

    kind: BasisKind = BasisKind.PCA
    d_proj: int | None = 6
    inertia: float | None = None
    bspline_order: int = 4
    bspline_interior_knots: int | None = None
    haar_level: int = 4
    whiten: bool = True

    def __post_init__(self):
        object.__setattr__(self, "kind", BasisKind(self.kind))


@dataclass(frozen=True)
class FunctionalEncoder:
    """Encoders fitted on training replicates, frozen for test replicates."""

    channels: tuple
    config: EncodingConfig

    def transform(self, samples):
        """Encode a list of per-channel sample matrices (n × n_grid each)."""
        if len(samples) != len(self.channels):
            raise EncodingError(f"expected {len(self.channels)} channels, got {len(samples)}")
        coeffs, grams = [], []
        for enc, F in zip(self.channels, samples):
            F = np.atleast_2d(np.asarray(F, dtype=float))
            if F.shape[1] != enc.basis.grid.size:
                raise EncodingError(f"channel grid has {F.shape[1]} points, encoder expects "
                                    f"{enc.basis.grid.size}")
            coeffs.append(enc.transform(F))
            grams.append(enc.gram)
        return EncodedInputs(tuple(coeffs), tuple(grams))

    def to_dict(self):
        cfg = {k: (v.value if isinstance(v, Enum) else v) for k, v in self.config.__dict__.items()}
        return {"config": cfg, "channels": [c.to_dict() for c in self.channels]}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(ChannelEncoder.from_dict(c) for c in d["channels"]),
                   EncodingConfig(**d["config"]))


def _fit_channel(F, grid, cfg):
    grid = np.asarray(grid, dtype=float)
    domain = (grid[0], grid[-1])
    kind = cfg.kind
    if kind is BasisKind.PCA:
        return ChannelEncoder(pca_fit(F, grid, n_components=cfg.d_proj, inertia=cfg.inertia))
    if kind in (BasisKind.BSPLINE, BasisKind.BSPLINE_PCA):
        n_int = cfg.bspline_interior_knots
        if n_int is None:
            n_int = max(cfg.d_proj - cfg.bspline_order, 0) if kind is BasisKind.BSPLINE else 16
        basis = bspline_basis(cfg.bspline_order, n_int, domain, grid)
    else:
        basis = haar_basis(cfg.haar_level, domain, grid)
    if kind in (BasisKind.BSPLINE, BasisKind.HAAR):
        if cfg.d_proj is not None and basis.size > cfg.d_proj:
            basis = _most_energetic(basis, F, cfg.d_proj)
        return ChannelEncoder(basis)
    beta = basis.project(F)
    cpca = fit_coefficient_pca(beta, cfg.d_proj, cfg.inertia if cfg.d_proj is None else None,
                               whiten=cfg.whiten)
    return ChannelEncoder(basis, cpca)


def fit_encoder(samples, grid, config=None):
    """Fit one encoder per channel on training replicates.

    Parameters
    ----------
    samples : sequence of ndarray
        One ``(n_f, n_grid)`` matrix per channel.
    grid : array_like
        Common sampling grid.
    config : EncodingConfig, optional
    """
    cfg = config or EncodingConfig()
    channels = tuple(_fit_channel(np.asarray(F, dtype=float), grid, cfg) for F in samples)
    return FunctionalEncoder(channels, cfg)


# -- CSV -----------------------------------------------------------------------------

def write_channel_csv(path, grid, samples):
    """One channel: header ``u,rep_1,...,rep_n``; one row per grid point."""
    samples = np.atleast_2d(samples)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["u"] + [f"rep_{i + 1}" for i in range(samples.shape[0])])
        for j, u in enumerate(grid):
            w.writerow([repr(float(u))] + [repr(float(v)) for v in samples[:, j]])


def read_channel_csv(path):
    """Return ``(grid, samples)`` with samples shaped (n_replicates, n_grid)."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    if not header or header[0].strip() != "u":
        raise ShapeError(f"{path}: first header column must be 'u'")
    data = np.array([[float(x) for x in r] for r in body if r], dtype=float)
    if data.ndim != 2 or data.shape[1] != len(header):
        raise ShapeError(f"{path}: ragged rows")
    return data[:, 0], data[:, 1:].T.copy()


def read_channels(paths: Sequence[str | Path]):
    grids, samples = [], []
    for p in paths:
        g, F = read_channel_csv(p)
        grids.append(g)
        samples.append(F)
    for g in grids[1:]:
        if g.shape != grids[0].shape or not np.allclose(g, grids[0]):
            raise ShapeError("channel CSVs are not on a common grid")
    if len({F.shape[0] for F in samples}) > 1:
        raise ShapeError("channel CSVs disagree on the number of replicates")
    return grids[0], samples
