"""Matérn and periodic kernels and the three covariance blocks.

The separable covariance is ``K_S ⊗ K_f ⊗ K_u``.  The single variance
parameter lives on ``K_f``; ``K_S = L_S L_S^T`` comes from its Cholesky
factor and ``K_u`` is correlation-scaled.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import NumericalOverflowError, ShapeError, UnsupportedSmoothnessError

SQRT3 = math.sqrt(3.0)
SQRT5 = math.sqrt(5.0)

_NU_ALIASES = {
    "1/2": 0.5, "0.5": 0.5, "3/2": 1.5, "1.5": 1.5, "5/2": 2.5, "2.5": 2.5,
    "inf": math.inf, "infinity": math.inf, "rbf": math.inf, "se": math.inf,
}


def normalize_nu(nu):
    """Map ``nu`` (number or string such as ``"5/2"``) to a supported float."""
    if isinstance(nu, str):
        key = nu.strip().lower()
        if key not in _NU_ALIASES:
            raise UnsupportedSmoothnessError(f"unsupported Matérn smoothness {nu!r}")
        return _NU_ALIASES[key]
    nu = float(nu)
    if nu in (0.5, 1.5, 2.5) or math.isinf(nu):
        return nu
    raise UnsupportedSmoothnessError(
        f"Matérn smoothness {nu} has no closed form here; use 1/2, 3/2, 5/2 or inf")


def nu_to_str(nu):
    return {0.5: "1/2", 1.5: "3/2", 2.5: "5/2"}.get(nu, "inf")


def matern(r, nu=2.5, variance=1.0):
    """Matérn kernel as a function of the scaled distance ``r >= 0``.

    >>> round(matern(1.0, 2.5), 5)
    0.52399
    """
    nu = normalize_nu(nu)
    r = np.asarray(r, dtype=float)
    if nu == 0.5:
        k = np.exp(-r)
    elif nu == 1.5:
        k = (1.0 + SQRT3 * r) * np.exp(-SQRT3 * r)
    elif nu == 2.5:
        k = (1.0 + SQRT5 * r + 5.0 / 3.0 * r**2) * np.exp(-SQRT5 * r)
    else:
        k = np.exp(-0.5 * r**2)
    out = variance * k
    return float(out) if out.ndim == 0 else out


def matern_dr2(r, nu=2.5):
    """Derivative of the unit-variance Matérn kernel with respect to ``r**2``.

    Finite at ``r = 0`` for every ``nu`` except 1/2, where the value at
    zero is returned as 0; callers multiply it by a squared distance that
    vanishes there.
    """
    nu = normalize_nu(nu)
    r = np.asarray(r, dtype=float)
    if nu == 0.5:
        with np.errstate(divide="ignore", invalid="ignore"):
            out = np.where(r > 0, -np.exp(-r) / (2.0 * r), 0.0)
    elif nu == 1.5:
        out = -1.5 * np.exp(-SQRT3 * r)
    elif nu == 2.5:
        out = -5.0 / 6.0 * (1.0 + SQRT5 * r) * np.exp(-SQRT5 * r)
    else:
        out = -0.5 * np.exp(-0.5 * r**2)
    return out


def periodic(u, u2, lengthscale=0.5, period=1.0):
    """``exp(-(2 / l**2) sin**2(pi |u - u'| / p))``."""
    if lengthscale <= 0 or period <= 0:
        raise ValueError("periodic kernel needs positive length-scale and period")
    d = np.abs(np.asarray(u, dtype=float) - np.asarray(u2, dtype=float))
    out = np.exp(-2.0 / lengthscale**2 * np.sin(np.pi * d / period) ** 2)
    return float(out) if np.ndim(out) == 0 else out


@dataclass(frozen=True)
class MaternSpec:
    nu: float = 2.5
    variance: float = 1.0
    lengthscale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "nu", normalize_nu(self.nu))
        if self.variance <= 0 or np.any(np.asarray(self.lengthscale) <= 0):
            raise ValueError("variance and length-scales must be positive")


@dataclass(frozen=True)
class PeriodicSpec:
    lengthscale: float = 0.5
    period: float = 1.0

    def __post_init__(self):
        if self.lengthscale <= 0 or self.period <= 0:
            raise ValueError("periodic kernel needs positive length-scale and period")


@dataclass(frozen=True)
class ScalarKernel:
    """Kernel on the scalar covariate.

    ``kind`` is ``"matern"`` or ``"matern_plus_periodic"``.  Only the
    Matérn length-scale is a hyperparameter; the periodic part is fixed.
    ``weights`` scale the two additive terms (unit weights by default).
    """

    kind: str = "matern"
    nu: float = 2.5
    periodic: PeriodicSpec = PeriodicSpec()
    weights: tuple = (1.0, 1.0)

    def __post_init__(self):
        if self.kind not in ("matern", "matern_plus_periodic"):
            raise ValueError(f"unknown scalar kernel kind {self.kind!r}")
        object.__setattr__(self, "nu", normalize_nu(self.nu))

    def __call__(self, u, u2, lengthscale):
        """Kernel matrix between point sets ``u`` and ``u2``."""
        u = np.atleast_1d(np.asarray(u, dtype=float))
        u2 = np.atleast_1d(np.asarray(u2, dtype=float))
        d = np.abs(u[:, None] - u2[None, :])
        K = self.weights[0] * matern(d / lengthscale, self.nu)
        if self.kind == "matern_plus_periodic":
            K = K + self.weights[1] * periodic(u[:, None], u2[None, :],
                                                self.periodic.lengthscale, self.periodic.period)
        return K

    def dlog_lengthscale(self, u, u2, lengthscale):
        """Derivative of the kernel matrix with respect to ``log(lengthscale)``."""
        u = np.atleast_1d(np.asarray(u, dtype=float))
        u2 = np.atleast_1d(np.asarray(u2, dtype=float))
        r2 = ((u[:, None] - u2[None, :]) / lengthscale) ** 2
        return self.weights[0] * matern_dr2(np.sqrt(r2), self.nu) * (-2.0 * r2)

    def diag(self, u):
        u = np.atleast_1d(np.asarray(u, dtype=float))
        total = self.weights[0] + (self.weights[1] if self.kind == "matern_plus_periodic" else 0.0)
        return np.full(u.shape, total)

    def to_dict(self):
        return {"kind": self.kind, "nu": nu_to_str(self.nu),
                "period": self.periodic.period, "lengthscale_per": self.periodic.lengthscale,
                "weights": list(self.weights)}

    @classmethod
    def from_dict(cls, d):
        return cls(d.get("kind", "matern"), d.get("nu", 2.5),
                   PeriodicSpec(d.get("lengthscale_per", 0.5), d.get("period", 1.0)),
                   tuple(d.get("weights", (1.0, 1.0))))


@dataclass(frozen=True)
class KernelConfig:
    nu_f: float = 2.5
    scalar: ScalarKernel = ScalarKernel()

    def __post_init__(self):
        object.__setattr__(self, "nu_f", normalize_nu(self.nu_f))

    def to_dict(self):
        return {"functional": {"nu": nu_to_str(self.nu_f)}, "scalar": self.scalar.to_dict()}

    @classmethod
    def from_dict(cls, d):
        return cls(d.get("functional", {}).get("nu", 2.5), ScalarKernel.from_dict(d.get("scalar", {})))


# -- task factor ----------------------------------------------------------------

def n_task_params(S):
    return S * (S + 1) // 2


def task_factor_from_raw(raw, S):
    """Lower-triangular factor from its row-major packed entries.

    Diagonal entries are stored as logs.
    """
    raw = np.asarray(raw, dtype=float)
    if raw.size != n_task_params(S):
        raise ShapeError(f"expected {n_task_params(S)} task-factor entries, got {raw.size}")
    L = np.zeros((S, S))
    L[np.tril_indices(S)] = raw
    idx = np.arange(S)
    L[idx, idx] = np.exp(L[idx, idx])
    return L


def raw_from_task_factor(L):
    L = np.asarray(L, dtype=float)
    if np.any(np.diag(L) <= 0) or np.any(np.triu(L, 1) != 0):
        raise ValueError("task factor must be lower triangular with positive diagonal")
    packed = L.copy()
    idx = np.arange(L.shape[0])
    packed[idx, idx] = np.log(L[idx, idx])
    return packed[np.tril_indices(L.shape[0])]


def task_factor_from_covariance(K_S):
    return np.linalg.cholesky(np.asarray(K_S, dtype=float))


# -- blocks ------------------------------------------------------------------------

@dataclass(frozen=True)
class CovBlocks:
    K_S: np.ndarray
    K_f: np.ndarray
    K_u: np.ndarray

    @property
    def shape(self):
        return self.K_S.shape[0], self.K_f.shape[0], self.K_u.shape[0]

    def __iter__(self):
        return iter((self.K_S, self.K_f, self.K_u))

    def dense(self):
        return np.kron(self.K_S, np.kron(self.K_f, self.K_u))


def _symmetrize_exact(K):
    iu = np.triu_indices(K.shape[0], 1)
    K[(iu[1], iu[0])] = K[iu]
    return K


def functional_block(sqdist, lengthscales, variance, nu=2.5):
    """Matérn block on encoded inputs from per-channel squared distances.

    ``sqdist`` has shape (d_f, n, m) as returned by
    :meth:`EncodedInputs.pairwise_sq`.
    """
    ls = np.atleast_1d(np.asarray(lengthscales, dtype=float))
    if ls.size != sqdist.shape[0]:
        raise ShapeError(f"{ls.size} length-scales for {sqdist.shape[0]} channels")
    r2 = np.tensordot(1.0 / ls**2, sqdist, axes=1)
    return matern(np.sqrt(r2), nu, variance)


def _check_finite(**blocks):
    for name, K in blocks.items():
        if not np.all(np.isfinite(K)):
            raise NumericalOverflowError(f"non-finite entries in covariance block {name}")


def build_blocks(theta, enc, grid, config=None, sqdist=None):
    """Covariance blocks ``(K_S, K_f, K_u)`` for hyperparameters ``theta``.

    Parameters
    ----------
    theta : Hyperparameters
    enc : EncodedInputs
        Training inputs.  Ignored when ``sqdist`` is supplied.
    grid : array_like
        Scalar covariate values.
    config : KernelConfig, optional
    sqdist : ndarray, optional
        Precomputed ``enc.pairwise_sq()``.
    """
    config = config or KernelConfig()
    L_S = theta.task_factor
    K_S = _symmetrize_exact(L_S @ L_S.T)
    D = enc.pairwise_sq() if sqdist is None else sqdist
    K_f = _symmetrize_exact(functional_block(D, theta.lengthscales_f, theta.sigma2, config.nu_f))
    K_u = _symmetrize_exact(config.scalar(grid, grid, theta.lengthscale_u))
    _check_finite(K_S=K_S, K_f=K_f, K_u=K_u)
    return CovBlocks(K_S, K_f, K_u)
