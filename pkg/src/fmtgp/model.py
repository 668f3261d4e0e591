"""Multitask GP with functional inputs: likelihood, training and prediction.

Training data live on a tensor design: ``n_f`` functional replicates,
``n_u`` scalar grid points and ``S`` tasks, with responses shaped
``(S, n_f, n_u)``.  Without observation noise every solve goes through
the Kronecker Cholesky factors; with a noise variance the per-block
eigendecompositions are used instead.
"""

from __future__ import annotations

import concurrent.futures
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg

from .encoding import EncodedInputs, FunctionalEncoder
from .errors import (
    AllRestartsFailedError,
    CompatibilityError,
    EncodingError,
    FMTGPError,
    InitializationError,
    ShapeError,
)
from .kernels import (
    CovBlocks,
    KernelConfig,
    build_blocks,
    functional_block,
    matern_dr2,
    n_task_params,
    raw_from_task_factor,
    task_factor_from_raw,
)
from .kronecker import (
    JITTER_LEVELS,
    KroneckerCholesky,
    block_cholesky,
    block_eigen,
    kron_eigen_solve,
    kron_matvec,
    modewise_lower_solve,
    modewise_upper_solve,
    mode_product,
    unvec,
)
from .random import stream

FORMAT_VERSION = 1
LOG_2PI = math.log(2.0 * math.pi)


def _exp(x):
    # overflow becomes inf so that block construction reports it
    with np.errstate(over="ignore"):
        return float(np.exp(x))


@dataclass(frozen=True)
class Hyperparameters:
    """Unconstrained hyperparameters.

    The task factor is stored as its ``S(S+1)/2`` packed lower-triangular
    entries with the diagonal in log space.  ``log_sigma2_noise`` is
    ``None`` for the noiseless model.
    """

    task_raw: np.ndarray
    log_sigma2: float
    log_lengthscales_f: np.ndarray
    log_lengthscale_u: float
    log_sigma2_noise: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "task_raw", np.atleast_1d(np.asarray(self.task_raw, float)))
        object.__setattr__(self, "log_lengthscales_f",
                           np.atleast_1d(np.asarray(self.log_lengthscales_f, float)))
        object.__setattr__(self, "log_sigma2", float(self.log_sigma2))
        object.__setattr__(self, "log_lengthscale_u", float(self.log_lengthscale_u))
        if self.log_sigma2_noise is not None:
            object.__setattr__(self, "log_sigma2_noise", float(self.log_sigma2_noise))
        S = int(round((math.sqrt(8 * self.task_raw.size + 1) - 1) / 2))
        if n_task_params(S) != self.task_raw.size:
            raise ShapeError(f"{self.task_raw.size} is not a triangular number of task entries")
        object.__setattr__(self, "_S", S)
        if not np.all(np.isfinite(self.to_vector())):
            raise ValueError("hyperparameters must be finite")

    @classmethod
    def from_natural(cls, task_factor, sigma2, lengthscales_f, lengthscale_u, noise=None):
        return cls(raw_from_task_factor(task_factor), math.log(sigma2),
                   np.log(np.atleast_1d(np.asarray(lengthscales_f, float))),
                   math.log(lengthscale_u), None if noise is None else math.log(noise))

    @property
    def S(self):
        return self._S

    @property
    def d_f(self):
        return self.log_lengthscales_f.size

    @property
    def task_factor(self):
        return task_factor_from_raw(self.task_raw, self.S)

    @property
    def K_S(self):
        L = self.task_factor
        return L @ L.T

    @property
    def sigma2(self):
        return _exp(self.log_sigma2)

    @property
    def lengthscales_f(self):
        with np.errstate(over="ignore"):
            return np.exp(self.log_lengthscales_f)

    @property
    def lengthscale_u(self):
        return _exp(self.log_lengthscale_u)

    @property
    def noise(self):
        return None if self.log_sigma2_noise is None else _exp(self.log_sigma2_noise)

    def task_correlation(self):
        K = self.K_S
        d = np.sqrt(np.diag(K))
        return K / np.outer(d, d)

    def to_vector(self):
        parts = [self.task_raw, [self.log_sigma2], self.log_lengthscales_f, [self.log_lengthscale_u]]
        if self.log_sigma2_noise is not None:
            parts.append([self.log_sigma2_noise])
        return np.concatenate(parts)

    @classmethod
    def from_vector(cls, v, S, d_f, noise):
        v = np.asarray(v, dtype=float)
        m = n_task_params(S)
        expected = m + 2 + d_f + (1 if noise else 0)
        if v.size != expected:
            raise ShapeError(f"parameter vector has {v.size} entries, expected {expected}")
        return cls(v[:m], v[m], v[m + 1:m + 1 + d_f], v[m + 1 + d_f],
                   v[m + 2 + d_f] if noise else None)

    def names(self):
        S = self.S
        rows, cols = np.tril_indices(S)
        out = [f"L_S[{r},{c}]" + ("(log)" if r == c else "") for r, c in zip(rows, cols)]
        out += ["log_sigma2"] + [f"log_lengthscale_f[{d}]" for d in range(self.d_f)]
        out += ["log_lengthscale_u"]
        if self.log_sigma2_noise is not None:
            out.append("log_sigma2_noise")
        return out

    def to_dict(self):
        return {
            "task_raw": self.task_raw.tolist(), "log_sigma2": self.log_sigma2,
            "log_lengthscales_f": self.log_lengthscales_f.tolist(),
            "log_lengthscale_u": self.log_lengthscale_u, "log_sigma2_noise": self.log_sigma2_noise,
            "natural": {"K_S": self.K_S.tolist(), "sigma2": self.sigma2,
                        "lengthscales_f": self.lengthscales_f.tolist(),
                        "lengthscale_u": self.lengthscale_u, "noise": self.noise},
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["task_raw"], d["log_sigma2"], d["log_lengthscales_f"], d["log_lengthscale_u"],
                   d.get("log_sigma2_noise"))


@dataclass(frozen=True)
class Dataset:
    """Tensor-structured training data.

    ``Y[s, i, j]`` is task ``s`` for functional replicate ``i`` at
    scalar grid point ``grid[j]``.
    """

    enc: EncodedInputs
    grid: np.ndarray
    Y: np.ndarray
    sqdist: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        Y = np.asarray(self.Y, dtype=float)
        grid = np.asarray(self.grid, dtype=float)
        if Y.ndim != 3 or Y.shape[1] != self.enc.n or Y.shape[2] != grid.size:
            raise ShapeError(f"responses {Y.shape} do not match (S, {self.enc.n}, {grid.size})")
        if not np.all(np.isfinite(Y)):
            raise ValueError("responses must be finite")
        object.__setattr__(self, "Y", Y)
        object.__setattr__(self, "grid", grid)
        if self.sqdist is None:
            object.__setattr__(self, "sqdist", self.enc.pairwise_sq())

    @property
    def shape(self):
        return self.Y.shape

    @property
    def n(self):
        return self.Y.size

    def take_replicates(self, index):
        index = np.asarray(index)
        return Dataset(self.enc.take(index), self.grid, self.Y[:, index, :],
                       self.sqdist[:, index][:, :, index])

    def take_tasks(self, tasks):
        tasks = np.atleast_1d(tasks)
        return Dataset(self.enc, self.grid, self.Y[tasks], self.sqdist)


# -- likelihood ----------------------------------------------------------------------------

def _check(theta, data):
    S, n_f, n_u = data.shape
    if theta.S != S or theta.d_f != data.enc.n_channels:
        raise ShapeError(f"hyperparameters for S={theta.S}, d_f={theta.d_f} do not match data "
                         f"with S={S}, d_f={data.enc.n_channels}")


def _blocks(theta, data, kernel):
    return build_blocks(theta, data.enc, data.grid, kernel, sqdist=data.sqdist)


def _jittered(blocks, jitter):
    return tuple(K + j * np.eye(K.shape[0]) if j else K for K, j in zip(blocks, jitter))


def _quadratic_contractions(A, K_S, K_f, K_u):
    """Matrices ``G_d`` with ``a^T (M ⊗ ...) a = sum(G_d * M)`` for each mode."""
    B_fu = mode_product(A @ K_u, K_f, 1)
    G_S = np.tensordot(A, B_fu, axes=([1, 2], [1, 2]))
    B_su = mode_product(A @ K_u, K_S, 0)
    G_f = np.tensordot(A, B_su, axes=([0, 2], [0, 2]))
    B_sf = mode_product(mode_product(A, K_f, 1), K_S, 0)
    G_u = np.tensordot(A, B_sf, axes=([0, 1], [0, 1]))
    return G_S, G_f, G_u


def _param_gradient(theta, data, kernel, W_S, W_f, W_u, K_f_raw):
    """Contract per-block weight matrices with block derivatives."""
    grad = []
    L = theta.task_factor
    dL = 2.0 * W_S @ L
    rows, cols = np.tril_indices(theta.S)
    g_task = dL[rows, cols]
    g_task = np.where(rows == cols, g_task * L[rows, cols], g_task)
    grad.append(g_task)
    grad.append([np.sum(W_f * K_f_raw)])
    ls = theta.lengthscales_f
    r2 = np.tensordot(1.0 / ls**2, data.sqdist, axes=1)
    dk = theta.sigma2 * matern_dr2(np.sqrt(r2), kernel.nu_f)
    g_lf = [np.sum(W_f * dk * (-2.0 * data.sqdist[d] / ls[d] ** 2)) for d in range(theta.d_f)]
    grad.append(g_lf)
    dKu = kernel.scalar.dlog_lengthscale(data.grid, data.grid, theta.lengthscale_u)
    grad.append([np.sum(W_u * dKu)])
    return grad


def _nll_cholesky(theta, data, kernel, want_grad, jitter_levels):
    blocks = _blocks(theta, data, kernel)
    kc = block_cholesky(blocks, jitter_levels)
    alpha = modewise_lower_solve(kc, data.Y)
    value = kc.log_det_L + 0.5 * alpha @ alpha + 0.5 * data.n * LOG_2PI
    if not want_grad:
        return value, None, kc
    S, n_f, n_u = data.shape
    A = unvec(modewise_upper_solve(kc, alpha), data.shape)
    K_S, K_f, K_u = _jittered(blocks, kc.jitter)
    G_S, G_f, G_u = _quadratic_contractions(A, K_S, K_f, K_u)
    inv = [scipy.linalg.cho_solve((Lb, True), np.eye(Lb.shape[0])) for Lb in kc.factors]
    W_S = 0.5 * (n_f * n_u * inv[0] - G_S)
    W_f = 0.5 * (S * n_u * inv[1] - G_f)
    W_u = 0.5 * (S * n_f * inv[2] - G_u)
    grad = _param_gradient(theta, data, kernel, W_S, W_f, W_u, blocks.K_f)
    return value, np.concatenate([np.atleast_1d(g) for g in grad]), kc


def _nll_eigen(theta, data, kernel, want_grad):
    blocks = _blocks(theta, data, kernel)
    eig = block_eigen(blocks)
    noise = theta.noise
    a, logdet = kron_eigen_solve(blocks, noise, data.Y, eig)
    y = data.Y.reshape(-1)
    value = 0.5 * logdet + 0.5 * y @ a + 0.5 * data.n * LOG_2PI
    if not want_grad:
        return value, None, eig
    A = unvec(a, data.shape)
    lS, lf, lu = eig.lam
    invD = 1.0 / (eig.spectrum() + noise)
    w_S = np.einsum("abc,b,c->a", invD, lf, lu)
    w_f = np.einsum("abc,a,c->b", invD, lS, lu)
    w_u = np.einsum("abc,a,b->c", invD, lS, lf)
    T = [(Q * w) @ Q.T for Q, w in zip(eig.Q, (w_S, w_f, w_u))]
    G_S, G_f, G_u = _quadratic_contractions(A, *blocks)
    W_S, W_f, W_u = (0.5 * (t - g) for t, g in zip(T, (G_S, G_f, G_u)))
    grad = _param_gradient(theta, data, kernel, W_S, W_f, W_u, blocks.K_f)
    grad.append([0.5 * noise * (invD.sum() - a @ a)])
    return value, np.concatenate([np.atleast_1d(g) for g in grad]), eig


def nll_and_grad(theta, data, kernel=None, want_grad=True, jitter_levels=JITTER_LEVELS):
    """Negative log-marginal likelihood and its gradient in ``theta.to_vector()`` order."""
    kernel = kernel or KernelConfig()
    _check(theta, data)
    if theta.noise is None:
        value, grad, _ = _nll_cholesky(theta, data, kernel, want_grad, jitter_levels)
    else:
        value, grad, _ = _nll_eigen(theta, data, kernel, want_grad)
    return float(value), grad


def nll(theta, data, kernel=None):
    """``log|L| + ||alpha||^2 / 2 + (n/2) log 2 pi`` (noiseless) or the
    eigen-path equivalent when ``theta`` carries a noise variance."""
    return nll_and_grad(theta, data, kernel, want_grad=False)[0]


def nll_grad(theta, data, kernel=None):
    return nll_and_grad(theta, data, kernel)[1]


# -- fitted model and prediction ------------------------------------------------------------

@dataclass(frozen=True)
class Posterior:
    """Predictive moments, each shaped (n_tasks, n_test, n_u_star)."""

    mean: np.ndarray
    var: np.ndarray
    tasks: np.ndarray
    u: np.ndarray

    @property
    def sd(self):
        return np.sqrt(np.maximum(self.var, 0.0))


@dataclass(frozen=True)
class FitInfo:
    nll: float
    trace: tuple = ()
    grad_norms: tuple = ()
    n_iter: int = 0
    stop_reason: str = ""
    restart: int = 0
    restart_nlls: tuple = ()
    seconds: float = 0.0
    traces: tuple = ()

    def telemetry(self):
        """Rows ``(restart, iteration, nll, grad_norm)`` over every recorded restart."""
        traces = self.traces or ((self.restart, self.trace, self.grad_norms),)
        return [(r, it, f, g) for r, tr, gn in traces for it, (f, g) in enumerate(zip(tr, gn))]


class FittedModel:
    """Conditioned model: hyperparameters plus cached factorizations.

    Instances are not mutated after construction and can serve concurrent
    ``predict`` calls.
    """

    def __init__(self, theta, data, kernel=None, encoder=None, info=None,
                 jitter_levels=JITTER_LEVELS):
        self.theta = theta
        self.data = data
        self.kernel = kernel or KernelConfig()
        self.encoder = encoder
        self.info = info
        _check(theta, data)
        self.blocks = _blocks(theta, data, self.kernel)
        if theta.noise is None:
            self.kc = block_cholesky(self.blocks, jitter_levels)
            self.eig = None
            self.alpha = modewise_lower_solve(self.kc, data.Y)
            self.nll = self.kc.log_det_L + 0.5 * self.alpha @ self.alpha + 0.5 * data.n * LOG_2PI
        else:
            self.kc = None
            self.eig = block_eigen(self.blocks)
            self.alpha, logdet = kron_eigen_solve(self.blocks, theta.noise, data.Y, self.eig)
            self.nll = 0.5 * logdet + 0.5 * data.Y.reshape(-1) @ self.alpha + 0.5 * data.n * LOG_2PI

    @property
    def noiseless(self):
        return self.theta.noise is None

    def encode(self, samples):
        if self.encoder is None:
            raise EncodingError("model has no functional encoder; pass EncodedInputs instead")
        return self.encoder.transform(samples)

    def cross_blocks(self, enc_star, u_star):
        """``K_f(train, test)`` and ``K_u(grid, u_star)``."""
        if enc_star.n_channels != self.data.enc.n_channels:
            raise EncodingError("test inputs have a different number of channels")
        for a, b in zip(enc_star.coeffs, self.data.enc.coeffs):
            if a.shape[1] != b.shape[1]:
                raise EncodingError("test inputs were encoded with a different basis")
        D = self.data.enc.pairwise_sq(enc_star)
        Kf = functional_block(D, self.theta.lengthscales_f, self.theta.sigma2, self.kernel.nu_f)
        Ku = self.kernel.scalar(self.data.grid, u_star, self.theta.lengthscale_u)
        return Kf, Ku

    def predict(self, enc_star, u_star=None, tasks=None, include_noise=True):
        """Posterior mean and variance for every test replicate, task and ``u``.

        Parameters
        ----------
        enc_star : EncodedInputs or list of ndarray
            Test inputs, already encoded with this model's frozen basis, or
            raw per-channel sample matrices when the model has an encoder.
        u_star : array_like, optional
            Scalar covariate values; defaults to the training grid.
        tasks : sequence of int, optional
        include_noise : bool
            Add the noise variance to the predictive variance (noisy path).
        """
        if not isinstance(enc_star, EncodedInputs):
            enc_star = self.encode(enc_star)
        u_star = self.data.grid if u_star is None else np.atleast_1d(np.asarray(u_star, float))
        S = self.theta.S
        tasks = np.arange(S) if tasks is None else np.atleast_1d(np.asarray(tasks, int))
        Kf, Ku = self.cross_blocks(enc_star, u_star)
        K_S = self.blocks.K_S
        kS = K_S[:, tasks]
        prior = (np.diag(K_S)[tasks][:, None, None] * self.theta.sigma2
                 * self.kernel.scalar.diag(u_star)[None, None, :])
        prior = np.broadcast_to(prior, (tasks.size, enc_star.n, u_star.size))
        A = unvec(self.alpha, self.data.shape)
        if self.noiseless:
            kc = self.kc
            Z = [scipy.linalg.solve_triangular(L, k, lower=True, check_finite=False)
                 for L, k in zip(kc.factors, (kS, Kf, Ku))]
            mean = _contract(A, *Z)
            var = prior - np.einsum("s,t,j->stj", *(np.sum(z**2, axis=0) for z in Z))
        else:
            mean = _contract(A, kS, Kf, Ku)
            P = [(q.T @ k) ** 2 for q, k in zip(self.eig.Q, (kS, Kf, Ku))]
            invD = 1.0 / (self.eig.spectrum() + self.theta.noise)
            quad = np.einsum("abc,cj->abj", invD, P[2])
            quad = np.einsum("abj,bt->atj", quad, P[1])
            quad = np.einsum("atj,as->stj", quad, P[0])
            var = prior - quad
            if include_noise:
                var = var + self.theta.noise
        return Posterior(mean, np.array(var), tasks, u_star)

    # -- persistence --------------------------------------------------------------------

    def to_dict(self):
        info = self.info or FitInfo(self.nll)
        return {
            "format_version": FORMAT_VERSION,
            "hyperparameters": self.theta.to_dict(),
            "kernel": self.kernel.to_dict(),
            "encoder": None if self.encoder is None else self.encoder.to_dict(),
            "train": {"enc": self.data.enc.to_dict(), "grid": self.data.grid.tolist(),
                      "Y": self.data.Y.tolist()},
            "fit": {"nll": float(self.nll), "restart": info.restart, "n_iter": info.n_iter,
                    "stop_reason": info.stop_reason, "restart_nlls": list(info.restart_nlls),
                    "trace_first": info.trace[0] if info.trace else None,
                    "trace_best": min(info.trace) if info.trace else None,
                    "trace_len": len(info.trace)},
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("format_version") != FORMAT_VERSION:
            raise CompatibilityError(f"model format {d.get('format_version')!r} is not "
                                     f"supported (expected {FORMAT_VERSION})")
        enc = EncodedInputs.from_dict(d["train"]["enc"])
        encoder = None if d.get("encoder") is None else FunctionalEncoder.from_dict(d["encoder"])
        if encoder is not None:
            for ch, c in zip(encoder.channels, enc.coeffs):
                width = ch.coefficient_pca.n_components if ch.coefficient_pca else ch.basis.size
                if width != c.shape[1]:
                    raise CompatibilityError("stored encoder does not match stored coefficients")
        data = Dataset(enc, d["train"]["grid"], d["train"]["Y"])
        f = d.get("fit", {})
        info = FitInfo(f.get("nll", float("nan")), n_iter=f.get("n_iter", 0),
                       stop_reason=f.get("stop_reason", ""), restart=f.get("restart", 0),
                       restart_nlls=tuple(f.get("restart_nlls", ())))
        return cls(Hyperparameters.from_dict(d["hyperparameters"]), data,
                   KernelConfig.from_dict(d["kernel"]), encoder, info)


def _contract(A, M_S, M_f, M_u):
    """``out[s, t, j] = sum_{a,i,k} M_S[a,s] M_f[i,t] M_u[k,j] A[a,i,k]``."""
    X = A @ M_u
    X = np.einsum("aij,it->atj", X, M_f)
    return np.einsum("atj,as->stj", X, M_S)


def predict(model, enc_star, u_star=None, tasks=None, include_noise=True):
    return model.predict(enc_star, u_star, tasks, include_noise)


# -- optimization ----------------------------------------------------------------------------

@dataclass(frozen=True)
class InitRanges:
    """Uniform ranges for restart initializations (natural scale)."""

    lengthscale_f: tuple = (0.5, 20.0)
    lengthscale_u: tuple = (0.005, 0.1)
    sigma2: tuple = (0.5, 2.0)
    noise: tuple = (1e-3, 1e-1)


PROFILES = {
    "synthetic": {"max_iter": 500, "learn_noise": False,
                  "init": InitRanges((10.0, 100.0), (0.3, 3.0), (0.5, 2.0), (1e-3, 1e-1))},
    "application": {"max_iter": 20000, "learn_noise": True, "init": InitRanges()},
}


@dataclass(frozen=True)
class FitConfig:
    """Optimizer settings.

    Adam runs on the unconstrained parameters with L2 weight decay added
    to the gradient and gradient-norm clipping.  With ``normalize`` the
    objective is the NLL per observation, which is also the scale of the
    early-stopping tolerance.
    """

    lr: float = 2e-2
    betas: tuple = (0.98, 0.999)
    eps: float = 1e-8
    weight_decay: float = 1e-5
    clip_norm: float = 1.0
    tol: float = 1e-3
    patience: int = 20
    max_iter: int = 500
    normalize: bool = True
    learn_noise: bool = False
    fix_task_factor: bool | None = None
    init: InitRanges = InitRanges()
    lengthscale_u_bounds: tuple | None = None
    jitter_levels: tuple = JITTER_LEVELS

    @classmethod
    def profile(cls, name, **overrides):
        if name not in PROFILES:
            raise ValueError(f"unknown profile {name!r}; choose from {sorted(PROFILES)}")
        return cls(**{**PROFILES[name], **overrides})


class Adam:
    """Adam with coupled L2 weight decay (the classic formulation)."""

    def __init__(self, lr, betas, eps, weight_decay):
        self.lr, (self.b1, self.b2), self.eps, self.wd = lr, betas, eps, weight_decay
        self.m = self.v = None
        self.t = 0

    def step(self, x, g, mask=None):
        g = g + self.wd * x
        if mask is not None:
            g = g * mask
        if self.m is None:
            self.m = np.zeros_like(x)
            self.v = np.zeros_like(x)
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * g
        self.v = self.b2 * self.v + (1 - self.b2) * g * g
        mhat = self.m / (1 - self.b1**self.t)
        vhat = self.v / (1 - self.b2**self.t)
        return x - self.lr * mhat / (np.sqrt(vhat) + self.eps)


def clip_by_norm(g, max_norm):
    norm = float(np.linalg.norm(g))
    if max_norm is not None and norm > max_norm:
        return g * (max_norm / (norm + 1e-6)), norm
    return g, norm


def minimize_adam(fun, x0, config, mask=None, project=None):
    """Run Adam on ``fun(x) -> (value, grad)`` and return the best iterate.

    Early stopping: the run ends once the improvement over the best value
    so far has stayed below ``config.tol`` for ``config.patience``
    consecutive evaluations.  Returns ``(x_best, f_best, trace, norms,
    reason)`` where the trace holds the raw values of ``fun``.
    """
    x = np.asarray(x0, dtype=float).copy()
    opt = Adam(config.lr, config.betas, config.eps, config.weight_decay)
    best_x, best_f = x.copy(), math.inf
    trace, norms = [], []
    stall, reason = 0, "max_iter"
    for it in range(config.max_iter):
        try:
            f, g = fun(x)
        except FMTGPError as exc:
            if it == 0:
                raise
            reason = f"numerical failure: {exc}"
            break
        if not (np.isfinite(f) and np.all(np.isfinite(g))):
            if it == 0:
                raise InitializationError(f"non-finite objective at initialization (x = {x})")
            reason = "non-finite objective"
            break
        trace.append(f)
        improvement = best_f - f
        if f < best_f:
            best_f, best_x = f, x.copy()
        stall = stall + 1 if improvement < config.tol else 0
        if mask is not None:
            g = g * mask
        g, norm = clip_by_norm(g, config.clip_norm)
        norms.append(norm)
        if stall >= config.patience:
            reason = "early_stop"
            break
        x = opt.step(x, g, mask)
        if project is not None:
            x = project(x)
    return best_x, best_f, trace, norms, reason


def _task_mask(theta, config):
    fix = config.fix_task_factor
    if fix is None:
        fix = theta.S == 1
    if not fix:
        return None
    mask = np.ones(theta.to_vector().size)
    mask[: theta.task_raw.size] = 0.0
    return mask


def fit(data, config=None, init=None, kernel=None, encoder=None, restart=0):
    """Maximize the marginal likelihood from one initialization.

    Parameters
    ----------
    data : Dataset
    config : FitConfig, optional
    init : Hyperparameters, optional
        Defaults to an identity task factor, unit variance and unit
        length-scales (plus noise 1e-2 when ``config.learn_noise``).
    """
    config = config or FitConfig()
    kernel = kernel or KernelConfig()
    S, _, _ = data.shape
    if init is None:
        init = Hyperparameters.from_natural(np.eye(S), 1.0, np.ones(data.enc.n_channels), 1.0,
                                            1e-2 if config.learn_noise else None)
    noise = init.log_sigma2_noise is not None
    d_f = init.d_f
    scale = 1.0 / data.n if config.normalize else 1.0

    def fun(x):
        th = Hyperparameters.from_vector(x, S, d_f, noise)
        v, g = nll_and_grad(th, data, kernel, jitter_levels=config.jitter_levels)
        return v * scale, g * scale

    project = None
    if config.lengthscale_u_bounds is not None:
        lo, hi = np.log(config.lengthscale_u_bounds)
        iu = n_task_params(S) + 1 + d_f

        def project(x):
            x = x.copy()
            x[iu] = np.clip(x[iu], lo, hi)
            return x

    t0 = time.perf_counter()
    try:
        x0_val = fun(init.to_vector())[0]
    except FMTGPError as exc:
        raise InitializationError(f"likelihood failed at initialization {init.to_dict()}: {exc}") from exc
    if not np.isfinite(x0_val):
        raise InitializationError(f"non-finite NLL at initialization {init.to_dict()}")
    x, _, trace, norms, reason = minimize_adam(fun, init.to_vector(), config,
                                               _task_mask(init, config), project)
    theta = Hyperparameters.from_vector(x, S, d_f, noise)
    trace = tuple(v / scale for v in trace)
    model = FittedModel(theta, data, kernel, encoder, jitter_levels=config.jitter_levels)
    info = FitInfo(float(model.nll), trace, tuple(norms), len(trace), reason, restart,
                   seconds=time.perf_counter() - t0)
    model.info = info
    return model


def random_init(S, d_f, ranges, rng, learn_noise):
    lf = rng.uniform(*ranges.lengthscale_f, size=d_f)
    lu = rng.uniform(*ranges.lengthscale_u)
    s2 = rng.uniform(*ranges.sigma2)
    nz = rng.uniform(*ranges.noise) if learn_noise else None
    return Hyperparameters.from_natural(np.eye(S), s2, lf, lu, nz)


def _run_restart(args):
    data, config, kernel, encoder, seed, r = args
    init = random_init(data.shape[0], data.enc.n_channels, config.init,
                       stream(seed, "restart", r), config.learn_noise)
    try:
        return r, fit(data, config, init, kernel, encoder, restart=r), None
    except FMTGPError as exc:
        return r, None, exc


def multi_start_fit(data, config=None, n_restart=10, seed=0, kernel=None, encoder=None, jobs=1):
    """Best-likelihood model over ``n_restart`` seeded random initializations.

    Restart ``r`` draws its initialization from the ``("restart", r)``
    stream of ``seed``, so any single restart can be reproduced alone.
    """
    if n_restart < 1:
        raise ValueError("n_restart must be >= 1")
    config = config or FitConfig()
    kernel = kernel or KernelConfig()
    tasks = [(data, config, kernel, encoder, seed, r) for r in range(n_restart)]
    if jobs > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_restart, tasks))
    else:
        results = [_run_restart(t) for t in tasks]
    fitted = [(r, m) for r, m, _ in results if m is not None]
    if not fitted:
        raise AllRestartsFailedError([(r, e) for r, _, e in results])
    nlls = tuple(float(m.nll) if m is not None else math.inf for _, m, _ in results)
    r_best, best = min(fitted, key=lambda rm: (rm[1].nll, rm[0]))
    traces = tuple((r, m.info.trace, m.info.grad_norms) for r, m in fitted)
    best.info = replace(best.info, restart=r_best, restart_nlls=nlls, traces=traces)
    return best


# -- prior sampling -------------------------------------------------------------------------------

def sample_prior(theta, enc, grid, n_draws=1, seed=0, kernel=None, jitter_levels=JITTER_LEVELS):
    """Draws from the prior, shaped (n_draws, S, n_f, n_u).

    Each draw is ``(L_S ⊗ L_f ⊗ L_u) z`` with ``z`` standard normal, plus
    independent noise when ``theta`` has a noise variance.
    """
    kernel = kernel or KernelConfig()
    grid = np.asarray(grid, dtype=float)
    sqdist = enc.pairwise_sq()
    blocks = build_blocks(theta, enc, grid, kernel, sqdist=sqdist)
    kc = block_cholesky(blocks, jitter_levels)
    shape = kc.shape
    rng = np.random.default_rng(seed)
    out = np.empty((n_draws,) + shape)
    for k in range(n_draws):
        z = rng.standard_normal(int(np.prod(shape)))
        out[k] = unvec(kron_matvec(*kc.factors, z), shape)
        if theta.noise is not None:
            out[k] += math.sqrt(theta.noise) * rng.standard_normal(shape)
    return out


def dense_covariance(theta, data, kernel=None):
    """Full ``n × n`` covariance; for small problems and checks only."""
    blocks = _blocks(theta, data, kernel or KernelConfig())
    K = blocks.dense()
    if theta.noise is not None:
        K = K + theta.noise * np.eye(K.shape[0])
    return K


__all__ = [
    "Adam", "CovBlocks", "Dataset", "FitConfig", "FitInfo", "FittedModel", "Hyperparameters",
    "InitRanges", "KroneckerCholesky", "PROFILES", "Posterior", "dense_covariance", "fit",
    "minimize_adam", "multi_start_fit", "nll", "nll_and_grad", "nll_grad", "predict",
    "random_init", "sample_prior",
]
