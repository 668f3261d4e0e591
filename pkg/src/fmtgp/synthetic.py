"""Rayleigh-shaped functional inputs with outputs drawn from a known MTGP.

Each replicate carries three curves ``alpha * h_rho(u) / max h_rho`` with
``h_rho(u) = (u / rho^2) exp(-u^2 / (2 rho^2))``.  The curves are PCA
encoded and the responses are a single joint draw from the prior of a
baseline model with known hyperparameters.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .encoding import EncodingConfig, fit_encoder, write_channel_csv
from .kernels import KernelConfig, PeriodicSpec, ScalarKernel, task_factor_from_covariance
from .model import Dataset, Hyperparameters, sample_prior
from .random import stream


def rayleigh_curve(rho, alpha, grid):
    """Rayleigh shape rescaled so that its maximum over ``grid`` is ``alpha``."""
    if rho <= 0 or alpha <= 0:
        raise ValueError("rho and alpha must be positive")
    grid = np.asarray(grid, dtype=float)
    h = grid / rho**2 * np.exp(-(grid**2) / (2.0 * rho**2))
    peak = h.max()
    if not peak > 0:
        raise ValueError("Rayleigh curve vanishes on the grid")
    return alpha * h / peak


@dataclass(frozen=True)
class GroundTruth:
    """Generating hyperparameters of the baseline model."""

    K_S: tuple = ((1.0, 0.85), (0.85, 1.0))
    sigma2: float = 1.0
    lengthscales_f: tuple = (80.0, 80.0, 80.0)
    nu_f: float = 2.5
    lengthscale_u: float = 1.5
    nu_u: float = 2.5
    lengthscale_per: float = 0.5
    period: float = 1.0

    def hyperparameters(self):
        return Hyperparameters.from_natural(task_factor_from_covariance(np.asarray(self.K_S)),
                                            self.sigma2, self.lengthscales_f, self.lengthscale_u)

    def kernel(self):
        return KernelConfig(self.nu_f, ScalarKernel("matern_plus_periodic", self.nu_u,
                                                    PeriodicSpec(self.lengthscale_per, self.period)))

    def to_dict(self):
        return {"K_S": [list(r) for r in self.K_S], "sigma2": self.sigma2,
                "lengthscales_f": list(self.lengthscales_f), "nu_f": self.nu_f,
                "lengthscale_u": self.lengthscale_u, "nu_u": self.nu_u,
                "lengthscale_per": self.lengthscale_per, "period": self.period}

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "K_S" in d:
            d["K_S"] = tuple(tuple(float(x) for x in r) for r in d["K_S"])
        if "lengthscales_f" in d:
            d["lengthscales_f"] = tuple(float(x) for x in d["lengthscales_f"])
        return cls(**d)


@dataclass(frozen=True)
class RayleighConfig:
    """Generator settings.

    Defaults give the desk-scale problem (S = 2, n_f = 60, n_u = 50); the
    full-size benchmark uses ``n_f=500, n_u=100``.  Both the input curves
    and the output grid live on ``domain``.
    """

    n_f: int = 60
    n_u: int = 50
    n_grid: int = 150
    n_channels: int = 3
    rho_range: tuple = (0.05, 1.0)
    alpha_range: tuple = (2.0, 4.0)
    domain: tuple = (0.0, 1.5)
    d_proj: int = 6
    truth: GroundTruth = field(default_factory=GroundTruth)
    seed: int = 0

    def __post_init__(self):
        for name in ("rho_range", "alpha_range", "domain"):
            lo, hi = getattr(self, name)
            if not lo < hi:
                raise ValueError(f"{name} must be a nonempty interval")
        if self.rho_range[0] <= 0 or self.alpha_range[0] <= 0:
            raise ValueError("rho and alpha ranges must be positive")
        if min(self.n_f, self.n_u, self.n_grid, self.n_channels) < 1:
            raise ValueError("sizes must be positive")
        K = np.asarray(self.truth.K_S, dtype=float)
        if K.shape[0] != K.shape[1] or np.any(np.linalg.eigvalsh(K) <= 0):
            raise ValueError("ground-truth task covariance must be positive definite")
        if len(self.truth.lengthscales_f) != self.n_channels:
            raise ValueError("one functional length-scale per channel is required")

    @property
    def S(self):
        return len(self.truth.K_S)


@dataclass(frozen=True)
class SyntheticData:
    """Generated raw curves, encoded dataset and ground truth."""

    input_grid: np.ndarray
    curves: tuple
    rho: np.ndarray
    alpha: np.ndarray
    dataset: Dataset
    encoder: object
    truth: GroundTruth
    config: RayleighConfig

    @property
    def theta0(self):
        return self.truth.hyperparameters()

    @property
    def kernel(self):
        return self.truth.kernel()


def draw_curves(cfg, rng):
    """Curves shaped (n_channels, n_f, n_grid) plus their (rho, alpha) draws."""
    grid = np.linspace(*cfg.domain, cfg.n_grid)
    rho = rng.uniform(*cfg.rho_range, size=(cfg.n_channels, cfg.n_f))
    alpha = rng.uniform(*cfg.alpha_range, size=(cfg.n_channels, cfg.n_f))
    curves = np.array([[rayleigh_curve(r, a, grid) for r, a in zip(rr, aa)]
                       for rr, aa in zip(rho, alpha)])
    return grid, curves, rho, alpha


def generate_dataset(cfg=None):
    """Sample inputs and one joint prior draw of the outputs at the truth."""
    cfg = cfg or RayleighConfig()
    grid, curves, rho, alpha = draw_curves(cfg, stream(cfg.seed, "generator-inputs"))
    encoder = fit_encoder(list(curves), grid, EncodingConfig("pca", cfg.d_proj))
    enc = encoder.transform(list(curves))
    u = np.linspace(*cfg.domain, cfg.n_u)
    draw_seed = int(stream(cfg.seed, "generator-outputs").integers(2**63))
    Y = sample_prior(cfg.truth.hyperparameters(), enc, u, 1, draw_seed, cfg.truth.kernel())[0]
    return SyntheticData(grid, tuple(curves), rho, alpha, Dataset(enc, u, Y), encoder,
                         cfg.truth, cfg)


def write_outputs_csv(path, Y, grid):
    """Long format ``s,i,j,u,y`` with 0-based indices."""
    S, n_f, n_u = Y.shape
    s, i, j = np.meshgrid(np.arange(S), np.arange(n_f), np.arange(n_u), indexing="ij")
    with open(path, "w", newline="") as fh:
        fh.write("s,i,j,u,y\n")
        for row in zip(s.ravel(), i.ravel(), j.ravel(), np.broadcast_to(grid, Y.shape).ravel(),
                       Y.ravel()):
            fh.write(f"{row[0]},{row[1]},{row[2]},{float(row[3])!r},{float(row[4])!r}\n")


def read_outputs_csv(path):
    """Inverse of :func:`write_outputs_csv`: returns ``(Y, grid)``."""
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    idx = data[:, :3].astype(int)
    shape = tuple(idx.max(axis=0) + 1)
    Y = np.full(shape, np.nan)
    Y[idx[:, 0], idx[:, 1], idx[:, 2]] = data[:, 4]
    if np.isnan(Y).any():
        raise ValueError(f"{path}: outputs do not cover a full (S, n_f, n_u) tensor")
    grid = np.full(shape[2], np.nan)
    grid[idx[:, 2]] = data[:, 3]
    return Y, grid


def write_dataset(data, directory):
    """Write ``channel_<d>.csv``, ``outputs.csv`` and ``theta0.json`` into ``directory``.

    Returns the list of written paths.
    """
    directory = Path(directory)
    paths = []
    for d, F in enumerate(data.curves):
        p = directory / f"channel_{d + 1}.csv"
        write_channel_csv(p, data.input_grid, F)
        paths.append(p)
    p = directory / "outputs.csv"
    write_outputs_csv(p, data.dataset.Y, data.dataset.grid)
    paths.append(p)
    p = directory / "theta0.json"
    p.write_text(json.dumps({"truth": data.truth.to_dict(),
                             "hyperparameters": data.theta0.to_dict()}, indent=2) + "\n")
    paths.append(p)
    return paths
