"""Multitask Gaussian processes with functional inputs.

The covariance over tasks, functional inputs and a scalar covariate is
separable, ``K_S ⊗ K_f ⊗ K_u``, so likelihood evaluation and prediction
reduce to small per-block factorizations.
"""

from .encoding import (
    BasisKind,
    EncodedInputs,
    EncodingConfig,
    FunctionalEncoder,
    FunctionalSample,
    bspline_basis,
    fit_encoder,
    haar_basis,
    pca_fit,
    project_onto_basis,
)
from .kernels import KernelConfig, PeriodicSpec, ScalarKernel, build_blocks, matern, periodic
from .kronecker import (
    KroneckerCholesky,
    block_cholesky,
    kron_eigen_solve,
    kron_logdet,
    kron_matvec,
    modewise_lower_solve,
)
from .metrics import calibration_envelopes, coverage_accuracy, q2
from .model import (
    Dataset,
    FitConfig,
    FittedModel,
    Hyperparameters,
    Posterior,
    fit,
    multi_start_fit,
    nll,
    nll_and_grad,
    nll_grad,
    predict,
    sample_prior,
)
from .synthetic import GroundTruth, RayleighConfig, generate_dataset, rayleigh_curve

__version__ = "0.1.0"

__all__ = [
    "BasisKind", "Dataset", "EncodedInputs", "EncodingConfig", "FitConfig", "FittedModel",
    "FunctionalEncoder", "FunctionalSample", "GroundTruth", "Hyperparameters", "KernelConfig",
    "KroneckerCholesky", "PeriodicSpec", "Posterior", "RayleighConfig", "ScalarKernel",
    "block_cholesky", "bspline_basis", "build_blocks", "calibration_envelopes",
    "coverage_accuracy", "fit", "fit_encoder", "generate_dataset", "haar_basis",
    "kron_eigen_solve", "kron_logdet", "kron_matvec", "matern", "modewise_lower_solve",
    "multi_start_fit", "nll", "nll_and_grad", "nll_grad", "pca_fit", "periodic", "predict",
    "project_onto_basis", "q2", "rayleigh_curve", "sample_prior",
]
