import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fmtgp.encoding import EncodedInputs
from fmtgp.errors import NumericalOverflowError, UnsupportedSmoothnessError
from fmtgp.kernels import (
    KernelConfig,
    ScalarKernel,
    build_blocks,
    functional_block,
    matern,
    matern_dr2,
    normalize_nu,
    periodic,
    raw_from_task_factor,
    task_factor_from_raw,
)
from fmtgp.model import Hyperparameters

NUS = [0.5, 1.5, 2.5, math.inf]


class TestMatern:
    @pytest.mark.parametrize("nu", NUS)
    def test_value_at_zero_is_variance(self, nu):
        assert matern(0.0, nu, variance=1.7) == pytest.approx(1.7)

    def test_five_halves_at_one(self):
        ref = (1 + math.sqrt(5) + 5 / 3) * math.exp(-math.sqrt(5))
        assert matern(1.0, 2.5) == pytest.approx(ref, rel=1e-14)
        assert matern(1.0, 2.5) == pytest.approx(0.52399, abs=5e-6)

    def test_decay(self):
        assert matern(30.0, 2.5) < 1e-20

    @pytest.mark.parametrize("nu", NUS)
    def test_non_increasing(self, nu):
        r = np.sort(np.random.default_rng(1).uniform(0, 10, 1000))
        assert np.all(np.diff(matern(r, nu)) <= 0)

    @pytest.mark.parametrize("nu", NUS)
    def test_dr2_finite_difference(self, nu):
        r = np.linspace(0.2, 3.0, 15)
        h = 1e-6
        fd = (matern(np.sqrt(r**2 + h), nu) - matern(np.sqrt(r**2 - h), nu)) / (2 * h)
        np.testing.assert_allclose(matern_dr2(r, nu), fd, rtol=1e-6)

    @pytest.mark.parametrize("bad", [2.0, "7/2", 0.0])
    def test_unsupported_smoothness(self, bad):
        with pytest.raises(UnsupportedSmoothnessError):
            normalize_nu(bad)

    def test_string_smoothness(self):
        assert normalize_nu("5/2") == 2.5
        assert normalize_nu("inf") == math.inf


class TestPeriodic:
    def test_identity(self):
        assert periodic(0.3, 0.3) == 1.0

    def test_period_translation(self):
        assert periodic(0.2, 1.2, 0.5, 1.0) == pytest.approx(1.0)

    def test_half_period(self):
        assert periodic(0.0, 0.5, 0.5, 1.0) == pytest.approx(math.exp(-8.0), rel=1e-12)
        assert periodic(0.0, 0.5, 0.5, 1.0) == pytest.approx(3.3546e-4, rel=1e-4)


class TestScalarKernel:
    def test_additive_diag(self):
        k = ScalarKernel("matern_plus_periodic")
        u = np.linspace(0, 1.5, 5)
        np.testing.assert_allclose(np.diag(k(u, u, 1.5)), 2.0)
        np.testing.assert_allclose(k.diag(u), 2.0)

    def test_dlog_lengthscale_finite_difference(self):
        k = ScalarKernel("matern_plus_periodic")
        u = np.linspace(0, 1.5, 6)
        h = 1e-6
        fd = (k(u, u, math.exp(math.log(0.7) + h)) - k(u, u, math.exp(math.log(0.7) - h))) / (2 * h)
        np.testing.assert_allclose(k.dlog_lengthscale(u, u, 0.7), fd, atol=1e-8)

    def test_round_trip(self):
        k = ScalarKernel("matern_plus_periodic", "3/2")
        assert ScalarKernel.from_dict(k.to_dict()) == k


class TestTaskFactor:
    def test_single_task(self):
        L = task_factor_from_raw([0.0], 1)
        np.testing.assert_array_equal(L @ L.T, [[1.0]])

    def test_generator_correlation_factor(self):
        L = np.array([[1.0, 0.0], [0.85, math.sqrt(0.2775)]])
        np.testing.assert_allclose(L @ L.T, [[1.0, 0.85], [0.85, 1.0]], atol=1e-15)

    def test_raw_round_trip(self, rng):
        L = np.tril(rng.normal(size=(4, 4)), -1) + np.diag(rng.uniform(0.5, 2, 4))
        np.testing.assert_allclose(task_factor_from_raw(raw_from_task_factor(L), 4), L)

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.floats(-3, 3), min_size=6, max_size=6))
    def test_task_covariance_psd(self, raw):
        L = task_factor_from_raw(raw, 3)
        assert np.linalg.eigvalsh(L @ L.T).min() >= -1e-10


class TestBlocks:
    def test_functional_block_double_loop(self, rng):
        enc = EncodedInputs(tuple(rng.normal(size=(10, 6)) for _ in range(3)), (np.eye(6),) * 3)
        ls = np.array([0.8, 1.5, 3.0])
        K = functional_block(enc.pairwise_sq(), ls, 1.3, 2.5)
        ref = np.empty((10, 10))
        for i in range(10):
            for j in range(10):
                r2 = sum(np.sum((enc.coeffs[d][i] - enc.coeffs[d][j]) ** 2) / ls[d] ** 2
                         for d in range(3))
                ref[i, j] = matern(math.sqrt(r2), 2.5, 1.3)
        np.testing.assert_allclose(K, ref, atol=1e-12)

    def test_blocks_exactly_symmetric(self, rng):
        enc = EncodedInputs((rng.normal(size=(6, 3)),), (np.eye(3),))
        theta = Hyperparameters.from_natural(np.array([[1.0, 0], [0.3, 0.8]]), 1.2, [1.1], 0.4)
        for K in build_blocks(theta, enc, np.linspace(0, 1, 7), KernelConfig()):
            np.testing.assert_array_equal(K, K.T)

    def test_dense_kronecker_is_psd(self, rng):
        for _ in range(20):
            S, n_f, n_u = rng.integers(1, 4), rng.integers(1, 7), rng.integers(1, 9)
            enc = EncodedInputs((rng.normal(size=(n_f, 2)),), (np.eye(2),))
            L = np.tril(rng.normal(size=(S, S)), -1) + np.diag(rng.uniform(0.3, 1.5, S))
            theta = Hyperparameters.from_natural(L, 1.0, [1.0], 0.5)
            K = build_blocks(theta, enc, rng.uniform(0, 1.5, n_u),
                             KernelConfig(2.5, ScalarKernel("matern_plus_periodic"))).dense()
            np.linalg.cholesky(K + 1e-8 * np.eye(K.shape[0]))

    def test_single_task_reduces_to_product_kernel(self, rng):
        enc = EncodedInputs((rng.normal(size=(4, 2)),), (np.eye(2),))
        grid = np.linspace(0, 1, 3)
        theta = Hyperparameters.from_natural(np.eye(1), 0.9, [1.2], 0.6)
        b = build_blocks(theta, enc, grid)
        np.testing.assert_allclose(b.dense(), np.kron(b.K_f, b.K_u))

    def test_overflow_detected(self, rng):
        enc = EncodedInputs((rng.normal(size=(3, 2)),), (np.eye(2),))
        theta = Hyperparameters(np.array([0.0]), 800.0, np.array([0.0]), 0.0)
        with pytest.raises(NumericalOverflowError):
            build_blocks(theta, enc, np.linspace(0, 1, 3))
