import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import trapezoid
from scipy.interpolate import BSpline

from fmtgp.encoding import (
    BasisKind,
    EncodedInputs,
    EncodingConfig,
    FunctionalEncoder,
    FunctionalSample,
    bspline_basis,
    bspline_design,
    clamped_knots,
    explained_inertia,
    fit_coefficient_pca,
    fit_encoder,
    haar_atoms,
    haar_basis,
    pca_fit,
    pca_on_coefficients,
    project_onto_basis,
    quadrature_weights,
    read_channel_csv,
    weighted_l2_sq,
    write_channel_csv,
)
from fmtgp.errors import (
    EncodingError,
    InvalidKnotsError,
    InvalidLevelError,
    ReducedRankError,
    ShapeError,
    SingularProjectionError,
)
from fmtgp.synthetic import RayleighConfig, draw_curves


def cell_centred(n, a=0.0, b=1.0):
    h = (b - a) / n
    return a + h * (np.arange(n) + 0.5)


def rayleigh_channels(n_f=60, seed=0):
    grid, curves, _, _ = draw_curves(RayleighConfig(n_f=n_f), np.random.default_rng(seed))
    return grid, curves


class TestQuadrature:
    def test_trapezoid_by_default(self):
        grid = np.linspace(0, 2, 9)
        f = grid**2
        np.testing.assert_allclose(quadrature_weights(grid) @ f, trapezoid(f, grid), rtol=1e-14)

    def test_midpoint_on_cell_centred_grid(self):
        w = quadrature_weights(cell_centred(8), (0.0, 1.0))
        np.testing.assert_allclose(w, np.full(8, 1 / 8))

    def test_rejects_unsorted_grid(self):
        with pytest.raises(ShapeError):
            quadrature_weights(np.array([0.0, 0.5, 0.2]))


class TestFunctionalSample:
    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            FunctionalSample(1, np.linspace(0, 1, 5), np.zeros(4))

    def test_non_finite(self):
        with pytest.raises(ValueError):
            FunctionalSample(1, np.linspace(0, 1, 3), np.array([0.0, np.nan, 1.0]))


class TestProjection:
    def test_identity_case(self):
        grid = cell_centred(64)
        basis = haar_basis(3, (0.0, 1.0), grid)
        sample = FunctionalSample(1, grid, basis.atoms[0])
        beta = project_onto_basis(sample, basis)
        expected = np.zeros(basis.size)
        expected[0] = 1.0
        np.testing.assert_allclose(beta, expected, atol=1e-12)

    def test_constant_in_haar_scaling_space(self):
        grid = cell_centred(32)
        basis = haar_basis(0, (0.0, 1.0), grid)
        beta = basis.project(np.full(32, 2.5))
        np.testing.assert_allclose(beta, [2.5, 0.0], atol=1e-12)

    def test_matches_dense_least_squares(self, rng):
        grid = np.linspace(0, 1, 80)
        basis = bspline_basis(4, 5, (0.0, 1.0), grid)
        f = np.sin(3 * grid) + grid**2
        W = np.sqrt(basis.weights)
        ref, *_ = np.linalg.lstsq((basis.atoms * W).T, f * W, rcond=None)
        np.testing.assert_allclose(basis.project(f), ref, atol=1e-10)

    def test_rank_deficient_design(self):
        grid = np.linspace(0, 1, 5)
        with pytest.raises(SingularProjectionError):
            bspline_basis(4, 6, (0.0, 1.0), grid).project(np.ones(5))


class TestPCA:
    def test_rank_one_data(self, rng):
        grid = np.linspace(0, 1, 30)
        F = rng.normal(size=(12, 1)) * np.sin(np.pi * grid)
        basis = pca_fit(F, grid, inertia=0.999)
        assert basis.size == 1
        assert explained_inertia(basis) == pytest.approx(1.0)

    def test_rayleigh_six_components_capture_inertia(self):
        grid, curves = rayleigh_channels()
        for F in curves:
            assert explained_inertia(pca_fit(F, grid, n_components=6)) >= 0.999

    def test_eigenvalues_match_dense_covariance(self, rng):
        grid = np.linspace(0, 1, 25)
        F = rng.normal(size=(40, 25)).cumsum(axis=1)
        basis = pca_fit(F, grid, n_components=5)
        Fc = F - F.mean(axis=0)
        ref = np.linalg.eigvalsh(Fc.T @ Fc / F.shape[0])[::-1]
        np.testing.assert_allclose(basis.eigenvalues[:5], ref[:5], rtol=1e-9)

    def test_reconstruction_error_non_increasing(self, rng):
        grid = np.linspace(0, 1, 20)
        F = rng.normal(size=(8, 20))
        errs = []
        for p in range(1, 8):
            basis = pca_fit(F, grid, n_components=p)
            errs.append(np.linalg.norm(basis.reconstruct(basis.project(F)) - F))
        assert np.all(np.diff(errs) <= 1e-10)
        assert errs[-1] <= 1e-9 * np.linalg.norm(F)

    def test_constant_dataset_raises(self):
        with pytest.raises(ReducedRankError):
            pca_fit(np.ones((5, 10)), np.linspace(0, 1, 10), n_components=1)

    def test_too_many_components(self, rng):
        with pytest.raises(ReducedRankError):
            pca_fit(rng.normal(size=(3, 10)), np.linspace(0, 1, 10), n_components=4)


class TestBSpline:
    def test_order_one_indicators(self):
        knots = clamped_knots(1, [0.25, 0.5], (0.0, 1.0))
        u = np.array([0.1, 0.3, 0.6, 1.0])
        B = bspline_design(knots, 1, u)
        np.testing.assert_array_equal(B, [[1, 0, 0, 0], [0, 1, 0, 0], [0, 0, 1, 1]])

    @pytest.mark.parametrize("order", [1, 2, 3, 4, 5])
    def test_partition_of_unity(self, order, rng):
        u = np.concatenate([rng.uniform(0, 1, 1000), [0.0, 1.0]])
        knots = clamped_knots(order, np.sort(rng.uniform(0.05, 0.95, 4)), (0.0, 1.0))
        np.testing.assert_allclose(bspline_design(knots, order, u).sum(axis=0), 1.0, atol=1e-12)

    def test_cubic_matches_scipy(self):
        interior = np.array([0.2, 0.45, 0.7])
        knots = clamped_knots(4, interior, (0.0, 1.0))
        u = 0.5 * (knots[3:-4] + knots[4:-3])
        B = bspline_design(knots, 4, u)
        for r in range(B.shape[0]):
            c = np.zeros(B.shape[0])
            c[r] = 1.0
            np.testing.assert_allclose(B[r], BSpline(knots, c, 3)(u), atol=1e-12)

    def test_invalid_knots(self):
        with pytest.raises(InvalidKnotsError):
            bspline_basis(4, 2, (0.0, 1.0), np.linspace(0, 1, 20), interior_knots=[0.6, 0.3])
        with pytest.raises(InvalidKnotsError):
            bspline_design([0.0, 1.0, 0.5], 1, [0.2])


class TestHaar:
    def test_level_zero_orthogonal(self):
        grid = cell_centred(16)
        basis = haar_basis(0, (0.0, 1.0), grid)
        assert basis.size == 2
        assert abs(basis.gram[0, 1]) < 1e-14

    @pytest.mark.parametrize("level", range(7))
    def test_gram_identity(self, level):
        grid = cell_centred(256)
        np.testing.assert_allclose(haar_basis(level, (0.0, 1.0), grid).gram,
                                   np.eye(2 ** (level + 1)), atol=1e-10)

    def test_level_four_on_256_points(self):
        basis = haar_basis(4, (0.0, 1.0), cell_centred(256))
        np.testing.assert_allclose(np.diag(basis.gram), 1.0, atol=1e-10)
        assert basis.size == 32

    def test_right_endpoint_belongs_to_last_cell(self):
        A = haar_atoms(1, (0.0, 1.0), np.array([1.0]))
        assert A[-1, 0] < 0

    def test_negative_level(self):
        with pytest.raises(InvalidLevelError):
            haar_basis(-1, (0.0, 1.0), cell_centred(8))


class TestCoefficientPCA:
    def test_full_rotation_is_isometry(self, rng):
        B = rng.normal(size=(15, 6))
        Z = pca_on_coefficients(B, 6)
        d_before = np.linalg.norm(B[:, None] - B[None], axis=-1)
        d_after = np.linalg.norm(Z[:, None] - Z[None], axis=-1)
        np.testing.assert_allclose(d_after, d_before, atol=1e-10)

    def test_reduced_distances_match_dense_pca(self, rng):
        B = rng.normal(size=(30, 10)) @ rng.normal(size=(10, 10))
        Z = pca_on_coefficients(B, 4)
        Bc = B - B.mean(axis=0)
        lam, V = np.linalg.eigh(Bc.T @ Bc)
        ref = Bc @ V[:, ::-1][:, :4]
        d = lambda X: np.linalg.norm(X[:, None] - X[None], axis=-1)
        np.testing.assert_allclose(d(Z), d(ref), atol=1e-9)

    def test_whitened_scores_have_unit_variance(self, rng):
        B = rng.normal(size=(50, 8)) * np.arange(1, 9)
        Z = fit_coefficient_pca(B, 3, whiten=True).transform(B)
        np.testing.assert_allclose(Z.var(axis=0), 1.0, rtol=1e-10)

    def test_wavelet_energy_on_rayleigh(self):
        grid, curves = rayleigh_channels()
        cells = cell_centred(150, 0.0, 1.5)
        F = np.array([np.interp(cells, grid, f) for f in curves[0]])
        beta = haar_basis(6, (0.0, 1.5), cells).project(F)
        assert fit_coefficient_pca(beta, 6).explained() >= 0.999


class TestWeightedDistance:
    def test_zero_for_equal_inputs(self, rng):
        a = [rng.normal(size=3)]
        assert weighted_l2_sq(a, a, [1.0]) == 0.0

    def test_pythagorean(self):
        assert weighted_l2_sq([np.array([3.0, 0.0])], [np.array([0.0, 4.0])], [5.0]) == pytest.approx(1.0)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-10, 10), min_size=6, max_size=6),
           st.floats(0.1, 10), st.floats(0.1, 10))
    def test_symmetric_and_scale_ratio(self, vals, c, ell):
        a, b = [np.array(vals[:3])], [np.array(vals[3:])]
        d = weighted_l2_sq(a, b, [ell])
        assert d == weighted_l2_sq(b, a, [ell])
        assert d >= 0
        scaled = weighted_l2_sq([c * a[0]], [c * b[0]], [c * ell])
        assert scaled == pytest.approx(d, rel=1e-12, abs=1e-300)

    def test_reconstructed_quadrature(self):
        grid = np.linspace(0, 1, 400)
        basis = bspline_basis(4, 2, (0.0, 1.0), grid)
        f1, f2 = np.sin(2 * grid), np.cos(1.5 * grid) * grid
        b1, b2 = basis.project(f1), basis.project(f2)
        r1, r2 = basis.reconstruct(b1), basis.reconstruct(b2)
        ref = trapezoid((r1 - r2) ** 2, grid)
        assert weighted_l2_sq([b1], [b2], [1.0], [basis.gram]) == pytest.approx(ref, rel=0.02)


class TestEncodedInputs:
    def test_pairwise_symmetric_zero_diagonal(self, rng):
        enc = EncodedInputs((rng.normal(size=(7, 3)), rng.normal(size=(7, 2))), (np.eye(3), np.eye(2)))
        D = enc.pairwise_sq()
        for Dd in D:
            np.testing.assert_array_equal(Dd, Dd.T)
            np.testing.assert_array_equal(np.diag(Dd), 0.0)

    def test_pairwise_matches_weighted_l2(self, rng):
        enc = EncodedInputs((rng.normal(size=(4, 3)),), (np.eye(3),))
        D = enc.pairwise_sq()
        assert D[0, 1, 2] == pytest.approx(weighted_l2_sq(enc.row(1), enc.row(2), [1.0]))

    def test_channel_mismatch(self, rng):
        with pytest.raises(ShapeError):
            EncodedInputs((rng.normal(size=(3, 2)), rng.normal(size=(4, 2))), (np.eye(2),) * 2)


class TestFunctionalEncoder:
    @pytest.mark.parametrize("kind", list(BasisKind))
    def test_every_kind_encodes_to_d_proj(self, kind):
        grid, curves = rayleigh_channels(n_f=30)
        enc = fit_encoder(list(curves), grid, EncodingConfig(kind, 6, haar_level=4))
        out = enc.transform(list(curves))
        assert out.n == 30 and out.n_channels == 3
        assert all(c.shape[1] == 6 for c in out.coeffs)

    def test_round_trip_serialization(self):
        grid, curves = rayleigh_channels(n_f=20)
        enc = fit_encoder(list(curves), grid)
        back = FunctionalEncoder.from_dict(enc.to_dict())
        for a, b in zip(enc.transform(list(curves)).coeffs, back.transform(list(curves)).coeffs):
            np.testing.assert_array_equal(a, b)

    def test_grid_mismatch(self):
        grid, curves = rayleigh_channels(n_f=20)
        enc = fit_encoder(list(curves), grid)
        with pytest.raises(EncodingError):
            enc.transform([c[:, :100] for c in curves])

    def test_lowercase_kind(self):
        assert EncodingConfig("bspline_pca").kind is BasisKind.BSPLINE_PCA


class TestChannelCSV:
    def test_round_trip(self, tmp_path, rng):
        grid = np.linspace(0, 1.5, 7)
        F = rng.normal(size=(3, 7))
        write_channel_csv(tmp_path / "c.csv", grid, F)
        g, back = read_channel_csv(tmp_path / "c.csv")
        np.testing.assert_array_equal(g, grid)
        np.testing.assert_array_equal(back, F)
