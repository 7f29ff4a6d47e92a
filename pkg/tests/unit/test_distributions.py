"""Test Gaussian-mixture predictive distributions."""

import numpy as np
import pytest
from scipy.stats import multivariate_normal

from src.calibration.distributions import (
    LOG_2PI,
    MixtureParams,
    PcaBasis,
    SampleSet,
    batched_pca,
    categorical_draw,
    log_density,
    pca_of_samples,
    sample,
    smooth_orthant_cdf,
)
from src.shared.errors import ContractViolationError, InsufficientSamplesError


class TestMixtureParams:
    """Test construction invariants."""

    def test_rejects_non_probability_weights(self):
        with pytest.raises(ContractViolationError):
            MixtureParams(np.array([0.5, 0.6]), np.zeros((2, 1)), np.ones((2, 1, 1)))

    def test_rejects_upper_triangle(self):
        chol = np.array([[[1.0, 0.2], [0.0, 1.0]]])
        with pytest.raises(ContractViolationError):
            MixtureParams(np.ones(1), np.zeros((1, 2)), chol)

    def test_rejects_diagonal_below_floor(self):
        chol = np.array([[[1e-6, 0.0], [0.0, 1.0]]])
        with pytest.raises(ContractViolationError):
            MixtureParams(np.ones(1), np.zeros((1, 2)), chol)

    def test_rejects_shape_mismatch(self):
        with pytest.raises(ContractViolationError):
            MixtureParams(np.ones(1), np.zeros((1, 2)), np.eye(3)[None])

    def test_row_and_take(self, batched_mixture):
        assert batched_mixture.batch_shape == (6,)
        single = batched_mixture.row(2)
        assert single.batch_shape == ()
        np.testing.assert_array_equal(single.means, batched_mixture.means[2])
        assert batched_mixture.take([0, 3]).batch_shape == (2,)


class TestLogDensity:
    def test_standard_normal_mode(self, standard_normal_2d):
        """Test log N(0 | 0, I) in two dimensions is -ln(2 pi)."""
        assert log_density(standard_normal_2d, np.zeros(2)) == pytest.approx(-LOG_2PI)

    def test_identical_components_collapse(self, standard_normal_2d):
        """Test a mixture of identical components equals the single component."""
        doubled = MixtureParams(
            np.array([0.5, 0.5]), np.zeros((2, 2)), np.stack([np.eye(2), np.eye(2)])
        )
        y = np.array([0.7, -1.9])
        assert log_density(doubled, y) == pytest.approx(log_density(standard_normal_2d, y))

    def test_matches_dense_gaussian(self, two_component_mixture):
        """Test against an explicit covariance-based evaluation."""
        y = np.array([0.3, -0.8])
        covs = two_component_mixture.covariances()
        expected = np.log(
            sum(
                w * multivariate_normal(mean=m, cov=c).pdf(y)
                for w, m, c in zip(
                    two_component_mixture.weights, two_component_mixture.means, covs
                )
            )
        )
        assert log_density(two_component_mixture, y) == pytest.approx(expected, rel=1e-10)

    def test_integrates_to_one(self, two_component_mixture):
        """Test grid quadrature of the density over a wide box."""
        axis = np.linspace(-10.0, 10.0, 401)
        step = axis[1] - axis[0]
        grid = np.stack(np.meshgrid(axis, axis, indexing="ij"), axis=-1).reshape(-1, 2)
        density = np.exp(log_density(two_component_mixture, grid))
        assert density.sum() * step * step == pytest.approx(1.0, abs=1e-3)

    def test_dimension_mismatch(self, standard_normal_2d):
        with pytest.raises(ContractViolationError):
            log_density(standard_normal_2d, np.zeros(3))

    def test_negligible_weight_stays_finite(self):
        params = MixtureParams(
            np.array([1.0 - 1e-300, 1e-300]),
            np.array([[0.0, 0.0], [30.0, 30.0]]),
            np.stack([np.eye(2), np.eye(2)]),
        )
        for y in (np.zeros(2), np.array([30.0, 30.0]), np.array([-40.0, 55.0])):
            assert np.isfinite(log_density(params, y))
        assert log_density(params, np.zeros(2)) == pytest.approx(-LOG_2PI)


class TestSampling:
    def test_degenerate_spread(self):
        """Test samples of a nearly point-mass component stay at its mean."""
        floor = 1e-4
        params = MixtureParams(
            np.ones(1), np.array([[3.0, -1.0]]), floor * np.eye(2)[None]
        )
        draws = sample(params, 5, 200)
        assert np.all(np.abs(draws.samples - np.array([3.0, -1.0])) <= 10 * floor)

    def test_moments_of_standard_normal(self, standard_normal_2d):
        """Test law-of-large-numbers moments."""
        draws = sample(standard_normal_2d, 11, 100_000).samples
        np.testing.assert_allclose(draws.mean(axis=0), 0.0, atol=0.02)
        np.testing.assert_allclose(np.cov(draws.T), np.eye(2), atol=0.05)

    def test_single_component_moments_and_entropy(self):
        """Test draws of y = mu + L z match mu, L L^T and the differential entropy."""
        mean = np.array([2.0, -1.0])
        chol = np.array([[1.5, 0.0], [-0.6, 0.4]])
        params = MixtureParams(np.ones(1), mean[None], chol[None])
        draws = sample(params, 21, 100_000).samples
        np.testing.assert_allclose(draws.mean(axis=0), mean, atol=0.03)
        np.testing.assert_allclose(np.cov(draws.T), chol @ chol.T, atol=0.05)
        entropy = -LOG_2PI - 1.0 - np.log(np.diag(chol)).sum()
        assert np.mean(log_density(params, draws)) == pytest.approx(entropy, abs=0.02)

    def test_deterministic_in_seed(self, two_component_mixture):
        first = sample(two_component_mixture, 3, 50)
        second = sample(two_component_mixture, 3, 50)
        np.testing.assert_array_equal(first.samples, second.samples)
        np.testing.assert_array_equal(first.component_indices, second.component_indices)
        assert first.source_seed == 3
        assert not np.array_equal(first.samples, sample(two_component_mixture, 4, 50).samples)

    def test_component_frequencies_follow_weights(self, two_component_mixture):
        draws = sample(two_component_mixture, 0, 20_000)
        share = np.mean(draws.component_indices == 1)
        assert share == pytest.approx(0.7, abs=0.02)

    def test_rejects_batched_mixture(self, batched_mixture):
        with pytest.raises(ContractViolationError):
            sample(batched_mixture, 0, 10)

    def test_rejects_zero_count(self, standard_normal_2d):
        with pytest.raises(ContractViolationError):
            sample(standard_normal_2d, 0, 0)


def test_categorical_draw_inverse_cdf():
    """Test component choice by cumulative weight."""
    weights = np.array([[0.2, 0.5, 0.3]])
    uniforms = np.array([[0.0, 0.19, 0.21, 0.69, 0.71, 0.999999]])
    np.testing.assert_array_equal(categorical_draw(weights, uniforms), [[0, 0, 1, 1, 2, 2]])


class TestOrthantCdf:
    def test_single_equal_sample(self):
        draws = SampleSet(np.array([[1.0, 2.0]]), 0, np.zeros(1, dtype=np.int64))
        assert smooth_orthant_cdf(np.array([1.0, 2.0]), draws, 7.0) == pytest.approx(0.25)

    def test_saturated_sigmoid(self):
        tau = 100.0
        values = np.zeros((20, 2)) - 10.0 / tau
        draws = SampleSet(values, 0, np.zeros(20, dtype=np.int64))
        assert smooth_orthant_cdf(np.zeros(2), draws, tau) >= 0.9999**2

    def test_independent_normals_at_origin(self, standard_normal_2d):
        """Test the quadrant probability Phi(0)^2."""
        draws = sample(standard_normal_2d, 1, 10_000)
        assert smooth_orthant_cdf(np.zeros(2), draws, 100.0) == pytest.approx(0.25, abs=0.02)

    def test_nondecreasing_in_every_coordinate(self, two_component_mixture, rng):
        draws = sample(two_component_mixture, 6, 300)
        for _ in range(50):
            y = rng.normal(scale=2.0, size=2)
            tau = rng.uniform(0.5, 50.0)
            base = smooth_orthant_cdf(y, draws, tau)
            for d in range(2):
                moved = y.copy()
                moved[d] += rng.uniform(1e-3, 1.0)
                assert smooth_orthant_cdf(moved, draws, tau) >= base

    def test_sharper_above_every_sample(self, two_component_mixture):
        """Test a larger temperature raises the value once y dominates all samples."""
        draws = sample(two_component_mixture, 6, 200)
        y = draws.samples.max(axis=0) + 0.1
        values = [smooth_orthant_cdf(y, draws, tau) for tau in (0.5, 2.0, 10.0, 50.0)]
        assert np.all(np.diff(values) > 0.0)
        assert 0.0 < values[0] and values[-1] < 1.0

    def test_rejects_non_positive_temperature(self, standard_normal_2d):
        draws = sample(standard_normal_2d, 1, 10)
        with pytest.raises(ContractViolationError):
            smooth_orthant_cdf(np.zeros(2), draws, 0.0)


class TestPca:
    def test_rank_one_cloud(self):
        """Test samples on the first axis give e1 and a zero second eigenvalue."""
        values = np.stack([np.linspace(-3.0, 2.0, 30), np.zeros(30)], axis=1)
        basis = pca_of_samples(SampleSet(values, 0, np.zeros(30, dtype=np.int64)))
        np.testing.assert_allclose(basis.eigenvectors[:, 0], [1.0, 0.0], atol=1e-12)
        assert basis.eigenvalues[1] == pytest.approx(0.0, abs=1e-12)
        np.testing.assert_allclose(basis.explained_variance_ratio, [1.0, 0.0], atol=1e-12)

    def test_sign_convention(self):
        """Test each eigenvector's largest-magnitude entry is positive."""
        values = np.stack([np.linspace(-3.0, 3.0, 40), -np.linspace(-3.0, 3.0, 40) * 2.0], axis=1)
        basis = pca_of_samples(SampleSet(values, 0, np.zeros(40, dtype=np.int64)))
        first = basis.eigenvectors[:, 0]
        assert first[np.argmax(np.abs(first))] > 0.0

    def test_isotropic_cloud(self, standard_normal_2d):
        basis = pca_of_samples(sample(standard_normal_2d, 2, 100_000))
        np.testing.assert_allclose(basis.explained_variance_ratio, 0.5, atol=0.02)

    def test_batched_descending(self, rng):
        values = rng.normal(size=(4, 50, 3)) * np.array([3.0, 1.0, 0.2])
        basis = batched_pca(values)
        assert basis.eigenvalues.shape == (4, 3)
        assert np.all(np.diff(basis.eigenvalues, axis=-1) <= 0.0)
        np.testing.assert_allclose(basis.explained_variance_ratio.sum(axis=-1), 1.0)

    def test_orthogonal_transform_of_samples(self, rng):
        """Test eigenvalues are unchanged and eigenvectors rotate with the cloud."""
        values = rng.normal(size=(500, 3)) * np.array([3.0, 1.5, 0.4])
        rotation, _ = np.linalg.qr(rng.normal(size=(3, 3)))
        labels = np.zeros(500, dtype=np.int64)
        basis = pca_of_samples(SampleSet(values, 0, labels))
        rotated = pca_of_samples(SampleSet(values @ rotation.T, 0, labels))
        np.testing.assert_allclose(rotated.eigenvalues, basis.eigenvalues, rtol=1e-9)
        alignment = np.abs(np.sum(rotated.eigenvectors * (rotation @ basis.eigenvectors), axis=0))
        np.testing.assert_allclose(alignment, 1.0, atol=1e-9)
        first = rotated.eigenvectors[:, 0]
        assert first[np.argmax(np.abs(first))] > 0.0

    def test_basis_rejects_non_orthonormal_vectors(self):
        with pytest.raises(ContractViolationError):
            PcaBasis(np.array([[1.0, 1.0], [0.0, 1.0]]), np.array([2.0, 1.0]), np.array([2, 1]) / 3)

    def test_basis_rejects_increasing_or_negative_eigenvalues(self):
        with pytest.raises(ContractViolationError):
            PcaBasis(np.eye(2), np.array([1.0, 2.0]), np.array([1, 2]) / 3)
        with pytest.raises(ContractViolationError):
            PcaBasis(np.eye(2), np.array([1.0, -0.5]), np.array([1.0, 0.0]))

    def test_basis_rejects_shape_mismatch(self):
        with pytest.raises(ContractViolationError):
            PcaBasis(np.eye(3), np.array([2.0, 1.0]), np.array([2, 1]) / 3)

    def test_too_few_samples(self):
        with pytest.raises(InsufficientSamplesError):
            pca_of_samples(SampleSet(np.zeros((1, 2)), 0, np.zeros(1, dtype=np.int64)))
