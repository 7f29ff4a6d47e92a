"""Test the mixture hypernetwork and checkpoints."""

import json

import numpy as np
import pytest

from src.calibration.autodiff import Tensor, central_difference, grad
from src.calibration.distributions import mixture_log_prob
from src.calibration.model import (
    MixturePredictor,
    ModelWeights,
    decode_head,
    encode_head,
    forward,
    init_weights,
    load_checkpoint,
    parameter_count,
    save_checkpoint,
)
from src.shared.errors import ContractViolationError, DataFormatError
from src.shared.validation.schemas import NetworkConfig


def test_parameter_count(tiny_network):
    """Test 2->8 plus 8->K(1 + D + D(D+1)/2) weights and biases."""
    assert tiny_network.head_size == 12
    assert parameter_count(tiny_network) == 2 * 8 + 8 + 8 * 12 + 12


class TestInitWeights:
    def test_deterministic_in_seed(self, tiny_network):
        np.testing.assert_array_equal(
            init_weights(tiny_network, 3).theta, init_weights(tiny_network, 3).theta
        )

    def test_different_seeds_differ(self, tiny_network):
        first = init_weights(tiny_network, 1).theta
        second = init_weights(tiny_network, 2).theta
        nonzero = (first != 0.0) | (second != 0.0)
        assert np.mean(first[nonzero] != second[nonzero]) >= 0.99

    def test_fresh_network_gives_moderate_nll(self, linear_splits):
        train_set = linear_splits[0]
        config = NetworkConfig(input_dim=2, output_dim=2, components=3, hidden_widths=[16, 16])
        for seed in range(20):
            mixture = forward(init_weights(config, seed), config, train_set.features)
            values = -mixture_log_prob(mixture, train_set.targets).data
            assert np.all(np.isfinite(values))
            assert abs(values.mean()) <= 10.0


class TestForward:
    def test_zero_weights_decode_to_floor_plus_softplus(self, tiny_network):
        weights = ModelWeights(np.zeros(parameter_count(tiny_network)), tiny_network, 0)
        mixture = forward(weights, tiny_network, np.array([0.3, -1.0]))
        np.testing.assert_allclose(mixture.weights, [0.5, 0.5])
        np.testing.assert_array_equal(mixture.means, np.zeros((2, 2)))
        diagonal = np.diagonal(mixture.chol_factors, axis1=-2, axis2=-1)
        np.testing.assert_allclose(diagonal, np.log(2.0) + 1e-4)
        assert diagonal[0, 0] == pytest.approx(0.6933, abs=1e-4)

    def test_batched_output_shapes(self, tiny_network):
        mixture = forward(init_weights(tiny_network, 0), tiny_network, np.ones((5, 2)))
        assert mixture.batch_shape == (5,)
        assert np.asarray(mixture.chol_factors).shape == (5, 2, 2, 2)
        np.testing.assert_allclose(np.asarray(mixture.weights).sum(axis=-1), 1.0)
        assert np.all(np.triu(mixture.chol_factors, k=1) == 0.0)

    def test_rejects_non_finite_input(self, tiny_network):
        with pytest.raises(ContractViolationError):
            forward(init_weights(tiny_network, 0), tiny_network, np.array([[np.nan, 0.0]]))

    def test_rejects_wrong_width(self, tiny_network):
        with pytest.raises(ContractViolationError):
            forward(init_weights(tiny_network, 0), tiny_network, np.ones((2, 3)))

    def test_gradient_matches_central_differences(self, tiny_network, rng):
        """Test d log p(y | forward(x)) / d theta against finite differences."""
        x = rng.normal(size=(3, 2))
        y = rng.normal(size=(3, 2))
        theta = init_weights(tiny_network, 5).theta

        def loss(t):
            return -mixture_log_prob(forward(t, tiny_network, x), y).mean()

        np.testing.assert_allclose(
            grad(loss, theta),
            central_difference(lambda v: loss(Tensor(v)).item(), theta),
            rtol=1e-4,
            atol=1e-7,
        )

    def test_predictor_is_callable(self, tiny_network):
        predictor = MixturePredictor(init_weights(tiny_network, 0))
        assert predictor.config == tiny_network
        assert predictor(np.zeros((4, 2))).batch_shape == (4,)


def test_head_encoding_inverts_decoding(tiny_network, batched_mixture):
    raw = encode_head(batched_mixture, tiny_network)
    assert raw.shape == (6, tiny_network.head_size)
    decoded = decode_head(raw, tiny_network)
    np.testing.assert_allclose(decoded.weights, batched_mixture.weights, rtol=1e-12)
    np.testing.assert_allclose(decoded.means, batched_mixture.means)
    np.testing.assert_allclose(decoded.chol_factors, batched_mixture.chol_factors, rtol=1e-10)


def test_weights_validate_size(tiny_network):
    with pytest.raises(ContractViolationError):
        ModelWeights(np.zeros(5), tiny_network, 0)
    with pytest.raises(ContractViolationError):
        ModelWeights(np.full(parameter_count(tiny_network), np.inf), tiny_network, 0)


class TestCheckpoint:
    def test_round_trip_is_bit_exact(self, tiny_network, tmp_path):
        weights = init_weights(tiny_network, 11)
        path = save_checkpoint(weights, tmp_path / "run" / "checkpoint.json")
        loaded = load_checkpoint(path)
        np.testing.assert_array_equal(loaded.theta, weights.theta)
        assert loaded.config == tiny_network
        assert loaded.seed == 11

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataFormatError):
            load_checkpoint(tmp_path / "absent.json")

    def test_malformed_file(self, tmp_path):
        path = tmp_path / "checkpoint.json"
        path.write_text("{not json")
        with pytest.raises(DataFormatError):
            load_checkpoint(path)

    def test_unsupported_version(self, tiny_network, tmp_path):
        path = save_checkpoint(init_weights(tiny_network, 0), tmp_path / "checkpoint.json")
        record = json.loads(path.read_text())
        record["format_version"] = 99
        path.write_text(json.dumps(record))
        with pytest.raises(DataFormatError):
            load_checkpoint(path)

    def test_parameter_count_mismatch(self, tiny_network, tmp_path):
        path = save_checkpoint(init_weights(tiny_network, 0), tmp_path / "checkpoint.json")
        record = json.loads(path.read_text())
        record["parameters"] = record["parameters"][:-1]
        path.write_text(json.dumps(record))
        with pytest.raises(DataFormatError):
            load_checkpoint(path)
