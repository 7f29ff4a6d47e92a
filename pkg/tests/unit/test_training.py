"""Test regularized training and lambda selection."""

import numpy as np
import pytest

from src.calibration import training
from src.calibration.autodiff import Tensor, central_difference, grad, no_grad
from src.calibration.distributions import (
    batched_pca,
    categorical_draw,
    mixture_log_prob,
    reparametrized_samples,
)
from src.calibration.metrics import QuantileGrid
from src.calibration.model import forward, init_weights
from src.calibration.scoring import batch_nll
from src.calibration.training import (
    Adam,
    NoiseSource,
    ValidationSummary,
    monitored_preranks,
    objective,
    regularizer,
    regularizer_terms,
    select_lambda,
    train,
    tune_lambda,
    validate,
)
from src.shared.errors import ContractViolationError, NumericalFailureError, PreRankConfigError
from src.shared.validation.schemas import (
    Composition,
    LambdaRecord,
    NetworkConfig,
    PreRankSpec,
    RegularizerConfig,
    ScoreKind,
    TrainConfig,
)


def _reg(**fields):
    options = {"samples": 20, "grid_size": 10, "temperature": 20.0}
    options.update(fields)
    return RegularizerConfig(**options)


def _train_cfg(**fields):
    options = {
        "learning_rate": 1e-2,
        "batch_size": 64,
        "max_epochs": 3,
        "patience": 2,
        "seed": 0,
        "energy_samples": 20,
        "eval_samples": 20,
    }
    options.update(fields)
    return TrainConfig(**options)


def _batch(rng, rows=8):
    return rng.normal(size=(rows, 2)), rng.normal(size=(rows, 2))


def test_adam_first_step_moves_by_learning_rate():
    """Test the bias-corrected first step is lr * sign(gradient)."""
    optimizer = Adam(learning_rate=0.1)
    updated = optimizer.step(np.zeros(3), np.array([2.0, -0.5, 1e-3]))
    np.testing.assert_allclose(updated, [-0.1, 0.1, -0.1], rtol=1e-4)
    assert optimizer.steps == 1


class TestNoiseSource:
    def test_fixed_noise_reused_across_steps(self):
        noise = NoiseSource(seed=1, count=5, output_dim=2, fixed=True)
        rows = np.array([3, 0, 7])
        first, second = noise.draw(rows, 0), noise.draw(rows[::-1], 9)
        np.testing.assert_array_equal(first[1], second[1][::-1])
        np.testing.assert_array_equal(first[0], second[0][::-1])

    def test_fresh_noise_changes_with_step(self):
        noise = NoiseSource(seed=1, count=5, output_dim=2)
        rows = np.arange(4)
        assert noise.draw(rows, 0)[1].shape == (4, 5, 2)
        assert not np.array_equal(noise.draw(rows, 0)[1], noise.draw(rows, 1)[1])
        np.testing.assert_array_equal(noise.draw(rows, 3)[0], noise.draw(rows, 3)[0])


class TestRegularizerTerms:
    def test_plain_single_prerank(self):
        terms = regularizer_terms(_reg(prerank=PreRankSpec(kind="location")), 3)
        assert [(spec.label, weight) for spec, weight in terms] == [("location", 1.0)]

    def test_plain_family_is_averaged(self):
        terms = regularizer_terms(_reg(prerank=PreRankSpec(kind="marginal")), 4)
        assert len(terms) == 4
        assert sum(weight for _, weight in terms) == pytest.approx(1.0)

    def test_marginal_plus(self):
        reg = _reg(prerank=PreRankSpec(kind="copula"), composition=Composition.MARGINAL_PLUS)
        terms = regularizer_terms(reg, 2)
        assert [spec.label for spec, _ in terms] == ["copula", "marginal_1", "marginal_2"]
        assert [weight for _, weight in terms] == [1.0, 0.5, 0.5]

    def test_pca_plus_uses_explained_variance(self, rng):
        samples = rng.normal(size=(5, 200, 3)) * np.array([4.0, 1.0, 0.5])
        reg = _reg(composition=Composition.PCA_PLUS, pca_threshold=0.8)
        terms = regularizer_terms(reg, 3, samples)
        assert [spec.label for spec, _ in terms] == ["location", "pca_1"]
        with pytest.raises(ContractViolationError):
            regularizer_terms(reg, 3)

    @pytest.mark.parametrize("threshold, count", [(0.8, 1), (0.95, 2), (1.0, 3)])
    def test_pca_plus_follows_prerank_threshold(self, rng, threshold, count):
        samples = rng.normal(size=(5, 400, 3)) * np.array([4.0, 1.0, 0.5])
        prerank = PreRankSpec(kind="location", explained_variance_threshold=threshold)
        reg = _reg(composition=Composition.PCA_PLUS, prerank=prerank)
        assert reg.pca_threshold == threshold
        terms = regularizer_terms(reg, 3, samples)
        assert [spec.label for spec, _ in terms[1:]] == [f"pca_{d}" for d in range(1, count + 1)]

    def test_dependency_on_one_output(self):
        with pytest.raises(PreRankConfigError):
            regularizer_terms(_reg(prerank=PreRankSpec(kind="dependency")), 1)


class TestObjective:
    def test_zero_lambda_is_mean_nll(self, tiny_network, rng):
        x, y = _batch(rng)
        theta = init_weights(tiny_network, 1).theta
        noise = NoiseSource(0, 20, 2).draw(np.arange(8), 0)
        with no_grad():
            value = objective(theta, tiny_network, x, y, _reg(lam=0.0), ScoreKind.NLL, noise).item()
            expected = -mixture_log_prob(forward(theta, tiny_network, x), y).mean().item()
        assert value == expected

    def test_penalty_is_nonnegative(self, tiny_network, rng):
        x, y = _batch(rng)
        theta = init_weights(tiny_network, 1).theta
        noise = NoiseSource(0, 20, 2).draw(np.arange(8), 0)
        with no_grad():
            plain = objective(theta, tiny_network, x, y, _reg(lam=0.0), ScoreKind.NLL, noise).item()
            regularized = objective(
                theta, tiny_network, x, y, _reg(lam=1.0), ScoreKind.NLL, noise
            ).item()
        assert regularized >= plain

    @pytest.mark.parametrize("seed", range(20))
    @pytest.mark.parametrize(
        "reg",
        [
            _reg(lam=1.0, p=2.0),
            _reg(
                lam=1.0,
                p=2.0,
                prerank=PreRankSpec(kind="copula"),
                composition=Composition.MARGINAL_PLUS,
            ),
            _reg(
                lam=1.0,
                p=2.0,
                prerank=PreRankSpec(kind="hdr"),
                composition=Composition.PCA_PLUS,
            ),
        ],
        ids=["plain-location", "marginal_plus-copula", "pca_plus-hdr"],
    )
    def test_gradient_matches_central_differences(self, tiny_network, reg, seed):
        """Test the full regularized loss on a K=2, D=2, N=8 batch."""
        x, y = _batch(np.random.default_rng(seed))
        theta = init_weights(tiny_network, seed).theta
        noise = NoiseSource(seed, 20, 2).draw(np.arange(8), 0)
        with no_grad():
            mixture = forward(theta, tiny_network, x)
            draws = reparametrized_samples(
                mixture, categorical_draw(mixture.weights.data, noise[0]), noise[1]
            )
        basis = batched_pca(draws.data[:, : reg.samples]).eigenvectors

        def loss(t):
            return objective(
                t, tiny_network, x, y, reg, ScoreKind.NLL, noise, eigenvectors=basis
            )

        np.testing.assert_allclose(
            grad(loss, theta),
            central_difference(lambda v: loss(Tensor(v)).item(), theta, step=1e-6),
            rtol=1e-4,
            atol=1e-6,
        )

    @pytest.mark.parametrize("lam", [0.25, 1.0, 3.0])
    def test_objective_is_score_plus_weighted_penalty(self, tiny_network, rng, lam):
        x, y = _batch(rng)
        theta = init_weights(tiny_network, 4).theta
        noise = NoiseSource(5, 20, 2).draw(np.arange(8), 0)
        reg = _reg(lam=lam, prerank=PreRankSpec(kind="scale"))
        with no_grad():
            total = objective(theta, tiny_network, x, y, reg, ScoreKind.NLL, noise).item()
            mixture = forward(theta, tiny_network, x)
            draws = reparametrized_samples(
                mixture, categorical_draw(mixture.weights.data, noise[0]), noise[1]
            )
            penalty = regularizer(
                mixture, y, draws[:, : reg.samples], reg, QuantileGrid.uniform(reg.grid_size)
            ).item()
            score = batch_nll(mixture, y).item()
        assert total == pytest.approx(score + lam * penalty, rel=1e-12)

    def test_energy_score_objective_is_differentiable(self, tiny_network, rng):
        x, y = _batch(rng)
        theta = init_weights(tiny_network, 2).theta
        noise = NoiseSource(3, 20, 2).draw(np.arange(8), 0)

        def loss(t):
            return objective(t, tiny_network, x, y, _reg(lam=0.0), ScoreKind.ENERGY, noise, 20)

        np.testing.assert_allclose(
            grad(loss, theta),
            central_difference(lambda v: loss(Tensor(v)).item(), theta, step=1e-6),
            rtol=1e-4,
            atol=1e-6,
        )


class TestTrain:
    def test_history_is_reproducible(self, tiny_network, linear_splits):
        splits = linear_splits[:2]
        first_weights, first = train(tiny_network, _train_cfg(), _reg(), splits, threads=1)
        second_weights, second = train(tiny_network, _train_cfg(), _reg(), splits, threads=2)
        assert first == second
        np.testing.assert_array_equal(first_weights.theta, second_weights.theta)

    def test_keeps_best_epoch(self, tiny_network, linear_splits):
        weights, history = train(
            tiny_network, _train_cfg(max_epochs=4), _reg(lam=0.5), linear_splits[:2]
        )
        assert 1 <= history.best_epoch <= len(history.epochs) <= 4
        best = history.epochs[history.best_epoch - 1]
        assert best.val_objective == history.best_val_objective
        assert set(best.val_pce) == {"location"}
        summary = validate(weights, linear_splits[1], _train_cfg(max_epochs=4), _reg(lam=0.5))
        assert summary.objective == pytest.approx(best.val_objective)

    def test_training_reduces_validation_nll(self, tiny_network, linear_splits):
        _, history = train(
            tiny_network, _train_cfg(max_epochs=15, patience=15), _reg(), linear_splits[:2]
        )
        assert history.best_val_objective < history.epochs[0].val_objective

    def test_early_stopping(self, tiny_network, linear_splits, monkeypatch):
        flat = ValidationSummary(1.0, 1.0, 1.0, 1.0, {})
        monkeypatch.setattr(training, "validate", lambda *args, **kwargs: flat)
        _, history = train(
            tiny_network, _train_cfg(max_epochs=10, patience=2), _reg(), linear_splits[:2]
        )
        assert len(history.epochs) == 3
        assert history.best_epoch == 1

    def test_returns_parameters_of_lowest_validation_epoch(
        self, tiny_network, linear_splits, monkeypatch
    ):
        values = iter([3.0, 1.0, 2.0, 0.5, 0.7, 0.9, 4.0])
        seen = []

        def scripted(weights, *args, **kwargs):
            seen.append(weights.theta.copy())
            value = next(values)
            return ValidationSummary(value, value, value, value, {})

        monkeypatch.setattr(training, "validate", scripted)
        weights, history = train(
            tiny_network, _train_cfg(max_epochs=10, patience=3), _reg(), linear_splits[:2]
        )
        assert len(history.epochs) == 7
        assert history.best_epoch == 4
        assert history.best_val_objective == 0.5
        np.testing.assert_array_equal(weights.theta, seen[3])
        assert not np.array_equal(weights.theta, seen[-1])

    def test_energy_score_training(self, tiny_network, linear_splits):
        _, history = train(
            tiny_network, _train_cfg(score=ScoreKind.ENERGY, max_epochs=2), _reg(), linear_splits[:2]
        )
        assert all(np.isfinite(record.val_score) for record in history.epochs)

    def test_non_finite_loss_names_batch(self, tiny_network, linear_splits, monkeypatch):
        monkeypatch.setattr(training, "objective", lambda theta, *args: (theta * np.nan).sum())
        with pytest.raises(NumericalFailureError) as excinfo:
            train(tiny_network, _train_cfg(), _reg(), linear_splits[:2])
        assert excinfo.value.batch_index == 0
        assert excinfo.value.details["batch_index"] == 0

    def test_rejects_mismatched_network(self, linear_splits):
        wrong = NetworkConfig(input_dim=3, output_dim=2, components=1, hidden_widths=[4])
        with pytest.raises(ContractViolationError):
            train(wrong, _train_cfg(), _reg(), linear_splits[:2])


def test_monitored_preranks():
    reg = _reg(prerank=PreRankSpec(kind="copula"), composition=Composition.PCA_PLUS)
    assert [spec.label for spec in monitored_preranks(reg)] == ["copula", "pca"]
    reg = _reg(prerank=PreRankSpec(kind="marginal"), composition=Composition.MARGINAL_PLUS)
    assert [spec.label for spec in monitored_preranks(reg)] == ["marginal"]


class TestSelectLambda:
    def _record(self, lam, pce, within=True):
        return LambdaRecord(lam=lam, val_pce=pce, val_energy=1.0, val_nll=1.0, within_budget=within)

    def test_smallest_pce_within_budget(self):
        records = [self._record(0.0, 0.10), self._record(1.0, 0.05), self._record(10.0, 0.01, False)]
        assert select_lambda(records) == 1.0

    def test_ties_prefer_smaller_lambda(self):
        records = [self._record(0.0, 0.05), self._record(0.1, 0.05), self._record(1.0, 0.05)]
        assert select_lambda(records) == 0.0

    def test_nothing_within_budget(self):
        assert select_lambda([self._record(5.0, 0.01, False)]) == 0.0


class TestTuneLambda:
    def _fixed_train(self, network, train_cfg, reg, splits):
        return init_weights(network, 0), None

    def test_grid_of_zero(self, tiny_network, linear_splits):
        report = tune_lambda(
            [0.0], tiny_network, _train_cfg(), _reg(), linear_splits[:2], train_fn=self._fixed_train
        )
        assert report.selected_lambda == 0.0
        assert report.degenerate_grid is True
        assert report.energy_budget == pytest.approx(1.1 * report.reference_energy)

    def test_identical_models_select_zero(self, tiny_network, linear_splits):
        report = tune_lambda(
            [1.0, 0.0, 0.1],
            tiny_network,
            _train_cfg(),
            _reg(),
            linear_splits[:2],
            train_fn=self._fixed_train,
        )
        assert [record.lam for record in report.records] == [0.0, 0.1, 1.0]
        assert all(record.within_budget for record in report.records)
        assert report.selected_lambda == 0.0
        assert report.degenerate_grid is False

    def test_grid_must_contain_zero(self, tiny_network, linear_splits):
        with pytest.raises(ContractViolationError):
            tune_lambda([0.1, 1.0], tiny_network, _train_cfg(), _reg(), linear_splits[:2])
