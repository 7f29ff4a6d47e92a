"""
Regularized training of the mixture hypernetwork.

The objective is the mean proper score over a mini-batch plus lambda times the
PCE-KDE regularizer of smooth projected PITs. PITs come from reparametrized
predictive samples, so the regularizer gradient reaches the component means and
Cholesky factors; component choices and PCA bases are constants.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from numpy.typing import NDArray

from src.calibration.autodiff import Tensor, as_tensor, grad, no_grad, value_and_grad
from src.calibration.data import Dataset
from src.calibration.distributions import (
    MixtureParams,
    batched_pca,
    categorical_draw,
    pooled_pca,
    reparametrized_samples,
)
from src.calibration.evaluation import family_pce
from src.calibration.metrics import QuantileGrid, pce_kde
from src.calibration.model import ModelWeights, forward, init_weights
from src.calibration.pit import PitMode, draw_row_samples, pits_from_samples, smooth_cdf_at
from src.calibration.preranks import expand_family, project_values, top_components
from src.calibration.scoring import batch_energy, batch_nll, energy_per_row, nll_per_row
from src.shared.errors import ContractViolationError, NumericalFailureError
from src.shared.logging import get_logger
from src.shared.validation.schemas import (
    Composition,
    EpochRecord,
    LambdaRecord,
    NetworkConfig,
    PreRankKind,
    PreRankSpec,
    RegularizerConfig,
    ScoreKind,
    TrainConfig,
    TrainHistory,
    TuningReport,
)

__all__ = [
    "Adam",
    "NoiseSource",
    "grad",
    "objective",
    "regularizer_terms",
    "select_lambda",
    "train",
    "tune_lambda",
    "value_and_grad",
]

logger = get_logger(__name__)

Array = NDArray[np.float64]
Splits = Tuple[Dataset, Dataset]
TrainFn = Callable[[NetworkConfig, TrainConfig, RegularizerConfig, Splits], Tuple[ModelWeights, TrainHistory]]

ENERGY_BUDGET_RATIO = 1.1
# seed stream tags
_FIXED_NOISE, _STEP_NOISE, _SHUFFLE = 0, 1, 2


class Adam:
    """First-order adaptive moment estimation over a flat parameter vector."""

    def __init__(
        self,
        learning_rate: float = 1e-4,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.steps = 0
        self._m: Optional[Array] = None
        self._v: Optional[Array] = None

    def step(self, theta: np.ndarray, gradient: np.ndarray) -> Array:
        if self._m is None or self._v is None:
            self._m = np.zeros_like(theta)
            self._v = np.zeros_like(theta)
        self.steps += 1
        self._m = self.beta1 * self._m + (1.0 - self.beta1) * gradient
        self._v = self.beta2 * self._v + (1.0 - self.beta2) * gradient * gradient
        m_hat = self._m / (1.0 - self.beta1**self.steps)
        v_hat = self._v / (1.0 - self.beta2**self.steps)
        return theta - self.learning_rate * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass
class NoiseSource:
    """
    Uniforms (for component choice) and standard normals per dataset row.

    Fresh draws are keyed on the step; with ``fixed`` each row keeps the same
    draws for the whole run.
    """

    seed: int
    count: int
    output_dim: int
    fixed: bool = False
    _cache: Dict[int, Tuple[Array, Array]] = field(default_factory=dict, repr=False)

    def draw(self, rows: np.ndarray, step: int) -> Tuple[Array, Array]:
        if not self.fixed:
            stream = np.random.SeedSequence(entropy=self.seed, spawn_key=(_STEP_NOISE, step))
            rng = np.random.default_rng(stream)
            uniforms = rng.random((rows.size, self.count))
            return uniforms, rng.standard_normal((rows.size, self.count, self.output_dim))
        uniforms = np.empty((rows.size, self.count))
        normals = np.empty((rows.size, self.count, self.output_dim))
        for offset, row in enumerate(rows):
            key = int(row)
            if key not in self._cache:
                stream = np.random.SeedSequence(entropy=self.seed, spawn_key=(_FIXED_NOISE, key))
                rng = np.random.default_rng(stream)
                self._cache[key] = (
                    rng.random(self.count),
                    rng.standard_normal((self.count, self.output_dim)),
                )
            uniforms[offset], normals[offset] = self._cache[key]
        return uniforms, normals


def noise_count(train: TrainConfig, reg: RegularizerConfig) -> int:
    needed = reg.samples if reg.lam > 0.0 else 0
    if train.score is ScoreKind.ENERGY:
        needed = max(needed, train.energy_samples)
    return max(needed, 1)


def regularizer_terms(
    reg: RegularizerConfig, output_dim: int, samples: Optional[np.ndarray] = None
) -> List[Tuple[PreRankSpec, float]]:
    """
    Weighted projections making up the composed regularizer.

    plain: the pre-rank (families averaged over all components);
    marginal_plus: mean over the D marginals plus the pre-rank;
    pca_plus: mean over the first d* principal components plus the pre-rank,
    with d* taken from the pooled covariance of ``samples``.
    """
    spec = reg.prerank
    spec.validate_for(output_dim)
    base = expand_family(spec, output_dim)
    terms = [(member, 1.0 / len(base)) for member in base]
    if reg.composition is Composition.MARGINAL_PLUS:
        marginals = expand_family(PreRankSpec(kind=PreRankKind.MARGINAL), output_dim)
        terms += [(member, 1.0 / output_dim) for member in marginals]
    elif reg.composition is Composition.PCA_PLUS:
        if samples is None:
            raise ContractViolationError("pca_plus composition needs predictive samples")
        d_star = top_components(pooled_pca(samples), reg.pca_threshold)
        components = expand_family(PreRankSpec(kind=PreRankKind.PCA), output_dim, d_star)
        terms += [(member, 1.0 / d_star) for member in components]
    return terms


def _needs_basis(terms: Sequence[Tuple[PreRankSpec, float]]) -> bool:
    return any(spec.kind is PreRankKind.PCA for spec, _ in terms)


def regularizer(
    mixture: MixtureParams,
    targets: np.ndarray,
    samples: Tensor,
    reg: RegularizerConfig,
    grid: QuantileGrid,
    eigenvectors: Optional[np.ndarray] = None,
) -> Tensor:
    """
    Composed PCE-KDE penalty from smooth PITs of one shared sample set per row.

    The per-row PCA basis is a constant of the graph; pass ``eigenvectors``
    (B, D, D) to pin it instead of taking it from the current samples.
    """
    constant = samples.data
    terms = regularizer_terms(reg, targets.shape[1], constant)
    if eigenvectors is None and _needs_basis(terms):
        eigenvectors = batched_pca(constant).eigenvectors
    total: Optional[Tensor] = None
    for spec, weight in terms:
        arguments = {
            "mixture": mixture,
            "samples": samples,
            "eigenvectors": eigenvectors,
            "tau": reg.temperature,
        }
        observed = project_values(spec, targets, **arguments)
        projected = project_values(spec, samples, **arguments)
        pits = smooth_cdf_at(projected, observed, reg.temperature)
        term = pce_kde(pits, grid, reg.temperature, reg.p) * weight
        total = term if total is None else total + term
    assert total is not None
    return total


def objective(
    theta: Tensor | np.ndarray,
    network: NetworkConfig,
    features: np.ndarray,
    targets: np.ndarray,
    reg: RegularizerConfig,
    score: ScoreKind,
    noise: Tuple[np.ndarray, np.ndarray],
    energy_samples: int = 100,
    grid: Optional[QuantileGrid] = None,
    eigenvectors: Optional[np.ndarray] = None,
) -> Tensor:
    """
    Mean score plus lambda times the composed regularizer on one batch.

    ``noise`` holds uniforms (B, S) and normals (B, S, D); the first
    ``reg.samples`` draws feed the regularizer and the first ``energy_samples``
    the energy score. With lambda = 0 the result is the mean score alone.
    """
    if targets.shape[0] == 0:
        raise ContractViolationError("Objective needs a nonempty batch")
    mixture = forward(as_tensor(theta), network, features)
    uniforms, normals = noise
    samples: Optional[Tensor] = None
    if reg.lam > 0.0 or score is ScoreKind.ENERGY:
        indices = categorical_draw(mixture.weights.data, uniforms)
        samples = reparametrized_samples(mixture, indices, normals)

    if score is ScoreKind.NLL:
        score_term = batch_nll(mixture, targets)
    else:
        assert samples is not None
        score_term = batch_energy(samples[:, :energy_samples], targets)
    if reg.lam == 0.0:
        return score_term
    assert samples is not None
    penalty = regularizer(
        mixture,
        targets,
        samples[:, : reg.samples],
        reg,
        grid or QuantileGrid.uniform(reg.grid_size),
        eigenvectors,
    )
    return score_term + reg.lam * penalty


@dataclass(frozen=True)
class ValidationSummary:
    score: float
    objective: float
    nll: float
    energy: float
    pce: Dict[str, float]


def monitored_preranks(reg: RegularizerConfig) -> List[PreRankSpec]:
    """Pre-ranks whose hard validation PCE is tracked per epoch."""
    specs = [reg.prerank]
    if reg.composition is Composition.MARGINAL_PLUS:
        specs.append(PreRankSpec(kind=PreRankKind.MARGINAL))
    elif reg.composition is Composition.PCA_PLUS:
        specs.append(PreRankSpec(kind=PreRankKind.PCA))
    unique: Dict[str, PreRankSpec] = {spec.label: spec for spec in specs}
    return list(unique.values())


def validate(
    weights: ModelWeights,
    dataset: Dataset,
    train_cfg: TrainConfig,
    reg: RegularizerConfig,
    threads: Optional[int] = None,
) -> ValidationSummary:
    """
    Validation score, objective and hard PCE with draws fixed by the run seed.

    The regularizer is evaluated on smooth PITs of the whole slice.
    """
    if dataset.n_rows == 0:
        raise ContractViolationError("Validation split is empty")
    grid = QuantileGrid.uniform(reg.grid_size)
    targets = dataset.targets
    with no_grad():
        mixture = forward(weights, weights.config, dataset.features)
    nll = float(nll_per_row(mixture, targets).mean())
    energy_draws = draw_row_samples(mixture, train_cfg.energy_samples, train_cfg.seed, threads)
    energy = float(energy_per_row(mixture, targets, 0, 0, threads, energy_draws).mean())
    score = nll if train_cfg.score is ScoreKind.NLL else energy

    samples = draw_row_samples(mixture, reg.samples, train_cfg.seed, threads)
    value = score
    if reg.lam > 0.0:
        terms = regularizer_terms(reg, targets.shape[1], samples)
        eigenvectors = batched_pca(samples).eigenvectors if _needs_basis(terms) else None
        penalty = 0.0
        for spec, weight in terms:
            pits = pits_from_samples(
                spec,
                mixture,
                targets,
                samples,
                PitMode.SMOOTH,
                reg.temperature,
                eigenvectors,
                threads=threads,
            )
            with no_grad():
                penalty += weight * float(pce_kde(pits, grid, reg.temperature, reg.p).data)
        value = score + reg.lam * penalty

    eval_draws = draw_row_samples(mixture, train_cfg.eval_samples, train_cfg.seed, threads)
    pces = {
        spec.label: family_pce(spec, mixture, targets, eval_draws, grid, reg.temperature, threads).pce
        for spec in monitored_preranks(reg)
    }
    return ValidationSummary(score, value, nll, energy, pces)


def train(
    network: NetworkConfig,
    train_cfg: TrainConfig,
    reg: RegularizerConfig,
    splits: Splits,
    threads: Optional[int] = None,
    on_epoch: Optional[Callable[[EpochRecord], None]] = None,
) -> Tuple[ModelWeights, TrainHistory]:
    """
    Mini-batch Adam with early stopping on the validation objective.

    The returned weights are those of the best epoch. Everything is a function
    of ``train_cfg.seed``.
    """
    train_set, val_set = splits[0], splits[1]
    if train_set.n_rows == 0:
        raise ContractViolationError("Training split is empty")
    if train_set.output_dim != network.output_dim or train_set.input_dim != network.input_dim:
        raise ContractViolationError("Network dimensions do not match the data")
    reg.prerank.validate_for(network.output_dim)

    weights = init_weights(network, train_cfg.seed)
    theta = weights.theta.copy()
    optimizer = Adam(train_cfg.learning_rate)
    noise = NoiseSource(
        train_cfg.seed, noise_count(train_cfg, reg), network.output_dim, train_cfg.fixed_noise
    )
    grid = QuantileGrid.uniform(reg.grid_size)
    history = TrainHistory()
    best_theta = theta.copy()
    best_value = np.inf
    stale = 0
    step = 0

    for epoch in range(1, train_cfg.max_epochs + 1):
        shuffle = np.random.SeedSequence(entropy=train_cfg.seed, spawn_key=(_SHUFFLE, epoch))
        order = np.random.default_rng(shuffle).permutation(train_set.n_rows)
        losses = []
        for batch_index, start in enumerate(range(0, order.size, train_cfg.batch_size)):
            rows = order[start : start + train_cfg.batch_size]
            draws = noise.draw(rows, step)
            features, targets = train_set.features[rows], train_set.targets[rows]

            def loss(param: Tensor) -> Tensor:
                return objective(
                    param,
                    network,
                    features,
                    targets,
                    reg,
                    train_cfg.score,
                    draws,
                    train_cfg.energy_samples,
                    grid,
                )

            value, gradient = value_and_grad(loss, theta)
            if not np.isfinite(value) or not np.all(np.isfinite(gradient)):
                logger.error("non_finite_loss", epoch=epoch, batch_index=batch_index, loss=value)
                raise NumericalFailureError(
                    f"Non-finite loss or gradient in epoch {epoch}, batch {batch_index}",
                    batch_index=batch_index,
                    details={"epoch": epoch, "loss": value},
                )
            theta = optimizer.step(theta, gradient)
            losses.append(value)
            step += 1

        summary = validate(weights.replace(theta), val_set, train_cfg, reg, threads)
        record = EpochRecord(
            epoch=epoch,
            train_loss=float(np.mean(losses)),
            val_score=summary.score,
            val_objective=summary.objective,
            val_pce=summary.pce,
        )
        history.epochs.append(record)
        if on_epoch is not None:
            on_epoch(record)
        logger.info(
            "epoch_completed",
            epoch=epoch,
            train_loss=record.train_loss,
            val_score=record.val_score,
            val_objective=record.val_objective,
        )

        if summary.objective < best_value:
            best_value = summary.objective
            best_theta = theta.copy()
            history.best_epoch = epoch
            stale = 0
        else:
            stale += 1
            if stale >= train_cfg.patience:
                logger.info("early_stopping", epoch=epoch, best_epoch=history.best_epoch)
                break

    if history.best_epoch < 0:
        raise NumericalFailureError("Validation objective never became finite")
    return weights.replace(best_theta), history


def select_lambda(records: Sequence[LambdaRecord]) -> float:
    """Smallest validation PCE among lambdas within the energy budget; ties go to the smaller lambda."""
    eligible = [record for record in records if record.within_budget]
    if not eligible:
        return 0.0
    best = min(eligible, key=lambda record: (record.val_pce, record.lam))
    return best.lam


def tune_lambda(
    grid: Sequence[float],
    network: NetworkConfig,
    train_cfg: TrainConfig,
    reg_template: RegularizerConfig,
    splits: Splits,
    threads: Optional[int] = None,
    train_fn: Optional[TrainFn] = None,
) -> TuningReport:
    """
    Train once per lambda and select under the energy-score budget.

    The reference is the validation energy score of the lambda = 0 run; a
    lambda qualifies when its validation energy score is at most 1.1 times the
    reference.
    """
    lambdas = sorted({float(lam) for lam in grid})
    if 0.0 not in lambdas:
        raise ContractViolationError("Lambda grid must contain 0")
    if any(lam < 0.0 for lam in lambdas):
        raise ContractViolationError("Lambda values must be nonnegative")
    fit = train_fn or (lambda net, cfg, reg, data: train(net, cfg, reg, data, threads))

    measured = []
    for lam in lambdas:
        reg = reg_template.model_copy(update={"lam": lam})
        weights, _ = fit(network, train_cfg, reg, splits)
        summary = validate(weights, splits[1], train_cfg, reg, threads)
        measured.append((lam, summary))
        logger.info(
            "lambda_evaluated",
            lam=lam,
            val_pce=summary.pce[reg.prerank.label],
            val_energy=summary.energy,
        )

    reference = next(summary.energy for lam, summary in measured if lam == 0.0)
    budget = ENERGY_BUDGET_RATIO * reference
    records = [
        LambdaRecord(
            lam=lam,
            val_pce=summary.pce[reg_template.prerank.label],
            val_energy=summary.energy,
            val_nll=summary.nll,
            within_budget=lam == 0.0 or summary.energy <= budget,
        )
        for lam, summary in measured
    ]
    selected = select_lambda(records)
    logger.info("lambda_selected", selected_lambda=selected, reference_energy=reference)
    return TuningReport(
        prerank=reg_template.prerank.label,
        composition=reg_template.composition,
        reference_energy=reference,
        energy_budget=budget,
        budget_ratio=ENERGY_BUDGET_RATIO,
        records=records,
        selected_lambda=selected,
        degenerate_grid=len(lambdas) == 1,
    )
