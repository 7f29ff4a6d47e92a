"""
Test-split calibration reports.

A report evaluates one predictor on one dataset slice across a list of
pre-ranks. Marginal and PCA pre-ranks without an index are families whose PCE
is averaged over all components; their null distribution averages the same
number of independent uniform-batch PCEs.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
from numpy.typing import NDArray

from src.calibration.distributions import MixtureParams
from src.calibration.metrics import (
    NullDistribution,
    QuantileGrid,
    empirical_cdf,
    holm_correct,
    null_pce_distribution,
    p_value,
    pce,
)
from src.calibration.pit import PitBatch, PitMode, Predictor, draw_row_samples, family_pits
from src.calibration.scoring import score_dataset
from src.shared.errors import ContractViolationError, UndefinedMetricError
from src.shared.logging import get_logger
from src.shared.validation.schemas import (
    ALL_PRERANK_KINDS,
    CalibrationReport,
    PreRankKind,
    PreRankReport,
    PreRankSpec,
)

logger = get_logger(__name__)

Array = NDArray[np.float64]


@dataclass(frozen=True)
class FamilyResult:
    """Hard-PIT calibration of one pre-rank or one averaged family."""

    spec: PreRankSpec
    batches: List[PitBatch]
    component_pces: List[float]

    @property
    def pce(self) -> float:
        return float(np.mean(self.component_pces))

    def reliability(self, grid: QuantileGrid) -> List[tuple]:
        cdf = np.mean([empirical_cdf(batch, grid) for batch in self.batches], axis=0)
        return [(float(a), float(f)) for a, f in zip(grid.levels, cdf)]


def default_preranks(output_dim: int) -> List[PreRankSpec]:
    """All seven pre-ranks, marginal and PCA as averaged families; dependency needs D >= 2."""
    specs = []
    for kind in ALL_PRERANK_KINDS:
        if kind is PreRankKind.DEPENDENCY and output_dim < 2:
            logger.warning("prerank_skipped", prerank=kind.value, output_dim=output_dim)
            continue
        specs.append(PreRankSpec(kind=kind))
    return specs


def family_pce(
    spec: PreRankSpec,
    mixture: MixtureParams,
    targets: np.ndarray,
    samples: np.ndarray,
    grid: QuantileGrid,
    tau: float,
    threads: Optional[int] = None,
) -> FamilyResult:
    batches = family_pits(spec, mixture, targets, samples, PitMode.HARD, tau, threads)
    return FamilyResult(spec, batches, [pce(batch, grid) for batch in batches])


@dataclass(frozen=True)
class Evaluation:
    """A report together with the PIT batches it was computed from."""

    report: CalibrationReport
    results: List[FamilyResult]

    def pit_columns(self) -> Dict[str, Array]:
        columns: Dict[str, Array] = {}
        for result in self.results:
            for batch in result.batches:
                columns.setdefault(batch.prerank.label, batch.pit_values)
        return columns


def run_evaluation(
    predictor: Predictor,
    features: np.ndarray,
    targets: np.ndarray,
    preranks: Optional[Sequence[PreRankSpec]] = None,
    *,
    sample_count: int = 100,
    grid_size: int = 100,
    tau: float = 100.0,
    seed: int = 0,
    n_sims: int = 0,
    energy_samples: int = 100,
    threads: Optional[int] = None,
    units: str = "standardized",
) -> Evaluation:
    """
    PCE, reliability data and proper scores of ``predictor`` on one slice.

    With ``n_sims > 0`` each pre-rank also gets a one-sided p-value against its
    matched null distribution, Holm-adjusted across the pre-ranks of the report.
    """
    n_test = targets.shape[0]
    if n_test == 0:
        raise UndefinedMetricError("Evaluation needs at least one test row")
    if features.shape[0] != n_test:
        raise ContractViolationError("Features and targets disagree on row count")
    output_dim = targets.shape[1]
    specs = list(preranks) if preranks else default_preranks(output_dim)
    for spec in specs:
        spec.validate_for(output_dim)

    grid = QuantileGrid.uniform(grid_size)
    mixture = predictor(features)
    samples = draw_row_samples(mixture, sample_count, seed, threads)
    results = [family_pce(spec, mixture, targets, samples, grid, tau, threads) for spec in specs]

    nulls: Dict[int, NullDistribution] = {}
    if n_sims > 0:
        for result in results:
            members = len(result.batches)
            if members not in nulls:
                nulls[members] = null_pce_distribution(
                    n_test, grid, n_sims, seed, components=members, threads=threads
                )
    p_values = [p_value(r.pce, nulls[len(r.batches)]) for r in results] if nulls else []
    adjusted = holm_correct(p_values) if p_values else []

    entries = []
    for position, result in enumerate(results):
        null = nulls.get(len(result.batches))
        entries.append(
            PreRankReport(
                prerank=result.spec.label,
                pce=result.pce,
                p_value=p_values[position] if p_values else None,
                holm_p=float(adjusted[position]) if p_values else None,
                reliability=result.reliability(grid),
                components=result.component_pces if result.spec.is_family else None,
                null_mean=null.mean if null else None,
                null_q95=null.quantile(0.95) if null else None,
            )
        )

    reuse = samples if energy_samples == sample_count else None
    scores = score_dataset(mixture, targets, energy_samples, seed, threads, reuse)
    logger.info(
        "evaluation_completed",
        n_test=n_test,
        preranks=[entry.prerank for entry in entries],
        nll=scores.nll,
        energy_score=scores.energy,
    )
    report = CalibrationReport(
        preranks=entries,
        nll=scores.nll,
        energy_score=scores.energy,
        n_test=n_test,
        sample_count=sample_count,
        grid_size=grid_size,
        units=units,
        seed=seed,
    )
    return Evaluation(report, results)


def evaluate_model(
    predictor: Predictor,
    features: np.ndarray,
    targets: np.ndarray,
    preranks: Optional[Sequence[PreRankSpec]] = None,
    **options: Any,
) -> CalibrationReport:
    """Calibration report only; see ``run_evaluation`` for the options."""
    return run_evaluation(predictor, features, targets, preranks, **options).report
