"""
Calibration metrics over PIT values.

PCE is the mean absolute gap between quantile levels and the empirical CDF of
the PITs; PCE-KDE is its sigmoid-smoothed, differentiable counterpart. Null
distributions of PCE under perfect calibration are simulated from uniform PITs
and turned into one-sided p-values with Holm adjustment across a family.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.typing import NDArray
from statsmodels.stats.multitest import multipletests

from src.calibration.autodiff import Tensor, as_tensor
from src.calibration.pit import PitBatch
from src.shared.errors import ContractViolationError, UndefinedMetricError
from src.shared.logging import get_logger
from src.shared.parallel import run_chunks

logger = get_logger(__name__)

Array = NDArray[np.float64]
PitLike = Union[PitBatch, np.ndarray, Sequence[float]]

# uniform draws per simulation chunk
_NULL_CHUNK_BUDGET = 1 << 20
# keeps null streams apart from the per-row sample streams
_NULL_STREAM = 1


@dataclass(frozen=True)
class QuantileGrid:
    """Interior quantile levels alpha_j = j / (M + 1)."""

    levels: Array

    def __post_init__(self) -> None:
        levels = self.levels
        if levels.ndim != 1 or levels.size < 1:
            raise ContractViolationError("Quantile grid needs at least one level")
        if np.any(np.diff(levels) <= 0.0) or levels[0] <= 0.0 or levels[-1] >= 1.0:
            raise ContractViolationError("Quantile levels must increase strictly inside (0, 1)")

    @classmethod
    def uniform(cls, size: int = 100) -> "QuantileGrid":
        if size < 1:
            raise ContractViolationError("Grid size must be positive")
        return cls(np.arange(1, size + 1, dtype=np.float64) / (size + 1))

    @property
    def size(self) -> int:
        return int(self.levels.size)


@dataclass(frozen=True)
class NullDistribution:
    """Simulated PCE statistics under uniform PITs."""

    n_test: int
    statistics: Array
    grid_size: int
    runs: int = 1
    components: int = 1
    seed: int = 0
    prerank: Optional[str] = None

    @property
    def n_sims(self) -> int:
        return int(self.statistics.size)

    @property
    def mean(self) -> float:
        return float(self.statistics.mean())

    @property
    def median(self) -> float:
        return float(np.median(self.statistics))

    def quantile(self, q: float) -> float:
        return float(np.quantile(self.statistics, q))


def _pit_values(pits: PitLike) -> Array:
    values = pits.pit_values if isinstance(pits, PitBatch) else np.asarray(pits, dtype=np.float64)
    if values.size == 0:
        raise UndefinedMetricError("Calibration metrics are undefined on an empty PIT batch")
    return values.reshape(-1)


def empirical_cdf(pits: PitLike, grid: QuantileGrid) -> Array:
    """F_Z(alpha_j) = (1/N) |{i : Z_i <= alpha_j}| for every level."""
    values = np.sort(_pit_values(pits))
    return np.searchsorted(values, grid.levels, side="right") / values.size


def pce(pits: PitLike, grid: QuantileGrid) -> float:
    """Probabilistic calibration error of a PIT batch."""
    cdf = empirical_cdf(pits, grid)
    return float(np.mean(np.abs(grid.levels - cdf)))


def reliability_curve(pits: PitLike, grid: QuantileGrid) -> List[Tuple[float, float]]:
    """(alpha_j, F_Z(alpha_j)) pairs; nondecreasing in alpha."""
    cdf = empirical_cdf(pits, grid)
    return [(float(a), float(f)) for a, f in zip(grid.levels, cdf)]


def pce_kde(
    pits: Union[PitBatch, Tensor, np.ndarray],
    grid: QuantileGrid,
    tau: float,
    p: float = 1.0,
) -> Tensor:
    """
    (1/M) sum_j |alpha_j - Phi(alpha_j)|^p with Phi the logistic-kernel CDF of the PITs.

    Differentiable in the PIT values; for p = 1 the subgradient at a zero gap is 0.
    """
    if p < 1.0:
        raise ContractViolationError("Penalty exponent p must be >= 1")
    if tau <= 0.0:
        raise ContractViolationError("Temperature must be positive")
    z = as_tensor(pits.pit_values if isinstance(pits, PitBatch) else pits)
    if z.data.size == 0:
        raise UndefinedMetricError("PCE-KDE is undefined on an empty PIT batch")
    z = z.reshape(-1)
    smoothed = ((grid.levels[None, :] - z.expand_dims(-1)) * tau).sigmoid().mean(axis=0)
    gap = (smoothed - grid.levels).abs()
    if p != 1.0:
        gap = gap**p
    return gap.mean()


def batched_pce(pits: np.ndarray, levels: np.ndarray) -> Array:
    """PCE of every row of a (C, N) array of PIT values."""
    count, n = pits.shape
    M = levels.size
    # Z <= alpha_j  iff  j >= number of levels strictly below Z
    bins = np.searchsorted(levels, pits, side="left")
    offsets = bins + (M + 1) * np.arange(count)[:, None]
    counts = np.bincount(offsets.ravel(), minlength=count * (M + 1)).reshape(count, M + 1)
    cdf = np.cumsum(counts, axis=1)[:, :M] / n
    return np.abs(levels[None, :] - cdf).mean(axis=1)


def null_pce_distribution(
    n_test: int,
    grid: QuantileGrid,
    n_sims: int,
    seed: int,
    runs: int = 1,
    components: int = 1,
    threads: Optional[int] = None,
) -> NullDistribution:
    """
    Simulate PCE under perfect calibration.

    Each statistic averages ``runs * components`` independent PCEs of
    ``n_test`` uniform PITs (runs=1, components=1 is the single-batch PCE).
    """
    if n_test < 1:
        raise ContractViolationError("Null distribution needs n_test >= 1")
    if n_sims < 1 or runs < 1 or components < 1:
        raise ContractViolationError("n_sims, runs and components must be positive")
    per_stat = runs * components
    chunk = max(1, _NULL_CHUNK_BUDGET // (n_test * per_stat))

    def work(index: int, sims: range) -> Array:
        stream = np.random.SeedSequence(entropy=seed, spawn_key=(_NULL_STREAM, index))
        rng = np.random.default_rng(stream)
        uniforms = rng.random((len(sims) * per_stat, n_test))
        values = batched_pce(uniforms, grid.levels)
        return values.reshape(len(sims), per_stat).mean(axis=1)

    statistics = np.concatenate(run_chunks(work, n_sims, chunk, threads))
    logger.debug(
        "null_distribution_simulated",
        n_test=n_test,
        n_sims=n_sims,
        runs=runs,
        components=components,
    )
    return NullDistribution(n_test, statistics, grid.size, runs, components, seed)


def p_value(observed_pce: float, null: NullDistribution) -> float:
    """One-sided p-value with add-one smoothing, so p > 0."""
    exceed = int(np.count_nonzero(null.statistics >= observed_pce))
    return (1.0 + exceed) / (1.0 + null.n_sims)


def holm_correct(p_values: Sequence[float]) -> Array:
    """Holm step-down adjustment, returned in input order."""
    values = np.asarray(p_values, dtype=np.float64)
    if values.size == 0:
        return values
    if np.any((values < 0.0) | (values > 1.0)):
        raise ContractViolationError("p-values must lie in [0, 1]")
    _, adjusted, _, _ = multipletests(values, method="holm")
    return np.asarray(adjusted, dtype=np.float64)
