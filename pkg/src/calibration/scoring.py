"""Proper scoring rules: exact mixture NLL and the sample energy score."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
from numpy.typing import NDArray

from src.calibration.autodiff import Tensor, as_tensor, no_grad
from src.calibration.distributions import (
    ArrayOrTensor,
    MixtureParams,
    SampleSet,
    log_density,
    mixture_log_prob,
)
from src.calibration.pit import ROW_CHUNK, draw_row_samples
from src.shared.errors import ContractViolationError, UndefinedMetricError
from src.shared.parallel import run_chunks

Array = NDArray[np.float64]


@dataclass(frozen=True)
class ScoreValue:
    nll: float
    energy: float


def nll(params: MixtureParams, y: np.ndarray) -> float:
    """Negative log predictive density of one outcome."""
    return -float(log_density(params, y))


def energy_score(samples: Union[SampleSet, np.ndarray], y: np.ndarray) -> float:
    """
    (1/G) sum_i ||Y_i - y|| - 1/(2 G^2) sum_i sum_j ||Y_i - Y_j||.

    The double sum is evaluated exactly, diagonal terms included.
    """
    values = samples.samples if isinstance(samples, SampleSet) else np.asarray(samples, dtype=np.float64)
    y_arr = np.asarray(y, dtype=np.float64)
    if values.ndim != 2 or values.shape[0] < 1:
        raise ContractViolationError("Energy score needs at least one sample")
    if y_arr.shape != (values.shape[1],):
        raise ContractViolationError("Observation and samples disagree on dimension")
    with no_grad():
        return float(sample_energy(values[None], y_arr[None]).data[0])


def sample_energy(samples: ArrayOrTensor, targets: ArrayOrTensor) -> Tensor:
    """Per-row energy score for samples (B, G, D) and targets (B, D)."""
    pool = as_tensor(samples)
    count = pool.shape[-2]
    accuracy = (pool - as_tensor(targets).expand_dims(-2)).norm(axis=-1).mean(axis=-1)
    pairwise = (pool.expand_dims(-2) - pool.expand_dims(-3)).norm(axis=-1)
    spread = pairwise.sum(axis=(-2, -1)) / (2.0 * count * count)
    return accuracy - spread


def batch_nll(params: MixtureParams, targets: ArrayOrTensor) -> Tensor:
    """Mean NLL over a batched mixture, as a differentiable scalar."""
    return -mixture_log_prob(params, targets).mean()


def batch_energy(samples: ArrayOrTensor, targets: ArrayOrTensor) -> Tensor:
    """Mean energy score over rows, as a differentiable scalar."""
    return sample_energy(samples, targets).mean()


def nll_per_row(params: MixtureParams, targets: np.ndarray) -> Array:
    with no_grad():
        return -mixture_log_prob(params.detach(), targets).data


def energy_per_row(
    params: MixtureParams,
    targets: np.ndarray,
    count: int,
    seed: int,
    threads: Optional[int] = None,
    samples: Optional[np.ndarray] = None,
) -> Array:
    """Energy score of every row from per-row seeded samples (or given ones)."""
    if samples is None:
        samples = draw_row_samples(params, count, seed, threads)

    def work(_: int, rows: range) -> Array:
        index = np.arange(rows.start, rows.stop)
        with no_grad():
            return sample_energy(samples[index], targets[index]).data

    chunks = run_chunks(work, targets.shape[0], ROW_CHUNK, threads)
    return np.concatenate(chunks) if chunks else np.empty(0)


def score_dataset(
    params: MixtureParams,
    targets: np.ndarray,
    count: int,
    seed: int,
    threads: Optional[int] = None,
    samples: Optional[np.ndarray] = None,
) -> ScoreValue:
    """Mean NLL and mean energy score over a dataset slice."""
    if targets.shape[0] == 0:
        raise UndefinedMetricError("Scores are undefined on an empty dataset")
    nll_values = nll_per_row(params, targets)
    energy_values = energy_per_row(params, targets, count, seed, threads, samples)
    return ScoreValue(float(nll_values.mean()), float(energy_values.mean()))
