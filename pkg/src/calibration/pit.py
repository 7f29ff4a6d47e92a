"""
Projected probability integral transforms.

For an outcome y with predictive samples Y_1..Y_S, the projected PIT is the
empirical CDF of T_s = rho(x, Y_s) evaluated at T = rho(x, y). Training uses a
sigmoid-smoothed CDF; evaluation counts samples with T_s <= T.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Callable, List, Optional, Union

import numpy as np
from numpy.typing import NDArray

from src.calibration.autodiff import Tensor, as_tensor, no_grad
from src.calibration.distributions import (
    ArrayOrTensor,
    MixtureParams,
    batched_pca,
    draw_noise,
    reparametrized_samples,
)
from src.calibration.preranks import (
    ProjectionContext,
    expand_family,
    project,
    project_samples,
    project_values,
)
from src.shared.errors import ContractViolationError
from src.shared.logging import get_logger
from src.shared.parallel import run_chunks
from src.shared.validation.schemas import PreRankKind, PreRankSpec

logger = get_logger(__name__)

Array = NDArray[np.float64]
Predictor = Callable[[np.ndarray], MixtureParams]
Transform = Callable[[np.ndarray], np.ndarray]

ROW_CHUNK = 64


class PitMode(str, Enum):
    SMOOTH = "smooth"
    HARD = "hard"


@dataclass(frozen=True)
class PitBatch:
    """PIT values of a dataset slice for one pre-rank."""

    pit_values: Array
    mode: PitMode
    prerank: PreRankSpec
    sample_count: int
    tau: Optional[float] = None

    def __post_init__(self) -> None:
        values = self.pit_values
        if values.ndim != 1:
            raise ContractViolationError("PIT values must be a vector")
        if np.any((values < 0.0) | (values > 1.0)):
            raise ContractViolationError("PIT values must lie in [0, 1]")
        if self.mode is PitMode.HARD and values.size:
            scaled = values * self.sample_count
            if np.any(np.abs(scaled - np.round(scaled)) > 1e-9):
                raise ContractViolationError("Hard PIT values must lie on the 1/S grid")

    def __len__(self) -> int:
        return int(self.pit_values.shape[0])


def smooth_cdf_at(values: ArrayOrTensor, t: ArrayOrTensor, tau: float) -> Tensor:
    """(1/S) sum_s sigmoid(tau (t - T_s)) with samples on the last axis of ``values``."""
    gaps = (as_tensor(t).expand_dims(-1) - as_tensor(values)) * tau
    return gaps.sigmoid().mean(axis=-1)


def hard_cdf_at(values: np.ndarray, t: np.ndarray) -> Array:
    """(1/S) |{s : T_s <= t}|, ties counted as covered."""
    count = values.shape[-1]
    return np.count_nonzero(values <= np.asarray(t)[..., None], axis=-1) / count


def smooth_ecdf(values: np.ndarray, t: float, tau: float) -> float:
    """Smoothed empirical CDF of ``values`` at ``t``."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 1 or values.size < 1:
        raise ContractViolationError("smooth_ecdf needs at least one value")
    if tau <= 0.0:
        raise ContractViolationError("Temperature must be positive")
    with no_grad():
        return float(smooth_cdf_at(values, np.float64(t), tau).data)


def projected_pit(
    spec: PreRankSpec,
    ctx: ProjectionContext,
    y: np.ndarray,
    mode: Union[PitMode, str],
    tau: Optional[float] = None,
    transform: Optional[Transform] = None,
) -> float:
    """
    Z = F_{T|X}(T) for one outcome.

    ``transform``, when given, is post-composed with the pre-rank and applied
    identically to T and every T_s.
    """
    mode = PitMode(mode)
    if ctx.samples is None:
        raise ContractViolationError("Projected PIT needs a SampleSet in the context")
    t = np.array([project(spec, ctx, y)])
    t_hat = project_samples(spec, ctx, ctx.samples)
    if transform is not None:
        t, t_hat = transform(t), transform(t_hat)
    if mode is PitMode.HARD:
        return float(hard_cdf_at(t_hat, t[0]))
    temperature = tau if tau is not None else ctx.tau
    if temperature is None:
        raise ContractViolationError("Smooth PITs need a temperature")
    return smooth_ecdf(t_hat, float(t[0]), temperature)


def row_seed(seed: int, row: int) -> np.random.SeedSequence:
    """Independent stream for one dataset row, fixed by (seed, row)."""
    return np.random.SeedSequence(entropy=seed, spawn_key=(row,))


def draw_row_samples(
    mixture: MixtureParams,
    count: int,
    seed: int,
    threads: Optional[int] = None,
) -> Array:
    """(N, S, D) predictive samples, row i drawn from its own split seed."""
    if count < 1:
        raise ContractViolationError("Sample count must be at least 1")
    mixture = mixture.detach()
    n_rows = mixture.batch_shape[0]
    D = mixture.output_dim
    weights = np.asarray(mixture.weights)

    def work(_: int, rows: range) -> Array:
        indices = np.empty((len(rows), count), dtype=np.int64)
        noise = np.empty((len(rows), count, D))
        for offset, row in enumerate(rows):
            rng = np.random.default_rng(row_seed(seed, row))
            idx, z = draw_noise(rng, weights[row][None], count, D)
            indices[offset], noise[offset] = idx[0], z[0]
        with no_grad():
            return reparametrized_samples(mixture.take(rows), indices, noise).data

    chunks = run_chunks(work, n_rows, ROW_CHUNK, threads)
    if not chunks:
        return np.empty((0, count, D))
    return np.concatenate(chunks, axis=0)


def pits_from_samples(
    spec: PreRankSpec,
    mixture: MixtureParams,
    targets: np.ndarray,
    samples: np.ndarray,
    mode: Union[PitMode, str],
    tau: float,
    eigenvectors: Optional[np.ndarray] = None,
    transform: Optional[Transform] = None,
    threads: Optional[int] = None,
) -> Array:
    """PIT value per row from precomputed samples (N, S, D)."""
    mode = PitMode(mode)
    spec.validate_for(targets.shape[-1])
    if spec.kind is PreRankKind.PCA and eigenvectors is None:
        eigenvectors = batched_pca(samples).eigenvectors
    mixture = mixture.detach()

    def work(_: int, rows: range) -> Array:
        index = np.arange(rows.start, rows.stop)
        arguments = {
            "mixture": mixture.take(index),
            "samples": samples[index],
            "eigenvectors": None if eigenvectors is None else eigenvectors[index],
            "tau": tau,
        }
        with no_grad():
            t = project_values(spec, targets[index], **arguments).data
            t_hat = project_values(spec, samples[index], **arguments).data
        if transform is not None:
            t, t_hat = transform(t), transform(t_hat)
        if mode is PitMode.HARD:
            return hard_cdf_at(t_hat, t)
        with no_grad():
            return smooth_cdf_at(t_hat, t, tau).data

    chunks = run_chunks(work, targets.shape[0], ROW_CHUNK, threads)
    return np.concatenate(chunks) if chunks else np.empty(0)


def pit_batch(
    spec: PreRankSpec,
    model: Predictor,
    features: np.ndarray,
    targets: np.ndarray,
    sample_count: int,
    tau: float,
    mode: Union[PitMode, str],
    seed: int,
    threads: Optional[int] = None,
) -> PitBatch:
    """
    Projected PITs for every row of a dataset slice.

    Each row gets its own SampleSet from a seed split on the row index, so the
    result does not depend on how rows are distributed across workers.
    """
    mode = PitMode(mode)
    if spec.is_family:
        raise ContractViolationError(f"pit_batch needs a single projection, got family {spec.label}")
    if features.shape[0] != targets.shape[0]:
        raise ContractViolationError("Features and targets disagree on row count")
    if targets.shape[0] == 0:
        return PitBatch(np.empty(0), mode, spec, sample_count, tau)
    mixture = model(features)
    if mixture.output_dim != targets.shape[1]:
        raise ContractViolationError("Model output dimension does not match targets")
    samples = draw_row_samples(mixture, sample_count, seed, threads)
    values = pits_from_samples(spec, mixture, targets, samples, mode, tau, threads=threads)
    logger.debug("pit_batch_computed", prerank=spec.label, rows=len(values), mode=mode.value)
    return PitBatch(values, mode, spec, sample_count, tau)


def family_pits(
    spec: PreRankSpec,
    mixture: MixtureParams,
    targets: np.ndarray,
    samples: np.ndarray,
    mode: Union[PitMode, str],
    tau: float,
    threads: Optional[int] = None,
) -> List[PitBatch]:
    """PIT batches for each member of a (possibly single-member) pre-rank family."""
    eigenvectors = batched_pca(samples).eigenvectors if spec.kind is PreRankKind.PCA else None
    batches = []
    for member in expand_family(spec, targets.shape[1]):
        values = pits_from_samples(
            member, mixture, targets, samples, mode, tau, eigenvectors, threads=threads
        )
        batches.append(PitBatch(values, PitMode(mode), member, samples.shape[1], tau))
    return batches
