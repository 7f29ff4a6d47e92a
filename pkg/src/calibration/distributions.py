"""
Conditional Gaussian-mixture predictive distributions.

A mixture is stored through its weights, means and lower-triangular Cholesky
factors, optionally with leading batch axes (one distribution per input row).
The density code works on both numpy arrays and autodiff tensors, so the same
functions serve evaluation and training.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Tuple, Union

import numpy as np
from numpy.typing import NDArray

from src.calibration.autodiff import Tensor, as_tensor, no_grad, solve_lower_triangular
from src.shared.errors import ContractViolationError, InsufficientSamplesError

Array = NDArray[np.float64]
ArrayOrTensor = Union[np.ndarray, Tensor]

DEFAULT_CHOL_FLOOR = 1e-4
LOG_2PI = float(np.log(2.0 * np.pi))


def _data(value: ArrayOrTensor) -> np.ndarray:
    return value.data if isinstance(value, Tensor) else np.asarray(value)


@dataclass(frozen=True)
class MixtureParams:
    """
    Weights (..., K), means (..., K, D) and Cholesky factors (..., K, D, D).

    Numpy-valued instances are validated on construction; tensor-valued
    instances come from the network head, which satisfies the invariants by
    construction.
    """

    weights: ArrayOrTensor
    means: ArrayOrTensor
    chol_factors: ArrayOrTensor
    log_weights: Optional[ArrayOrTensor] = field(default=None, repr=False)
    chol_floor: float = field(default=DEFAULT_CHOL_FLOOR, repr=False)

    def __post_init__(self) -> None:
        w, m, c = _data(self.weights), _data(self.means), _data(self.chol_factors)
        if m.ndim < 2 or c.ndim != m.ndim + 1 or w.ndim != m.ndim - 1:
            raise ContractViolationError("Mixture arrays have inconsistent ranks")
        K, D = m.shape[-2], m.shape[-1]
        if w.shape[-1] != K or c.shape[-3:] != (K, D, D):
            raise ContractViolationError(
                "Mixture arrays disagree on components or dimension",
                {"weights": w.shape, "means": m.shape, "chol_factors": c.shape},
            )
        if not any(isinstance(v, Tensor) for v in (self.weights, self.means, self.chol_factors)):
            self._validate(w, c)

    def _validate(self, w: np.ndarray, c: np.ndarray) -> None:
        if np.any(w < 0.0) or np.any(np.abs(w.sum(axis=-1) - 1.0) > 1e-9):
            raise ContractViolationError("Mixture weights must be a probability vector")
        if np.any(np.triu(c, k=1) != 0.0):
            raise ContractViolationError("Cholesky factors must be lower triangular")
        diag = np.diagonal(c, axis1=-2, axis2=-1)
        if np.any(diag < self.chol_floor * (1.0 - 1e-12)):
            raise ContractViolationError(
                f"Cholesky diagonals must be >= {self.chol_floor}",
                {"min_diagonal": float(diag.min())},
            )

    @property
    def components(self) -> int:
        return int(_data(self.means).shape[-2])

    @property
    def output_dim(self) -> int:
        return int(_data(self.means).shape[-1])

    @property
    def batch_shape(self) -> Tuple[int, ...]:
        return tuple(_data(self.means).shape[:-2])

    def component_log_weights(self) -> ArrayOrTensor:
        if self.log_weights is not None:
            return self.log_weights
        if isinstance(self.weights, Tensor):
            return self.weights.log()
        with np.errstate(divide="ignore"):
            return np.log(self.weights)

    def covariances(self) -> Array:
        c = _data(self.chol_factors)
        return c @ np.swapaxes(c, -1, -2)

    def row(self, index: int) -> "MixtureParams":
        """Select one distribution from a batched mixture (numpy only)."""
        lw = None if self.log_weights is None else _data(self.log_weights)[index]
        return MixtureParams(
            _data(self.weights)[index],
            _data(self.means)[index],
            _data(self.chol_factors)[index],
            lw,
            self.chol_floor,
        )

    def take(self, rows: np.ndarray | range | slice) -> "MixtureParams":
        """Select a sub-batch of rows (numpy only)."""
        index = rows if isinstance(rows, slice) else np.asarray(rows)
        lw = None if self.log_weights is None else _data(self.log_weights)[index]
        return MixtureParams(
            _data(self.weights)[index],
            _data(self.means)[index],
            _data(self.chol_factors)[index],
            lw,
            self.chol_floor,
        )

    def insert_axis(self, position: int) -> "MixtureParams":
        """Insert a broadcast axis among the leading batch axes (e.g. for samples)."""
        if not 0 <= position <= len(self.batch_shape):
            raise ContractViolationError("Axis position must fall among the batch axes")

        def expand(value: ArrayOrTensor) -> ArrayOrTensor:
            shape = list(_data(value).shape)
            shape.insert(position, 1)
            if isinstance(value, Tensor):
                return value.reshape(tuple(shape))
            return np.asarray(value).reshape(shape)

        lw = None if self.log_weights is None else expand(self.log_weights)
        return MixtureParams(
            expand(self.weights),
            expand(self.means),
            expand(self.chol_factors),
            lw,
            self.chol_floor,
        )

    def detach(self) -> "MixtureParams":
        lw = None if self.log_weights is None else np.array(_data(self.log_weights))
        return MixtureParams(
            np.array(_data(self.weights)),
            np.array(_data(self.means)),
            np.array(_data(self.chol_factors)),
            lw,
            self.chol_floor,
        )


@dataclass(frozen=True)
class SampleSet:
    """S draws from one predictive distribution with their component labels."""

    samples: Array
    source_seed: int
    component_indices: NDArray[np.int64]

    def __post_init__(self) -> None:
        if self.samples.ndim != 2 or self.samples.shape[0] < 1:
            raise ContractViolationError("SampleSet needs an (S, D) array with S >= 1")
        if self.component_indices.shape != (self.samples.shape[0],):
            raise ContractViolationError("One component index per sample is required")

    @property
    def count(self) -> int:
        return int(self.samples.shape[0])


@dataclass(frozen=True)
class PcaBasis:
    """Eigenvectors as columns, eigenvalues and variance shares, all descending."""

    eigenvectors: Array
    eigenvalues: Array
    explained_variance_ratio: Array

    def __post_init__(self) -> None:
        vectors = np.asarray(self.eigenvectors)
        values = np.asarray(self.eigenvalues)
        D = values.shape[-1]
        if vectors.shape[-2:] != (D, D) or vectors.shape[:-2] != values.shape[:-1]:
            raise ContractViolationError("PCA basis needs (..., D, D) vectors for (..., D) values")
        gram = np.swapaxes(vectors, -1, -2) @ vectors
        if not np.allclose(gram, np.eye(D), atol=1e-8):
            raise ContractViolationError("PCA eigenvectors must be orthonormal columns")
        if np.any(values < 0.0) or np.any(np.diff(values, axis=-1) > 1e-12):
            raise ContractViolationError("PCA eigenvalues must be non-negative and non-increasing")


def mixture_log_prob(params: MixtureParams, y: ArrayOrTensor) -> Tensor:
    """
    Log-density of a (batched) mixture at ``y`` (..., D) as a tensor.

    Per-component Gaussian terms use the Cholesky factor directly through a
    triangular solve and are combined with log-sum-exp.
    """
    D = params.output_dim
    y_t = as_tensor(y)
    if y_t.shape[-1] != D:
        raise ContractViolationError(
            f"Observation has dimension {y_t.shape[-1]}, mixture has {D}"
        )
    chol = as_tensor(params.chol_factors)
    diff = y_t.expand_dims(-2) - as_tensor(params.means)
    z = solve_lower_triangular(chol, diff)
    mahalanobis = (z * z).sum(axis=-1)
    log_det = (chol * np.eye(D)).sum(axis=-1).log().sum(axis=-1)
    per_component = (
        as_tensor(params.component_log_weights())
        - 0.5 * mahalanobis
        - log_det
        - 0.5 * D * LOG_2PI
    )
    return per_component.logsumexp(axis=-1)


def log_density(params: MixtureParams, y: ArrayOrTensor) -> Union[float, Array]:
    """log sum_k pi_k N(y | mu_k, L_k L_k^T); a float for a single observation."""
    y_arr = np.asarray(_data(y), dtype=np.float64)
    if y_arr.shape[-1:] != (params.output_dim,):
        raise ContractViolationError(
            f"Observation has shape {y_arr.shape}, mixture dimension is {params.output_dim}"
        )
    with no_grad():
        out = mixture_log_prob(params, y_arr).data
    return float(out) if out.ndim == 0 else out


def categorical_draw(weights: np.ndarray, uniforms: np.ndarray) -> NDArray[np.int64]:
    """Inverse-CDF component selection; ``uniforms`` has shape batch + (S,)."""
    cdf = np.cumsum(weights, axis=-1)
    counts = np.sum(uniforms[..., :, None] >= cdf[..., None, :], axis=-1)
    return np.minimum(counts, weights.shape[-1] - 1).astype(np.int64)


def draw_noise(
    rng: np.random.Generator, weights: np.ndarray, count: int, output_dim: int
) -> Tuple[NDArray[np.int64], Array]:
    """Component indices and standard-normal noise for ``count`` draws per row."""
    batch = weights.shape[:-1]
    uniforms = rng.random(batch + (count,))
    noise = rng.standard_normal(batch + (count, output_dim))
    return categorical_draw(weights, uniforms), noise


def reparametrized_samples(
    params: MixtureParams, indices: np.ndarray, noise: np.ndarray
) -> Tensor:
    """
    y = mu_k + L_k z for batched params (B, K, ...), indices (B, S), noise (B, S, D).

    Gradients reach the selected means and Cholesky factors; the component
    choice and the noise are constants.
    """
    means = as_tensor(params.means)
    chol = as_tensor(params.chol_factors)
    rows = np.arange(indices.shape[0])[:, None]
    mu = means[rows, indices]
    L = chol[rows, indices]
    spread = (L @ noise[..., None]).reshape(mu.shape)
    return mu + spread


def sample(params: MixtureParams, rng_seed: int, count: int) -> SampleSet:
    """Draw ``count`` samples from a single mixture, deterministically in the seed."""
    if count < 1:
        raise ContractViolationError("Sample count must be at least 1")
    if params.batch_shape:
        raise ContractViolationError("sample() expects a single mixture; select a row first")
    rng = np.random.default_rng(rng_seed)
    weights = np.asarray(_data(params.weights))[None, :]
    indices, noise = draw_noise(rng, weights, count, params.output_dim)
    batched = params.detach().insert_axis(0)
    with no_grad():
        values = reparametrized_samples(batched, indices, noise).data[0]
    return SampleSet(values, rng_seed, indices[0])


def orthant_cdf(values: ArrayOrTensor, samples: ArrayOrTensor, tau: float) -> Tensor:
    """
    (1/S) sum_s prod_d sigmoid(tau (v_d - s_d)) with the sample axis at -2.

    ``values`` (..., D) must broadcast against ``samples`` (..., S, D) once a
    sample axis is inserted.
    """
    v = as_tensor(values).expand_dims(-2)
    gaps = (v - as_tensor(samples)) * tau
    return gaps.log_sigmoid().sum(axis=-1).exp().mean(axis=-1)


def smooth_orthant_cdf(y: np.ndarray, samples: SampleSet, tau: float) -> float:
    """Smoothed Monte-Carlo joint CDF of the predictive at ``y``."""
    if tau <= 0.0:
        raise ContractViolationError("Temperature must be positive")
    y_arr = np.asarray(y, dtype=np.float64)
    if y_arr.shape != (samples.samples.shape[1],):
        raise ContractViolationError("Observation and samples disagree on dimension")
    with no_grad():
        return float(orthant_cdf(y_arr, samples.samples, tau).data)


def _sign_fix(vectors: np.ndarray) -> np.ndarray:
    """Flip each column so its largest-magnitude entry is positive."""
    pivot = np.argmax(np.abs(vectors), axis=-2)
    entries = np.take_along_axis(vectors, pivot[..., None, :], axis=-2)
    signs = np.where(entries < 0.0, -1.0, 1.0)
    return vectors * signs


def eigen_basis(covariance: np.ndarray) -> Tuple[Array, Array, Array]:
    """Descending, sign-fixed eigendecomposition of (batched) symmetric matrices."""
    values, vectors = np.linalg.eigh(covariance)
    values = np.clip(values[..., ::-1], 0.0, None)
    vectors = _sign_fix(vectors[..., ::-1])
    total = values.sum(axis=-1, keepdims=True)
    D = values.shape[-1]
    with np.errstate(invalid="ignore", divide="ignore"):
        ratios = np.where(total > 0.0, values / total, 1.0 / D)
    return vectors, values, ratios


def sample_covariance(samples: np.ndarray) -> Array:
    """Centered covariance with divisor S - 1 over axis -2 of (..., S, D)."""
    count = samples.shape[-2]
    if count < 2:
        raise InsufficientSamplesError("PCA needs at least two samples", {"samples": count})
    centered = samples - samples.mean(axis=-2, keepdims=True)
    return np.einsum("...si,...sj->...ij", centered, centered) / (count - 1)


def pca_of_samples(samples: SampleSet) -> PcaBasis:
    """PCA of the sample covariance of one SampleSet."""
    vectors, values, ratios = eigen_basis(sample_covariance(samples.samples))
    return PcaBasis(vectors, values, ratios)


def batched_pca(samples: np.ndarray) -> PcaBasis:
    """Per-row PCA of samples shaped (B, S, D); fields gain a leading B axis."""
    vectors, values, ratios = eigen_basis(sample_covariance(samples))
    return PcaBasis(vectors, values, ratios)


def pooled_pca(samples: np.ndarray) -> PcaBasis:
    """PCA of the average per-row covariance of samples shaped (B, S, D)."""
    pooled = sample_covariance(samples).mean(axis=0)
    vectors, values, ratios = eigen_basis(pooled)
    return PcaBasis(vectors, values, ratios)
