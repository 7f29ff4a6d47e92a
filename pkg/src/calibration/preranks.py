"""
Pre-rank projections: scalar summaries rho(x, y) of a prediction/outcome pair.

``project_values`` is the shared vectorized implementation used by training
(on tensors) and evaluation (on arrays). ``project`` and ``project_samples``
are the single-row entry points.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional

import numpy as np
from numpy.typing import NDArray

from src.calibration.autodiff import Tensor, as_tensor, no_grad
from src.calibration.distributions import (
    ArrayOrTensor,
    MixtureParams,
    PcaBasis,
    SampleSet,
    mixture_log_prob,
    orthant_cdf,
)
from src.shared.errors import ContractViolationError
from src.shared.validation.schemas import PreRankKind, PreRankSpec

Array = NDArray[np.float64]


@dataclass(frozen=True)
class ProjectionContext:
    """Per-row inputs a projection may need besides the outcome itself."""

    mixture: Optional[MixtureParams] = None
    samples: Optional[SampleSet] = None
    pca_basis: Optional[PcaBasis] = None
    tau: Optional[float] = None

    def require(self, spec: PreRankSpec) -> None:
        missing = []
        if spec.kind in (PreRankKind.HDR, PreRankKind.COPULA) and self.mixture is None:
            missing.append("mixture")
        if spec.kind is PreRankKind.COPULA:
            if self.samples is None:
                missing.append("samples")
            if self.tau is None or self.tau <= 0.0:
                missing.append("tau")
        if spec.kind is PreRankKind.PCA and self.pca_basis is None:
            missing.append("pca_basis")
        if missing:
            raise ContractViolationError(
                f"Projection context for {spec.label} lacks: {', '.join(missing)}",
                {"prerank": spec.label, "missing": missing},
            )


def population_variance(values: Tensor) -> Tensor:
    centered = values - values.mean(axis=-1, keepdims=True)
    return (centered * centered).mean(axis=-1)


def variogram_ratio(values: Tensor, lag: int) -> Tensor:
    """-gamma(h) / s^2 with gamma the lag-h semivariogram; 0 for constant vectors."""
    D = values.shape[-1]
    head = values[..., : D - lag]
    tail = values[..., lag:]
    step = head - tail
    gamma = (step * step).sum(axis=-1) / (2.0 * (D - lag))
    variance = population_variance(values)
    degenerate = variance.data == 0.0
    safe = variance + degenerate.astype(np.float64)
    return -(gamma / safe) * (~degenerate).astype(np.float64)


def project_values(
    spec: PreRankSpec,
    values: ArrayOrTensor,
    *,
    mixture: Optional[MixtureParams] = None,
    samples: Optional[ArrayOrTensor] = None,
    eigenvectors: Optional[np.ndarray] = None,
    tau: Optional[float] = None,
) -> Tensor:
    """
    Apply a pre-rank to ``values`` shaped (B, D) or (B, S, D).

    ``mixture`` is batched over B, ``samples`` is (B, S', D) and
    ``eigenvectors`` is (B, D, D); all are aligned to ``values`` here.
    """
    v = as_tensor(values)
    extra = v.ndim - 2
    if extra not in (0, 1):
        raise ContractViolationError("Projected values must be (B, D) or (B, S, D)")
    kind = spec.kind

    if kind is PreRankKind.MARGINAL:
        if spec.index is None:
            raise ContractViolationError("Marginal projection needs a coordinate index")
        return v[..., spec.index - 1]
    if kind is PreRankKind.LOCATION:
        return v.mean(axis=-1)
    if kind is PreRankKind.SCALE:
        return population_variance(v)
    if kind is PreRankKind.DEPENDENCY:
        return variogram_ratio(v, spec.lag)
    if kind is PreRankKind.PCA:
        if spec.index is None or eigenvectors is None:
            raise ContractViolationError("PCA projection needs a component index and a basis")
        direction = np.asarray(eigenvectors)[..., :, spec.index - 1]
        if extra:
            direction = direction[:, None, :]
        return (v * direction).sum(axis=-1)
    if kind is PreRankKind.HDR:
        if mixture is None:
            raise ContractViolationError("HDR projection needs the predictive mixture")
        aligned = mixture.insert_axis(1) if extra else mixture
        return mixture_log_prob(aligned, v).exp()
    if kind is PreRankKind.COPULA:
        if samples is None or tau is None:
            raise ContractViolationError("Copula projection needs samples and a temperature")
        pool = as_tensor(samples)
        if extra:
            pool = pool.expand_dims(1)
        return orthant_cdf(v, pool, tau)
    raise ContractViolationError(f"Unknown pre-rank kind {kind}")


def _context_arguments(ctx: ProjectionContext) -> dict:
    return {
        "mixture": None if ctx.mixture is None else ctx.mixture.detach().insert_axis(0),
        "samples": None if ctx.samples is None else ctx.samples.samples[None],
        "eigenvectors": None if ctx.pca_basis is None else ctx.pca_basis.eigenvectors[None],
        "tau": ctx.tau,
    }


def _check_dimension(spec: PreRankSpec, output_dim: int, ctx: ProjectionContext) -> None:
    spec.validate_for(output_dim)
    if ctx.mixture is not None and ctx.mixture.output_dim != output_dim:
        raise ContractViolationError("Outcome and mixture disagree on dimension")


def project(spec: PreRankSpec, ctx: ProjectionContext, y: np.ndarray) -> float:
    """T = rho(x, y) for one outcome."""
    y_arr = np.asarray(y, dtype=np.float64)
    if y_arr.ndim != 1:
        raise ContractViolationError("project() expects a single outcome vector")
    ctx.require(spec)
    _check_dimension(spec, y_arr.shape[0], ctx)
    with no_grad():
        out = project_values(spec, y_arr[None], **_context_arguments(ctx))
    return float(out.data[0])


def project_samples(spec: PreRankSpec, ctx: ProjectionContext, samples: SampleSet) -> Array:
    """T_s = rho(x, Y_s) for every sample; copula CDFs use the full SampleSet."""
    ctx.require(spec)
    _check_dimension(spec, samples.samples.shape[1], ctx)
    with no_grad():
        out = project_values(spec, samples.samples[None], **_context_arguments(ctx))
    return np.array(out.data[0])


def top_components(basis: PcaBasis, threshold: float) -> int:
    """Smallest d* whose cumulative explained variance reaches ``threshold``."""
    ratios = np.asarray(basis.explained_variance_ratio)
    if not 0.0 < threshold <= 1.0:
        raise ContractViolationError("Explained-variance threshold must be in (0, 1]")
    cumulative = np.cumsum(ratios)
    # tolerate rounding in the cumulative sum
    d_star = int(np.searchsorted(cumulative, threshold - 1e-12, side="left")) + 1
    return min(max(d_star, 1), ratios.shape[-1])


def expand_family(spec: PreRankSpec, output_dim: int, count: Optional[int] = None) -> List[PreRankSpec]:
    """Indexed members of a marginal/pca family (first ``count`` components)."""
    if not spec.is_family:
        return [spec]
    upper = output_dim if count is None else min(count, output_dim)
    return [spec.with_index(d) for d in range(1, upper + 1)]
