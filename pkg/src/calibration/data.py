"""
Datasets: CSV ingestion, z-score standardization, deterministic splits and
synthetic generators with known conditional distributions.
"""
from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd
from numpy.typing import NDArray

from src.calibration.distributions import MixtureParams, categorical_draw
from src.shared.errors import ContractViolationError, DataFormatError, UsageError
from src.shared.logging import get_logger
from src.shared.validation.schemas import SplitSpec

logger = get_logger(__name__)

Array = NDArray[np.float64]

MAX_REJECTED_SHARE = 0.5


@dataclass(frozen=True)
class Standardization:
    """Per-column mean and scale fitted on a training split."""

    feature_mean: Array
    feature_scale: Array
    target_mean: Array
    target_scale: Array

    @classmethod
    def fit(cls, features: np.ndarray, targets: np.ndarray) -> "Standardization":
        if features.shape[0] == 0:
            logger.warning("standardization_on_empty_split")
            return cls(
                np.zeros(features.shape[1]),
                np.ones(features.shape[1]),
                np.zeros(targets.shape[1]),
                np.ones(targets.shape[1]),
            )

        def scale(values: np.ndarray) -> Array:
            sd = values.std(axis=0, ddof=0)
            return np.where(sd > 0.0, sd, 1.0)

        return cls(features.mean(axis=0), scale(features), targets.mean(axis=0), scale(targets))

    def features(self, x: np.ndarray) -> Array:
        return (x - self.feature_mean) / self.feature_scale

    def raw_features(self, x: np.ndarray) -> Array:
        return x * self.feature_scale + self.feature_mean

    def targets(self, y: np.ndarray) -> Array:
        return (y - self.target_mean) / self.target_scale

    def raw_targets(self, y: np.ndarray) -> Array:
        return y * self.target_scale + self.target_mean

    def transform_mixture(self, params: MixtureParams) -> MixtureParams:
        """Re-express a raw-unit mixture in standardized target units."""
        mixture = params.detach()
        inverse = 1.0 / self.target_scale
        means = (np.asarray(mixture.means) - self.target_mean) * inverse
        chol = inverse[:, None] * np.asarray(mixture.chol_factors)
        return MixtureParams(np.asarray(mixture.weights), means, chol, chol_floor=0.0)

    def log_jacobian(self) -> float:
        """Shift between raw and standardized log-densities, sum_d log s_d."""
        return float(np.log(self.target_scale).sum())


@dataclass(frozen=True)
class Dataset:
    features: Array
    targets: Array
    feature_names: List[str] = field(default_factory=list)
    target_names: List[str] = field(default_factory=list)
    standardization: Optional[Standardization] = None
    generator: Optional["Generator"] = None

    def __post_init__(self) -> None:
        if self.features.ndim != 2 or self.targets.ndim != 2:
            raise ContractViolationError("Features and targets must be matrices")
        if self.features.shape[0] != self.targets.shape[0]:
            raise ContractViolationError("Features and targets disagree on row count")

    @property
    def n_rows(self) -> int:
        return int(self.targets.shape[0])

    @property
    def input_dim(self) -> int:
        return int(self.features.shape[1])

    @property
    def output_dim(self) -> int:
        return int(self.targets.shape[1])

    def take(self, rows: np.ndarray) -> "Dataset":
        return replace(self, features=self.features[rows], targets=self.targets[rows])


def _prefixed(columns: List[str], prefix: str) -> List[str]:
    return [name for name in columns if name.startswith(prefix)]


def load_csv(
    path: Union[str, Path],
    feature_prefix: str = "x_",
    target_prefix: str = "y_",
) -> Dataset:
    """
    Read a headed CSV, keeping the prefixed feature and target columns.

    Rows with a missing, unparseable or non-finite cell are dropped; more than
    half of the rows dropped is a format error.
    """
    source = Path(path)
    try:
        frame = pd.read_csv(source, dtype=str, keep_default_na=False, encoding="utf-8")
    except FileNotFoundError as exc:
        raise DataFormatError(f"Data file not found: {source}") from exc
    except (pd.errors.EmptyDataError, pd.errors.ParserError, UnicodeDecodeError) as exc:
        raise DataFormatError(f"Cannot parse {source}: {exc}") from exc

    columns = [str(name).strip() for name in frame.columns]
    frame.columns = columns
    feature_names = _prefixed(columns, feature_prefix)
    target_names = _prefixed(columns, target_prefix)
    if not target_names:
        raise DataFormatError(
            f"No target columns with prefix '{target_prefix}' in {source}",
            {"columns": columns},
        )
    if not feature_names:
        raise DataFormatError(
            f"No feature columns with prefix '{feature_prefix}' in {source}",
            {"columns": columns},
        )

    numeric = frame[feature_names + target_names].apply(
        lambda column: pd.to_numeric(column.str.strip(), errors="coerce")
    )
    values = numeric.to_numpy(dtype=np.float64)
    valid = np.all(np.isfinite(values), axis=1)
    total = values.shape[0]
    rejected = int(total - valid.sum())
    if rejected:
        logger.warning("rows_rejected", path=str(source), rejected=rejected, total=total)
    if total and rejected / total > MAX_REJECTED_SHARE:
        raise DataFormatError(
            f"{rejected} of {total} rows in {source} could not be parsed",
            {"rejected": rejected, "total": total},
        )
    kept = values[valid]
    n_features = len(feature_names)
    logger.info("csv_loaded", path=str(source), rows=int(kept.shape[0]), rejected=rejected)
    return Dataset(kept[:, :n_features], kept[:, n_features:], feature_names, target_names)


def write_csv(dataset: Dataset, path: Union[str, Path]) -> Path:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    feature_names = dataset.feature_names or [f"x_{i}" for i in range(dataset.input_dim)]
    target_names = dataset.target_names or [f"y_{i}" for i in range(dataset.output_dim)]
    frame = pd.DataFrame(
        np.hstack([dataset.features, dataset.targets]),
        columns=feature_names + target_names,
    )
    frame.to_csv(target, index=False)
    return target


def split_indices(n_rows: int, spec: SplitSpec) -> Tuple[NDArray[np.int64], ...]:
    """Permutation fixed by (seed, run_index), cut into contiguous slices."""
    stream = np.random.SeedSequence(entropy=spec.seed, spawn_key=(spec.run_index,))
    order = np.random.default_rng(stream).permutation(n_rows)
    n_train = int(round(spec.fractions[0] * n_rows))
    n_val = min(int(round(spec.fractions[1] * n_rows)), n_rows - n_train)
    return order[:n_train], order[n_train : n_train + n_val], order[n_train + n_val :]


def split(dataset: Dataset, spec: SplitSpec) -> Tuple[Dataset, Dataset, Dataset]:
    """Train/validation/test slices standardized with training statistics."""
    train_rows, val_rows, test_rows = split_indices(dataset.n_rows, spec)
    stats = Standardization.fit(dataset.features[train_rows], dataset.targets[train_rows])

    def standardized(rows: np.ndarray) -> Dataset:
        part = dataset.take(rows)
        return replace(
            part,
            features=stats.features(part.features),
            targets=stats.targets(part.targets),
            standardization=stats,
        )

    logger.debug(
        "dataset_split",
        train=len(train_rows),
        val=len(val_rows),
        test=len(test_rows),
        run_index=spec.run_index,
    )
    return standardized(train_rows), standardized(val_rows), standardized(test_rows)


class Generator(ABC):
    """Synthetic data source with a known conditional mixture."""

    name = "generator"
    input_dim = 1
    output_dim = 1

    def features(self, n: int, rng: np.random.Generator) -> Array:
        return rng.standard_normal((n, self.input_dim))

    @abstractmethod
    def conditional(self, x: np.ndarray) -> MixtureParams:
        """Exact conditional mixture of raw targets given raw features."""

    def sample_targets(self, x: np.ndarray, rng: np.random.Generator) -> Array:
        n = x.shape[0]
        if n == 0:
            return np.empty((0, self.output_dim))
        params = self.conditional(x)
        weights = np.asarray(params.weights)
        index = categorical_draw(weights, rng.random((n, 1)))[:, 0]
        rows = np.arange(n)
        mean = np.asarray(params.means)[rows, index]
        chol = np.asarray(params.chol_factors)[rows, index]
        noise = rng.standard_normal((n, self.output_dim))
        return mean + np.einsum("nij,nj->ni", chol, noise)

    def sample(self, n: int, seed: int) -> Tuple[Array, Array]:
        rng = np.random.default_rng(seed)
        x = self.features(n, rng)
        return x, self.sample_targets(x, rng)


class LinearGaussian(Generator):
    """y = A x + eps with eps ~ N(0, Sigma)."""

    name = "linear_gaussian"
    input_dim = 2
    output_dim = 2
    coefficients = np.array([[1.0, -0.5], [0.5, 1.0]])

    def __init__(self, noise_cov: Optional[np.ndarray] = None):
        self.noise_cov = np.eye(2) if noise_cov is None else np.asarray(noise_cov, dtype=np.float64)
        self.noise_chol = np.linalg.cholesky(self.noise_cov)

    def conditional(self, x: np.ndarray) -> MixtureParams:
        n = x.shape[0]
        means = (x @ self.coefficients.T)[:, None, :]
        chol = np.broadcast_to(self.noise_chol, (n, 1, 2, 2)).copy()
        return MixtureParams(np.ones((n, 1)), means, chol, chol_floor=0.0)

    def bayes_nll(self, standardization: Optional[Standardization] = None) -> float:
        """Expected NLL of the true conditional, 0.5 log det(2 pi e Sigma)."""
        _, log_det = np.linalg.slogdet(2.0 * np.pi * np.e * self.noise_cov)
        shift = standardization.log_jacobian() if standardization is not None else 0.0
        return 0.5 * float(log_det) - shift


class Bimodal(Generator):
    """Two modes whose weights depend on x; a single Gaussian cannot fit it."""

    name = "bimodal"
    input_dim = 1
    output_dim = 2
    separation = 1.5
    slope = 0.5
    spread = 0.5

    def features(self, n: int, rng: np.random.Generator) -> Array:
        return rng.uniform(-2.0, 2.0, size=(n, 1))

    def conditional(self, x: np.ndarray) -> MixtureParams:
        t = x[:, 0]
        upper = 1.0 / (1.0 + np.exp(-2.0 * t))
        weights = np.stack([upper, 1.0 - upper], axis=1)
        centre = self.slope * t
        means = np.stack(
            [
                np.stack([centre + self.separation] * 2, axis=1),
                np.stack([centre - self.separation] * 2, axis=1),
            ],
            axis=1,
        )
        chol = np.broadcast_to(self.spread * np.eye(2), (x.shape[0], 2, 2, 2)).copy()
        return MixtureParams(weights, means, chol, chol_floor=0.0)


class HeteroCorrelated(Generator):
    """Bivariate Gaussian whose correlation 0.9 tanh(2x) moves with x."""

    name = "hetero_corr"
    input_dim = 1
    output_dim = 2

    def features(self, n: int, rng: np.random.Generator) -> Array:
        return rng.uniform(-1.0, 1.0, size=(n, 1))

    def conditional(self, x: np.ndarray) -> MixtureParams:
        t = x[:, 0]
        n = t.shape[0]
        r = 0.9 * np.tanh(2.0 * t)
        means = np.stack([t, 0.5 * t], axis=1)[:, None, :]
        chol = np.zeros((n, 1, 2, 2))
        chol[:, 0, 0, 0] = 1.0
        chol[:, 0, 1, 0] = r
        chol[:, 0, 1, 1] = np.sqrt(1.0 - r * r)
        return MixtureParams(np.ones((n, 1)), means, chol, chol_floor=0.0)


def _orthogonal_basis(dim: int, seed: int) -> Array:
    q, r = np.linalg.qr(np.random.default_rng(seed).standard_normal((dim, dim)))
    return q * np.sign(np.diag(r))


class LowRank(Generator):
    """D = 8 Gaussian noise with about 84% of its variance in three directions."""

    name = "low_rank"
    input_dim = 2
    output_dim = 8
    eigenvalues = np.array([5.0, 3.0, 2.4, 0.4, 0.4, 0.4, 0.4, 0.4])

    def __init__(self) -> None:
        self.basis = _orthogonal_basis(self.output_dim, seed=8)
        self.loadings = np.random.default_rng(2).normal(0.0, 0.5, size=(self.output_dim, 2))
        covariance = self.basis @ np.diag(self.eigenvalues) @ self.basis.T
        self.noise_chol = np.linalg.cholesky(covariance)

    def conditional(self, x: np.ndarray) -> MixtureParams:
        n = x.shape[0]
        means = (x @ self.loadings.T)[:, None, :]
        chol = np.broadcast_to(self.noise_chol, (n, 1, 8, 8)).copy()
        return MixtureParams(np.ones((n, 1)), means, chol, chol_floor=0.0)


GENERATORS: Dict[str, type] = {
    LinearGaussian.name: LinearGaussian,
    Bimodal.name: Bimodal,
    HeteroCorrelated.name: HeteroCorrelated,
    LowRank.name: LowRank,
}


def make_generator(kind: str) -> Generator:
    try:
        return GENERATORS[kind]()
    except KeyError:
        raise UsageError(
            f"Unknown synthetic dataset '{kind}'; expected one of: {', '.join(GENERATORS)}"
        )


def parse_synth_token(token: str) -> Tuple[str, int]:
    """``kind:n`` as used on the command line."""
    kind, _, count = token.partition(":")
    try:
        n = int(count)
    except ValueError:
        raise UsageError(f"Synthetic data must be given as kind:n, got '{token}'")
    if n < 0:
        raise UsageError("Synthetic row count must be nonnegative")
    make_generator(kind)
    return kind, n


def synth(kind: str, n: int, seed: int, generator: Optional[Generator] = None) -> Dataset:
    """Draw ``n`` rows from a named generator, deterministically in ``seed``."""
    source = generator or make_generator(kind)
    if n < 0:
        raise ContractViolationError("Row count must be nonnegative")
    x, y = source.sample(n, seed)
    return Dataset(
        x,
        y,
        [f"x_{i}" for i in range(source.input_dim)],
        [f"y_{i}" for i in range(source.output_dim)],
        generator=source,
    )


class OraclePredictor:
    """The true conditional of a generator, expressed in standardized units."""

    def __init__(self, generator: Generator, standardization: Optional[Standardization] = None):
        self.generator = generator
        self.standardization = standardization

    def __call__(self, features: np.ndarray) -> MixtureParams:
        if self.standardization is None:
            return self.generator.conditional(features)
        raw = self.standardization.raw_features(features)
        return self.standardization.transform_mixture(self.generator.conditional(raw))
