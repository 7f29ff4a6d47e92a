"""Common Pydantic schemas for run configuration, reports and artifacts."""

from datetime import datetime, timezone
from enum import Enum
from typing import Any, Dict, List, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from src.shared.errors import PreRankConfigError, UsageError


class PreRankKind(str, Enum):
    """Pre-rank projection families; values are the CLI/config tokens."""

    MARGINAL = "marginal"
    LOCATION = "location"
    SCALE = "scale"
    DEPENDENCY = "dependency"
    PCA = "pca"
    HDR = "hdr"
    COPULA = "copula"


ALL_PRERANK_KINDS: Tuple[PreRankKind, ...] = tuple(PreRankKind)


class PreRankSpec(BaseModel):
    """
    A pre-rank choice plus its parameters.

    ``index`` is the 1-based coordinate (marginal) or principal component (pca);
    when omitted those families are averaged over all components. ``lag`` is the
    variogram lag of the dependency pre-rank.
    """

    model_config = ConfigDict(frozen=True)

    kind: PreRankKind
    index: Optional[int] = Field(None, ge=1, description="Coordinate or component")
    lag: int = Field(1, ge=1, description="Dependency variogram lag h")
    explained_variance_threshold: float = Field(
        0.8, gt=0.0, le=1.0, description="Variance share kept by PCA compositions"
    )

    @classmethod
    def parse(cls, token: str) -> "PreRankSpec":
        """Parse ``kind`` or ``kind:n`` (n is the index, or the lag for dependency)."""
        name, _, arg = token.strip().lower().partition(":")
        try:
            kind = PreRankKind(name)
        except ValueError:
            valid = ", ".join(k.value for k in PreRankKind)
            raise UsageError(f"Unknown pre-rank '{token}'; expected one of: {valid}")
        if not arg:
            return cls(kind=kind)
        try:
            value = int(arg)
        except ValueError:
            raise UsageError(f"Pre-rank argument must be an integer: '{token}'")
        if kind is PreRankKind.DEPENDENCY:
            return cls(kind=kind, lag=value)
        if kind in (PreRankKind.MARGINAL, PreRankKind.PCA):
            return cls(kind=kind, index=value)
        raise UsageError(f"Pre-rank '{name}' takes no argument")

    @property
    def is_family(self) -> bool:
        """True for marginal/pca without an index (averaged over components)."""
        return self.kind in (PreRankKind.MARGINAL, PreRankKind.PCA) and self.index is None

    @property
    def label(self) -> str:
        """Stable name used in reports and CSV column names."""
        if self.index is not None:
            return f"{self.kind.value}_{self.index}"
        if self.kind is PreRankKind.DEPENDENCY and self.lag != 1:
            return f"{self.kind.value}_h{self.lag}"
        return self.kind.value

    def with_index(self, index: int) -> "PreRankSpec":
        return self.model_copy(update={"index": index})

    def validate_for(self, output_dim: int) -> None:
        """Check the parameter ranges against the target dimension D."""
        if output_dim < 1:
            raise PreRankConfigError("Output dimension must be at least 1")
        if self.index is not None and self.index > output_dim:
            raise PreRankConfigError(
                f"Pre-rank {self.label} requires index in [1, {output_dim}]",
                {"prerank": self.label, "output_dim": output_dim},
            )
        if self.kind is PreRankKind.DEPENDENCY:
            if output_dim < 2:
                raise PreRankConfigError(
                    "Dependency pre-rank requires output dimension D >= 2",
                    {"prerank": self.label, "output_dim": output_dim},
                )
            if self.lag > output_dim - 1:
                raise PreRankConfigError(
                    f"Dependency lag must be in [1, {output_dim - 1}]",
                    {"prerank": self.label, "output_dim": output_dim},
                )


class Composition(str, Enum):
    """How the pre-rank regularizer is combined with projection families."""

    PLAIN = "plain"
    MARGINAL_PLUS = "marginal_plus"
    PCA_PLUS = "pca_plus"

    @classmethod
    def from_token(cls, token: str) -> "Composition":
        aliases = {"plain": cls.PLAIN, "marginal": cls.MARGINAL_PLUS, "pca": cls.PCA_PLUS}
        try:
            return aliases.get(token, None) or cls(token)
        except ValueError:
            raise UsageError(f"Unknown composition '{token}'; expected plain|marginal|pca")


class ScoreKind(str, Enum):
    """Proper scoring rule minimized during training."""

    NLL = "nll"
    ENERGY = "energy"


class NetworkConfig(BaseModel):
    """Architecture of the mixture hypernetwork."""

    model_config = ConfigDict(frozen=True)

    input_dim: int = Field(..., ge=1, description="Input dimension L")
    output_dim: int = Field(..., ge=1, description="Output dimension D")
    components: int = Field(5, ge=1, description="Mixture components K")
    hidden_widths: List[int] = Field(default_factory=lambda: [100, 100, 100])
    chol_floor: float = Field(1e-4, gt=0.0, description="Cholesky diagonal floor")

    @field_validator("hidden_widths")
    @classmethod
    def validate_widths(cls, v: List[int]) -> List[int]:
        if not v or any(width < 1 for width in v):
            raise ValueError("hidden_widths must be a nonempty list of positive ints")
        return v

    @property
    def tril_size(self) -> int:
        return self.output_dim * (self.output_dim + 1) // 2

    @property
    def head_size(self) -> int:
        """Raw output head width K(1 + D + D(D+1)/2)."""
        return self.components * (1 + self.output_dim + self.tril_size)


class RegularizerConfig(BaseModel):
    """PCE-KDE regularizer settings."""

    model_config = ConfigDict(frozen=True, populate_by_name=True)

    lam: float = Field(0.0, ge=0.0, alias="lambda", description="Strength lambda")
    prerank: PreRankSpec = Field(default_factory=lambda: PreRankSpec(kind="location"))
    composition: Composition = Composition.PLAIN
    samples: int = Field(100, ge=1, description="Predictive samples S")
    temperature: float = Field(100.0, gt=0.0, description="Sigmoid temperature tau")
    grid_size: int = Field(100, ge=1, description="Quantile grid size M")
    p: float = Field(1.0, ge=1.0, description="Penalty exponent")

    @model_validator(mode="before")
    @classmethod
    def route_pca_threshold(cls, data: Any) -> Any:
        """Accept ``pca_threshold`` as shorthand for the pre-rank's variance share."""
        if not isinstance(data, dict) or "pca_threshold" not in data:
            return data
        fields = dict(data)
        threshold = fields.pop("pca_threshold")
        prerank = fields.get("prerank") or PreRankSpec(kind=PreRankKind.LOCATION)
        if isinstance(prerank, dict):
            prerank = PreRankSpec(**prerank)
        fields["prerank"] = PreRankSpec(
            **{**prerank.model_dump(), "explained_variance_threshold": threshold}
        )
        return fields

    @property
    def pca_threshold(self) -> float:
        """Variance share d* must reach under the pca_plus composition."""
        return self.prerank.explained_variance_threshold


class TrainConfig(BaseModel):
    """Optimizer loop settings."""

    model_config = ConfigDict(frozen=True)

    learning_rate: float = Field(1e-4, gt=0.0)
    batch_size: int = Field(256, ge=1)
    max_epochs: int = Field(200, ge=1)
    patience: int = Field(20, ge=1)
    seed: int = Field(0, ge=0)
    score: ScoreKind = ScoreKind.NLL
    energy_samples: int = Field(100, ge=1, description="Samples G for energy scores")
    eval_samples: int = Field(100, ge=1, description="Samples S for validation PITs")
    fixed_noise: bool = Field(False, description="Reuse Gaussian draws at every step")


class SplitSpec(BaseModel):
    """Train/validation/test split definition."""

    model_config = ConfigDict(frozen=True)

    fractions: Tuple[float, float, float] = (0.8, 0.1, 0.1)
    seed: int = Field(0, ge=0)
    run_index: int = Field(1, ge=1, le=5)

    @field_validator("fractions")
    @classmethod
    def validate_fractions(cls, v: Tuple[float, float, float]) -> Tuple[float, float, float]:
        if any(f <= 0.0 for f in v):
            raise ValueError("Every split fraction must be positive")
        if abs(sum(v) - 1.0) > 1e-9:
            raise ValueError("Split fractions must sum to 1")
        return v


class DataSource(BaseModel):
    """Where a run's data came from: a CSV path or a synthetic generator."""

    model_config = ConfigDict(frozen=True)

    csv_path: Optional[str] = None
    synth_kind: Optional[str] = None
    synth_n: Optional[int] = Field(None, ge=0)
    synth_seed: int = Field(0, ge=0, description="Seed of the synthetic draw")
    feature_prefix: str = "x_"
    target_prefix: str = "y_"

    @model_validator(mode="after")
    def validate_exclusive(self) -> "DataSource":
        if (self.csv_path is None) == (self.synth_kind is None):
            raise ValueError("Exactly one of csv_path or synth_kind must be given")
        return self


class EpochRecord(BaseModel):
    """Per-epoch training summary."""

    epoch: int
    train_loss: float
    val_score: float
    val_objective: float
    val_pce: Dict[str, float] = Field(default_factory=dict)


class TrainHistory(BaseModel):
    """Epoch records plus the index of the epoch whose weights were kept."""

    epochs: List[EpochRecord] = Field(default_factory=list)
    best_epoch: int = -1

    @property
    def best_val_objective(self) -> float:
        return min(record.val_objective for record in self.epochs)


class Checkpoint(BaseModel):
    """Serialized model weights with a config echo."""

    format_version: int = 1
    config: NetworkConfig
    seed: int
    parameters: List[float]


class PreRankReport(BaseModel):
    """Calibration diagnostics for one pre-rank."""

    prerank: str
    pce: float
    p_value: Optional[float] = None
    holm_p: Optional[float] = None
    reliability: List[Tuple[float, float]] = Field(default_factory=list)
    components: Optional[List[float]] = None
    null_mean: Optional[float] = None
    null_q95: Optional[float] = None


class CalibrationReport(BaseModel):
    """Test-split diagnostics across pre-ranks plus proper scores."""

    preranks: List[PreRankReport]
    nll: Optional[float] = None
    energy_score: Optional[float] = None
    n_test: int
    sample_count: int
    grid_size: int
    units: str = "standardized"
    seed: int = 0

    def get(self, label: str) -> PreRankReport:
        for entry in self.preranks:
            if entry.prerank == label:
                return entry
        raise KeyError(label)


class LambdaRecord(BaseModel):
    """Validation outcome of one regularization strength."""

    lam: float
    val_pce: float
    val_energy: float
    val_nll: float
    within_budget: bool


class TuningReport(BaseModel):
    """Lambda selection under the energy-score budget."""

    prerank: str
    composition: Composition
    reference_energy: float
    energy_budget: float
    budget_ratio: float = 1.1
    records: List[LambdaRecord]
    selected_lambda: float
    degenerate_grid: bool = False


class ErrorResponse(BaseModel):
    """Standard error record written into manifests."""

    error_code: str = Field(..., description="Machine-readable error code")
    message: str = Field(..., description="Human-readable error message")
    details: Optional[Dict[str, Any]] = Field(None, description="Additional error details")
    timestamp: datetime = Field(default_factory=lambda: datetime.now(timezone.utc))


class RunManifest(BaseModel):
    """Reproducibility record written by every command."""

    command: str
    config: Dict[str, Any] = Field(default_factory=dict)
    seeds: List[int] = Field(default_factory=list)
    artifacts: Dict[str, str] = Field(default_factory=dict)
    started_at: datetime = Field(default_factory=lambda: datetime.now(timezone.utc))
    wall_clock_seconds: float = 0.0
    version: str
    status: str = "success"
    error: Optional[ErrorResponse] = None
