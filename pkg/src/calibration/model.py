"""
The mixture hypernetwork.

An MLP with rectifier activations maps an input row to a raw head of width
K(1 + D + D(D+1)/2), which is decoded into softmax weights, unconstrained
means and lower-triangular Cholesky factors whose diagonals pass through
softplus plus a floor. All parameters live in one flat vector so the
optimizer and checkpoints deal with a single array.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import List, Tuple, Union

import numpy as np
from numpy.typing import NDArray
from pydantic import ValidationError

from src.calibration.autodiff import Tensor, as_tensor, no_grad
from src.calibration.distributions import MixtureParams
from src.shared.errors import ContractViolationError, DataFormatError
from src.shared.logging import get_logger
from src.shared.validation.schemas import Checkpoint, NetworkConfig

logger = get_logger(__name__)

Array = NDArray[np.float64]
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelWeights:
    """Flat parameter vector with the config and seed it was built from."""

    theta: Array
    config: NetworkConfig
    seed: int

    def __post_init__(self) -> None:
        expected = parameter_count(self.config)
        if self.theta.shape != (expected,):
            raise ContractViolationError(
                f"Expected {expected} parameters, got {self.theta.shape}",
                {"expected": expected},
            )
        if not np.all(np.isfinite(self.theta)):
            raise ContractViolationError("Model weights must be finite")

    def replace(self, theta: np.ndarray) -> "ModelWeights":
        return ModelWeights(np.array(theta, dtype=np.float64), self.config, self.seed)


def layer_shapes(config: NetworkConfig) -> List[Tuple[int, int]]:
    widths = [config.input_dim, *config.hidden_widths, config.head_size]
    return list(zip(widths[:-1], widths[1:]))


def parameter_count(config: NetworkConfig) -> int:
    return sum(fan_in * fan_out + fan_out for fan_in, fan_out in layer_shapes(config))


def layer_offsets(config: NetworkConfig) -> List[Tuple[slice, slice]]:
    """(weight slice, bias slice) into the flat vector for each layer."""
    offsets = []
    start = 0
    for fan_in, fan_out in layer_shapes(config):
        weight = slice(start, start + fan_in * fan_out)
        bias = slice(weight.stop, weight.stop + fan_out)
        offsets.append((weight, bias))
        start = bias.stop
    return offsets


def init_weights(config: NetworkConfig, seed: int) -> ModelWeights:
    """Fan-in scaled uniform weights, zero biases; deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    theta = np.zeros(parameter_count(config))
    for (fan_in, fan_out), (weight, _) in zip(layer_shapes(config), layer_offsets(config)):
        bound = np.sqrt(1.0 / fan_in)
        theta[weight] = rng.uniform(-bound, bound, size=fan_in * fan_out)
    return ModelWeights(theta, config, seed)


@lru_cache(maxsize=32)
def _triangle_layout(output_dim: int) -> Tuple[Array, Array, Array]:
    """Scatter matrix from packed lower-triangle entries to (D*D) and diagonal mask."""
    rows, cols = np.tril_indices(output_dim)
    scatter = np.zeros((rows.size, output_dim * output_dim))
    scatter[np.arange(rows.size), rows * output_dim + cols] = 1.0
    diagonal = (rows == cols).astype(np.float64)
    return scatter, diagonal, 1.0 - diagonal


def decode_head(raw: Union[Tensor, np.ndarray], config: NetworkConfig) -> MixtureParams:
    """Split a raw head (..., head_size) into constrained mixture parameters."""
    head = as_tensor(raw)
    K, D, T = config.components, config.output_dim, config.tril_size
    batch = head.shape[:-1]
    logits = head[..., :K]
    means = head[..., K : K + K * D].reshape(batch + (K, D))
    packed = head[..., K + K * D :].reshape(batch + (K, T))
    scatter, diagonal, off_diagonal = _triangle_layout(D)
    entries = packed * off_diagonal + (packed.softplus() + config.chol_floor) * diagonal
    chol = (entries @ scatter).reshape(batch + (K, D, D))
    log_weights = logits.log_softmax(axis=-1)
    params = MixtureParams(log_weights.exp(), means, chol, log_weights, config.chol_floor)
    if isinstance(raw, np.ndarray):
        return params.detach()
    return params


def encode_head(params: MixtureParams, config: NetworkConfig) -> Array:
    """A raw head that decodes to ``params``; diagonals must exceed the floor."""
    mixture = params.detach()
    weights = np.asarray(mixture.weights)
    chol = np.asarray(mixture.chol_factors)
    rows, cols = np.tril_indices(config.output_dim)
    packed = chol[..., rows, cols]
    on_diagonal = rows == cols
    shifted = packed[..., on_diagonal] - config.chol_floor
    if np.any(shifted <= 0.0):
        raise ContractViolationError("Cholesky diagonals must exceed the floor to be encoded")
    packed[..., on_diagonal] = shifted + np.log(-np.expm1(-shifted))
    with np.errstate(divide="ignore"):
        logits = np.log(weights)
    batch = weights.shape[:-1]
    return np.concatenate(
        [
            logits,
            np.asarray(mixture.means).reshape(batch + (-1,)),
            packed.reshape(batch + (-1,)),
        ],
        axis=-1,
    )


def forward(
    weights: Union[ModelWeights, Tensor, np.ndarray],
    config: NetworkConfig,
    x: np.ndarray,
) -> MixtureParams:
    """
    Map inputs (N, L) to a batched mixture, or a single input (L,) to one mixture.

    ``weights`` may be a tensor so training can differentiate through the head.
    """
    x_arr = np.asarray(x, dtype=np.float64)
    single = x_arr.ndim == 1
    if single:
        x_arr = x_arr[None]
    if x_arr.ndim != 2 or x_arr.shape[1] != config.input_dim:
        raise ContractViolationError(
            f"Inputs must have {config.input_dim} columns, got shape {np.shape(x)}"
        )
    if not np.all(np.isfinite(x_arr)):
        raise ContractViolationError("Inputs must be finite")

    theta = as_tensor(weights.theta if isinstance(weights, ModelWeights) else weights)
    hidden = as_tensor(x_arr)
    shapes = layer_shapes(config)
    for depth, ((fan_in, fan_out), (w, b)) in enumerate(zip(shapes, layer_offsets(config))):
        hidden = hidden @ theta[w].reshape(fan_in, fan_out) + theta[b]
        if depth < len(shapes) - 1:
            hidden = hidden.relu()
    params = decode_head(hidden, config)
    if not isinstance(weights, Tensor):
        params = params.detach()
    return params.row(0) if single and not isinstance(weights, Tensor) else params


class MixturePredictor:
    """Callable features -> batched mixture for fixed weights."""

    def __init__(self, weights: ModelWeights):
        self.weights = weights

    @property
    def config(self) -> NetworkConfig:
        return self.weights.config

    def __call__(self, features: np.ndarray) -> MixtureParams:
        with no_grad():
            return forward(self.weights, self.weights.config, features)


def save_checkpoint(weights: ModelWeights, path: Union[str, Path]) -> Path:
    """Write weights as a versioned JSON container."""
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    record = Checkpoint(
        format_version=CHECKPOINT_VERSION,
        config=weights.config,
        seed=weights.seed,
        parameters=weights.theta.tolist(),
    )
    # repr-based float text round-trips bit-exactly
    target.write_text(json.dumps(record.model_dump(mode="json"), indent=2), encoding="utf-8")
    logger.info("checkpoint_saved", path=str(target), parameters=weights.theta.size)
    return target


def load_checkpoint(path: Union[str, Path]) -> ModelWeights:
    source = Path(path)
    try:
        record = Checkpoint.model_validate(json.loads(source.read_text(encoding="utf-8")))
    except FileNotFoundError as exc:
        raise DataFormatError(f"Checkpoint not found: {source}") from exc
    except (ValidationError, json.JSONDecodeError) as exc:
        raise DataFormatError(f"Malformed checkpoint {source}", {"error": str(exc)}) from exc
    if record.format_version != CHECKPOINT_VERSION:
        raise DataFormatError(
            f"Unsupported checkpoint version {record.format_version}",
            {"supported": CHECKPOINT_VERSION},
        )
    theta = np.asarray(record.parameters, dtype=np.float64)
    if theta.size != parameter_count(record.config):
        raise DataFormatError("Checkpoint parameter count does not match its config")
    return ModelWeights(theta, record.config, record.seed)
