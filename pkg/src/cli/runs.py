"""
Run bookkeeping shared by the commands: output directories, the manifest,
config echo, and resolution of data sources from flags or a previous run.
"""
import argparse
import json
import time
from pathlib import Path
from types import TracebackType
from typing import Any, Dict, List, Optional, Type, TypeVar

import pandas as pd
from pydantic import BaseModel, ValidationError

from src import __version__
from src.calibration.data import Dataset, load_csv, parse_synth_token, synth
from src.shared.errors import PrerankcalError, UsageError
from src.shared.logging import bind_run_context, get_logger
from src.shared.validation.schemas import DataSource, ErrorResponse, RunManifest, SplitSpec

logger = get_logger(__name__)

MANIFEST_NAME = "manifest.json"
CONFIG_NAME = "config.json"

M = TypeVar("M", bound=BaseModel)


def build_model(model: Type[M], **fields: Any) -> M:
    """Construct a config model, reporting invalid flag values as usage errors."""
    try:
        return model(**fields)
    except ValidationError as exc:
        problems = [
            f"{'.'.join(str(p) for p in error['loc'])}: {error['msg']}" for error in exc.errors()
        ]
        raise UsageError(
            f"Invalid {model.__name__}: {'; '.join(problems)}",
            {"errors": problems},
        ) from exc


def write_json(path: Path, payload: Any) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(payload, BaseModel):
        text = payload.model_dump_json(indent=2, by_alias=True)
    else:
        text = json.dumps(payload, indent=2)
    path.write_text(text + "\n", encoding="utf-8")
    return path


def write_frame(path: Path, frame: pd.DataFrame) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False)
    return path


class RunRecorder:
    """
    Context manager that writes the run manifest on success and on handled failure.

    Handled failures are ``PrerankcalError`` instances; they are recorded as an
    ``ErrorResponse`` and re-raised for the exit-code mapping in ``main``.
    """

    def __init__(self, command: str, out_dir: Path, config: Dict[str, Any], seeds: List[int]):
        self.command = command
        self.out_dir = out_dir
        self.config = config
        self.seeds = seeds
        self.artifacts: Dict[str, str] = {}
        self._started = 0.0
        self._manifest: Optional[RunManifest] = None

    def artifact(self, name: str, path: Path) -> Path:
        self.artifacts[name] = str(path)
        return path

    def path(self, name: str) -> Path:
        return self.out_dir / name

    def __enter__(self) -> "RunRecorder":
        self.out_dir.mkdir(parents=True, exist_ok=True)
        bind_run_context(command=self.command, run_dir=str(self.out_dir))
        self._manifest = RunManifest(
            command=self.command,
            config=self.config,
            seeds=self.seeds,
            version=__version__,
        )
        self._started = time.perf_counter()
        logger.info("run_started")
        return self

    def __exit__(
        self,
        exc_type: Optional[Type[BaseException]],
        exc: Optional[BaseException],
        traceback: Optional[TracebackType],
    ) -> None:
        assert self._manifest is not None
        manifest = self._manifest.model_copy(
            update={
                "config": dict(self.config),
                "seeds": list(self.seeds),
                "artifacts": dict(self.artifacts),
                "wall_clock_seconds": time.perf_counter() - self._started,
            }
        )
        if isinstance(exc, PrerankcalError):
            manifest = manifest.model_copy(
                update={
                    "status": "failed",
                    "error": ErrorResponse(
                        error_code=exc.error_code,
                        message=exc.message,
                        details=exc.details,
                    ),
                }
            )
        elif exc is not None:
            return
        write_json(self.path(MANIFEST_NAME), manifest)
        logger.info("run_finished", status=manifest.status, seconds=manifest.wall_clock_seconds)


def resolve_source(
    args: argparse.Namespace, fallback: Optional[DataSource] = None
) -> Optional[DataSource]:
    """Data source from --data/--synth, else the fallback recorded by a run."""
    if args.data and args.synth:
        raise UsageError("--data and --synth are mutually exclusive")
    seed = getattr(args, "seed", 0)
    if args.data:
        return build_model(
            DataSource,
            csv_path=args.data,
            feature_prefix=args.feature_prefix,
            target_prefix=args.target_prefix,
        )
    if args.synth:
        kind, n = parse_synth_token(args.synth)
        return build_model(DataSource, synth_kind=kind, synth_n=n, synth_seed=seed)
    if fallback is not None:
        return fallback
    if getattr(args, "data_required", False):
        raise UsageError("One of --data or --synth is required")
    return None


def resolve_split(args: argparse.Namespace, fallback: Optional[SplitSpec] = None) -> SplitSpec:
    base = fallback or SplitSpec(seed=getattr(args, "seed", 0))
    fields: Dict[str, Any] = base.model_dump()
    if args.run_index is not None:
        fields["run_index"] = args.run_index
    if args.fractions is not None:
        if len(args.fractions) != 3:
            raise UsageError("--fractions needs three values")
        fields["fractions"] = tuple(args.fractions)
    return build_model(SplitSpec, **fields)


def load_source(source: DataSource) -> Dataset:
    if source.csv_path is not None:
        return load_csv(source.csv_path, source.feature_prefix, source.target_prefix)
    assert source.synth_kind is not None and source.synth_n is not None
    return synth(source.synth_kind, source.synth_n, source.synth_seed)


def read_run_config(run_dir: Path) -> Dict[str, Any]:
    path = run_dir / CONFIG_NAME
    if not path.exists():
        raise UsageError(f"No {CONFIG_NAME} in run directory {run_dir}")
    return json.loads(path.read_text(encoding="utf-8"))


def echo(**models: Optional[BaseModel]) -> Dict[str, Any]:
    """JSON-ready config echo of the given models."""
    return {
        name: model.model_dump(mode="json", by_alias=True)
        for name, model in models.items()
        if model is not None
    }
