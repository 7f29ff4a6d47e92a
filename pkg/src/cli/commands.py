"""
Command handlers. Each one writes its primary outputs and a manifest under
its output directory and raises ``PrerankcalError`` subclasses on handled
failures.
"""
import argparse
import json
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from src.calibration.data import Dataset, OraclePredictor, split
from src.calibration.evaluation import Evaluation, run_evaluation
from src.calibration.metrics import (
    NullDistribution,
    QuantileGrid,
    holm_correct,
    null_pce_distribution,
    p_value,
    pce,
)
from src.calibration.model import MixturePredictor, load_checkpoint, save_checkpoint
from src.calibration.training import train, tune_lambda
from src.cli.runs import (
    CONFIG_NAME,
    RunRecorder,
    build_model,
    echo,
    load_source,
    read_run_config,
    resolve_source,
    resolve_split,
    write_frame,
    write_json,
)
from src.shared.config import get_settings, resolve_threads
from src.shared.errors import DataFormatError, UsageError
from src.shared.logging import get_logger
from src.shared.validation.schemas import (
    CalibrationReport,
    Composition,
    DataSource,
    NetworkConfig,
    PreRankKind,
    PreRankReport,
    PreRankSpec,
    RegularizerConfig,
    ScoreKind,
    SplitSpec,
    TrainConfig,
    TrainHistory,
)

logger = get_logger(__name__)

CHECKPOINT_NAME = "checkpoint.json"
HISTORY_NAME = "history.csv"


def _positive(value: int, flag: str) -> int:
    if value < 1:
        raise UsageError(f"{flag} must be positive, got {value}")
    return value


def _configs(
    args: argparse.Namespace, data: Dataset
) -> Tuple[NetworkConfig, TrainConfig, RegularizerConfig]:
    settings = get_settings()
    network = build_model(
        NetworkConfig,
        input_dim=data.input_dim,
        output_dim=data.output_dim,
        components=args.components,
        hidden_widths=args.hidden,
        chol_floor=settings.chol_floor,
    )
    train_cfg = build_model(
        TrainConfig,
        learning_rate=args.lr,
        batch_size=args.batch,
        max_epochs=args.epochs,
        patience=args.patience,
        seed=args.seed,
        score=ScoreKind(args.score),
        energy_samples=args.energy_samples,
        eval_samples=args.samples,
        fixed_noise=args.fixed_noise,
    )
    reg = build_model(
        RegularizerConfig,
        lam=args.lam,
        prerank=PreRankSpec.parse(args.prerank),
        composition=Composition.from_token(args.compose),
        samples=args.samples,
        temperature=args.temperature,
        grid_size=args.grid_size,
        p=args.p,
        pca_threshold=args.pca_threshold,
    )
    reg.prerank.validate_for(data.output_dim)
    return network, train_cfg, reg


def _prepare(
    args: argparse.Namespace, recorder: RunRecorder
) -> Tuple[Dataset, Dataset, Dataset, NetworkConfig, TrainConfig, RegularizerConfig]:
    source = resolve_source(args)
    assert source is not None
    split_spec = resolve_split(args)
    recorder.config.update(echo(data=source, split=split_spec))
    train_set, val_set, test_set = split(load_source(source), split_spec)
    network, train_cfg, reg = _configs(args, train_set)
    recorder.config.update(echo(network=network, train=train_cfg, regularizer=reg))
    return train_set, val_set, test_set, network, train_cfg, reg


def history_frame(history: TrainHistory) -> pd.DataFrame:
    rows = []
    for record in history.epochs:
        row: Dict[str, Any] = {
            "epoch": record.epoch,
            "train_loss": record.train_loss,
            "val_score": record.val_score,
            "val_objective": record.val_objective,
        }
        row.update({f"val_pce_{label}": value for label, value in record.val_pce.items()})
        rows.append(row)
    return pd.DataFrame(rows)


def cmd_train(args: argparse.Namespace) -> Path:
    """Train a model and write checkpoint, history and config echo."""
    out = Path(args.out)
    with RunRecorder("train", out, {}, [args.seed]) as recorder:
        train_set, val_set, _, network, train_cfg, reg = _prepare(args, recorder)
        weights, history = train(
            network, train_cfg, reg, (train_set, val_set), threads=resolve_threads(args.threads)
        )
        recorder.artifact("config", write_json(recorder.path(CONFIG_NAME), recorder.config))
        recorder.artifact("checkpoint", save_checkpoint(weights, recorder.path(CHECKPOINT_NAME)))
        recorder.artifact("history", write_frame(recorder.path(HISTORY_NAME), history_frame(history)))
        logger.info("training_finished", best_epoch=history.best_epoch, epochs=len(history.epochs))
    return out


def _prerank_list(text: Optional[str]) -> Optional[List[PreRankSpec]]:
    if not text:
        return None
    return [PreRankSpec.parse(token) for token in text.split(",") if token.strip()]


def _write_evaluation(recorder: RunRecorder, evaluation: Evaluation) -> None:
    recorder.artifact("report", write_json(recorder.path("report.json"), evaluation.report))
    for entry in evaluation.report.preranks:
        frame = pd.DataFrame(entry.reliability, columns=["alpha", "empirical_cdf"])
        recorder.artifact(
            f"reliability_{entry.prerank}",
            write_frame(recorder.path(f"reliability_{entry.prerank}.csv"), frame),
        )
    pits = pd.DataFrame(evaluation.pit_columns())
    recorder.artifact("pits", write_frame(recorder.path("pits.csv"), pits))


def cmd_evaluate(args: argparse.Namespace) -> Path:
    """Calibration report of a trained run (or the oracle) on the test split."""
    if args.out:
        out = Path(args.out)
    elif args.run:
        out = Path(args.run) / "evaluation"
    else:
        raise UsageError("--out is required with --oracle")
    with RunRecorder("evaluate", out, {}, [args.seed]) as recorder:
        if args.n_sims < 0:
            raise UsageError("--n-sims must be nonnegative")
        run_config: Dict[str, Any] = read_run_config(Path(args.run)) if args.run else {}
        fallback_source = DataSource(**run_config["data"]) if "data" in run_config else None
        fallback_split = SplitSpec(**run_config["split"]) if "split" in run_config else None
        source = resolve_source(args, fallback_source)
        if source is None:
            raise UsageError("No data source: pass --data/--synth or a run with a config echo")
        split_spec = resolve_split(args, fallback_split)
        _, _, test_set = split(load_source(source), split_spec)

        if args.oracle:
            if test_set.generator is None:
                raise UsageError("--oracle needs synthetic data (--synth)")
            predictor: Any = OraclePredictor(test_set.generator, test_set.standardization)
        else:
            weights = load_checkpoint(Path(args.run) / CHECKPOINT_NAME)
            predictor = MixturePredictor(weights)
            if weights.config.output_dim != test_set.output_dim:
                raise DataFormatError("Checkpoint output dimension does not match the data")
            if weights.config.input_dim != test_set.input_dim:
                raise DataFormatError(
                    "Checkpoint input dimension does not match the data",
                    {"checkpoint": weights.config.input_dim, "data": test_set.input_dim},
                )

        recorder.config.update(echo(data=source, split=split_spec))
        recorder.config.update(
            {
                "oracle": bool(args.oracle),
                "run": args.run,
                "preranks": args.preranks,
                "n_sims": args.n_sims,
                "samples": args.samples,
                "grid_size": args.grid_size,
                "temperature": args.temperature,
            }
        )
        evaluation = run_evaluation(
            predictor,
            test_set.features,
            test_set.targets,
            _prerank_list(args.preranks),
            sample_count=_positive(args.samples, "--samples"),
            grid_size=_positive(args.grid_size, "--grid-size"),
            tau=args.temperature,
            seed=args.seed,
            n_sims=args.n_sims,
            energy_samples=_positive(args.energy_samples, "--energy-samples"),
            threads=resolve_threads(args.threads),
        )
        _write_evaluation(recorder, evaluation)
        print(summary_table(evaluation.report.preranks).to_string(index=False))
    return out


def summary_table(entries: List[PreRankReport]) -> pd.DataFrame:
    return pd.DataFrame(
        [
            {
                "prerank": entry.prerank,
                "pce": entry.pce,
                "p_value": entry.p_value,
                "holm_p": entry.holm_p,
                "null_mean": entry.null_mean,
                "null_q95": entry.null_q95,
            }
            for entry in entries
        ]
    )


def _observations_from_pits(paths: List[str], grid: QuantileGrid) -> Tuple[Dict[str, Any], int]:
    """Per-column PCE of each PIT file; columns and row counts must agree."""
    frames = []
    for path in paths:
        try:
            frames.append(pd.read_csv(path))
        except (FileNotFoundError, pd.errors.EmptyDataError, pd.errors.ParserError) as exc:
            raise DataFormatError(f"Cannot read PIT file {path}: {exc}") from exc
    columns = list(frames[0].columns)
    n_test = len(frames[0])
    for frame in frames[1:]:
        if list(frame.columns) != columns or len(frame) != n_test:
            raise DataFormatError("PIT files disagree on columns or row count")
    observed = {}
    for column in columns:
        try:
            values = [frame[column].to_numpy(dtype=np.float64) for frame in frames]
        except (TypeError, ValueError) as exc:
            raise DataFormatError(
                f"PIT column {column} has non-numeric values", {"column": column}
            ) from exc
        if any(np.any(~np.isfinite(v) | (v < 0.0) | (v > 1.0)) for v in values):
            raise DataFormatError(f"PIT column {column} has values outside [0, 1]")
        observed[column] = (float(np.mean([pce(v, grid) for v in values])), 1)
    return observed, n_test


def _observations_from_reports(paths: List[str]) -> Tuple[Dict[str, Any], int]:
    reports = []
    for path in paths:
        try:
            reports.append(CalibrationReport.model_validate(json.loads(Path(path).read_text())))
        except FileNotFoundError as exc:
            raise DataFormatError(f"Report not found: {path}") from exc
        except ValueError as exc:
            raise DataFormatError(f"Malformed report {path}: {exc}") from exc
    n_test = reports[0].n_test
    if any(report.n_test != n_test for report in reports):
        raise DataFormatError("Reports disagree on the number of test rows")
    labels = [entry.prerank for entry in reports[0].preranks]
    for path, report in zip(paths[1:], reports[1:]):
        missing = sorted(set(labels) ^ {entry.prerank for entry in report.preranks})
        if missing:
            raise DataFormatError(
                f"Report {path} disagrees with {paths[0]} on pre-ranks: {', '.join(missing)}",
                {"report": path, "preranks": missing},
            )
    observed = {}
    for entry in reports[0].preranks:
        matches = [report.get(entry.prerank) for report in reports]
        members = len(entry.components) if entry.components else 1
        observed[entry.prerank] = (float(np.mean([m.pce for m in matches])), members)
    return observed, n_test


def cmd_nulltest(args: argparse.Namespace) -> Path:
    """One-sided, Holm-adjusted significance of observed PCE values."""
    out = Path(args.out)
    with RunRecorder("nulltest", out, {}, [args.seed]) as recorder:
        if args.n_sims < 1:
            raise UsageError("--n-sims must be at least 1")
        if bool(args.pit_file) == bool(args.report):
            raise UsageError("Pass PIT files (--pit-file) or reports (--report), not both or neither")
        grid = QuantileGrid.uniform(_positive(args.grid_size, "--grid-size"))
        inputs = args.pit_file or args.report
        runs = len(inputs)
        if args.pit_file:
            observed, n_test = _observations_from_pits(args.pit_file, grid)
        else:
            observed, n_test = _observations_from_reports(args.report)
        recorder.config.update(
            {"inputs": inputs, "runs": runs, "n_sims": args.n_sims, "grid_size": args.grid_size}
        )

        threads = resolve_threads(args.threads)
        nulls: Dict[int, NullDistribution] = {}
        for _, members in observed.values():
            if members not in nulls:
                nulls[members] = null_pce_distribution(
                    n_test,
                    grid,
                    args.n_sims,
                    args.seed,
                    runs=runs,
                    components=members,
                    threads=threads,
                )
        labels = list(observed)
        p_values = [p_value(observed[label][0], nulls[observed[label][1]]) for label in labels]
        adjusted = holm_correct(p_values)
        entries = [
            PreRankReport(
                prerank=label,
                pce=observed[label][0],
                p_value=p_values[i],
                holm_p=float(adjusted[i]),
                components=None,
                null_mean=nulls[observed[label][1]].mean,
                null_q95=nulls[observed[label][1]].quantile(0.95),
            )
            for i, label in enumerate(labels)
        ]
        table = summary_table(entries)
        recorder.artifact("significance", write_frame(recorder.path("significance.csv"), table))
        recorder.artifact(
            "significance_json",
            write_json(
                recorder.path("significance.json"),
                {
                    "n_test": n_test,
                    "runs": runs,
                    "n_sims": args.n_sims,
                    "preranks": [entry.model_dump(mode="json") for entry in entries],
                },
            ),
        )
        print(table.to_string(index=False))
    return out


def cmd_tune(args: argparse.Namespace) -> Path:
    """Lambda selection with the energy-score budget audit trail."""
    out = Path(args.out)
    with RunRecorder("tune", out, {}, [args.seed]) as recorder:
        train_set, val_set, _, network, train_cfg, reg = _prepare(args, recorder)
        recorder.config["grid"] = list(args.grid)
        report = tune_lambda(
            args.grid, network, train_cfg, reg, (train_set, val_set), resolve_threads(args.threads)
        )
        recorder.artifact("tuning", write_json(recorder.path("tuning.json"), report))
        frame = pd.DataFrame(
            [
                {
                    "lambda": record.lam,
                    "val_pce": record.val_pce,
                    "val_energy": record.val_energy,
                    "val_nll": record.val_nll,
                    "energy_budget": report.energy_budget,
                    "within_budget": record.within_budget,
                    "selected": record.lam == report.selected_lambda,
                }
                for record in report.records
            ]
        )
        recorder.artifact("tuning_table", write_frame(recorder.path("tuning.csv"), frame))
        if report.degenerate_grid:
            logger.warning("degenerate_lambda_grid", grid=list(args.grid))
        print(frame.to_string(index=False))
    return out


COMPARE_VARIANTS = (
    ("none", Composition.PLAIN, False),
    ("prerank", Composition.PLAIN, True),
    ("marginal_plus", Composition.MARGINAL_PLUS, True),
    ("pca_plus", Composition.PCA_PLUS, True),
)


def cmd_compare(args: argparse.Namespace) -> Path:
    """Train the unregularized, plain, marginal+ and PCA+ variants and compare test PCE."""
    out = Path(args.out)
    with RunRecorder("compare", out, {}, [args.seed]) as recorder:
        train_set, val_set, test_set, network, train_cfg, reg = _prepare(args, recorder)
        if reg.lam == 0.0:
            logger.warning("compare_without_regularization")
        threads = resolve_threads(args.threads)
        marginal = PreRankSpec(kind=PreRankKind.MARGINAL)
        specs = [marginal] if reg.prerank.label == marginal.label else [marginal, reg.prerank]
        rows = []
        for name, composition, regularized in COMPARE_VARIANTS:
            variant = reg.model_copy(
                update={"composition": composition, "lam": reg.lam if regularized else 0.0}
            )
            weights, history = train(network, train_cfg, variant, (train_set, val_set), threads)
            save_checkpoint(weights, recorder.path(f"{name}/{CHECKPOINT_NAME}"))
            write_frame(recorder.path(f"{name}/{HISTORY_NAME}"), history_frame(history))
            report = run_evaluation(
                MixturePredictor(weights),
                test_set.features,
                test_set.targets,
                specs,
                sample_count=reg.samples,
                grid_size=reg.grid_size,
                tau=reg.temperature,
                seed=args.seed,
                energy_samples=train_cfg.energy_samples,
                threads=threads,
            ).report
            rows.append(
                {
                    "variant": name,
                    "marginal_pce": report.get(marginal.label).pce,
                    "prerank_pce": report.get(reg.prerank.label).pce,
                    "nll": report.nll,
                    "energy_score": report.energy_score,
                    "best_epoch": history.best_epoch,
                }
            )
        frame = pd.DataFrame(rows)
        recorder.artifact("comparison", write_frame(recorder.path("comparison.csv"), frame))
        print(frame.to_string(index=False))
    return out


COMMANDS = {
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "nulltest": cmd_nulltest,
    "tune": cmd_tune,
    "compare": cmd_compare,
}
