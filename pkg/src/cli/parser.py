"""Argument parser for the prerankcal command line."""
import argparse
from typing import List

from src import __version__
from src.shared.config import get_settings


def _float_list(text: str) -> List[float]:
    try:
        return [float(item) for item in text.split(",") if item.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got '{text}'")


def _int_list(text: str) -> List[int]:
    try:
        return [int(item) for item in text.split(",") if item.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got '{text}'")


def _add_data_flags(parser: argparse.ArgumentParser, required: bool) -> None:
    group = parser.add_argument_group("data")
    group.add_argument("--data", help="CSV file with x_* feature and y_* target columns")
    group.add_argument("--synth", help="synthetic data as kind:n, e.g. linear_gaussian:2000")
    group.add_argument("--feature-prefix", default="x_", help="feature column prefix")
    group.add_argument("--target-prefix", default="y_", help="target column prefix")
    group.add_argument("--run-index", type=int, default=None, help="split run index (1-5)")
    group.add_argument(
        "--fractions",
        type=_float_list,
        default=None,
        help="train,val,test fractions (default 0.8,0.1,0.1)",
    )
    parser.set_defaults(data_required=required)


def _add_common_flags(parser: argparse.ArgumentParser) -> None:
    settings = get_settings()
    parser.add_argument("--seed", type=int, default=0, help="master seed")
    parser.add_argument(
        "--threads",
        type=int,
        default=None,
        help="worker threads (default: PRERANKCAL_THREADS, else machine parallelism)",
    )
    parser.add_argument("--samples", type=int, default=settings.samples, help="samples S per row")
    parser.add_argument("--grid-size", type=int, default=settings.grid_size, help="quantile grid M")
    parser.add_argument(
        "--temperature", type=float, default=settings.temperature, help="sigmoid temperature"
    )


def _add_training_flags(parser: argparse.ArgumentParser) -> None:
    settings = get_settings()
    parser.add_argument("--prerank", default="location", help="pre-rank token, e.g. location, marginal:2")
    parser.add_argument(
        "--compose",
        default="plain",
        choices=["plain", "marginal", "pca"],
        help="regularizer composition",
    )
    parser.add_argument("--lambda", dest="lam", type=float, default=0.0, help="regularization strength")
    parser.add_argument("--epochs", type=int, default=settings.max_epochs, help="epoch budget")
    parser.add_argument("--batch", type=int, default=settings.batch_size, help="mini-batch size")
    parser.add_argument("--lr", type=float, default=settings.learning_rate, help="Adam learning rate")
    parser.add_argument("--patience", type=int, default=settings.patience, help="early-stop patience")
    parser.add_argument("--components", type=int, default=settings.components, help="mixture components K")
    parser.add_argument(
        "--hidden", type=_int_list, default=list(settings.hidden_widths), help="hidden widths, e.g. 100,100,100"
    )
    parser.add_argument("--score", choices=["nll", "energy"], default="nll", help="training score")
    parser.add_argument("--p", type=float, default=1.0, help="PCE-KDE penalty exponent")
    parser.add_argument("--pca-threshold", type=float, default=0.8, help="explained variance for d*")
    parser.add_argument("--fixed-noise", action="store_true", help="reuse Gaussian draws every step")
    parser.add_argument(
        "--energy-samples", type=int, default=settings.energy_samples, help="samples G for energy scores"
    )


def build_parser() -> argparse.ArgumentParser:
    settings = get_settings()
    parser = argparse.ArgumentParser(
        prog="prerankcal",
        description="Pre-rank calibration of probabilistic multi-output regressors",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    commands = parser.add_subparsers(dest="command", required=True)

    train = commands.add_parser("train", help="train a mixture regressor")
    _add_data_flags(train, required=True)
    _add_common_flags(train)
    _add_training_flags(train)
    train.add_argument("--out", required=True, help="run directory")

    evaluate = commands.add_parser("evaluate", help="calibration report of a checkpoint")
    _add_data_flags(evaluate, required=False)
    _add_common_flags(evaluate)
    source = evaluate.add_mutually_exclusive_group(required=True)
    source.add_argument("--run", help="training run directory (checkpoint.json, config.json)")
    source.add_argument("--oracle", action="store_true", help="evaluate the true generator")
    evaluate.add_argument(
        "--preranks",
        default=None,
        help="comma-separated pre-rank tokens (default: all seven)",
    )
    evaluate.add_argument(
        "--n-sims", type=int, default=settings.null_simulations, help="null replicates (0 skips)"
    )
    evaluate.add_argument(
        "--energy-samples", type=int, default=settings.energy_samples, help="samples G"
    )
    evaluate.add_argument("--out", help="output directory (default: <run>/evaluation)")

    nulltest = commands.add_parser("nulltest", help="significance of observed PCE values")
    nulltest.add_argument(
        "--pit-file",
        action="append",
        default=[],
        help="CSV of PIT values, one column per pre-rank; repeat for a k-run mean",
    )
    nulltest.add_argument(
        "--report",
        action="append",
        default=[],
        help="report.json from evaluate; repeat for a k-run mean",
    )
    nulltest.add_argument("--n-sims", type=int, default=settings.null_simulations, help="null replicates")
    nulltest.add_argument("--grid-size", type=int, default=settings.grid_size, help="quantile grid M")
    nulltest.add_argument("--seed", type=int, default=0, help="null seed")
    nulltest.add_argument("--threads", type=int, default=None, help="worker threads")
    nulltest.add_argument("--out", required=True, help="output directory")

    tune = commands.add_parser("tune", help="select lambda under the energy-score budget")
    _add_data_flags(tune, required=True)
    _add_common_flags(tune)
    _add_training_flags(tune)
    tune.add_argument(
        "--grid", type=_float_list, default=list(settings.lambda_grid), help="lambda grid"
    )
    tune.add_argument("--out", required=True, help="output directory")

    compare = commands.add_parser(
        "compare", help="train none / pre-rank / marginal+ / pca+ variants and compare"
    )
    _add_data_flags(compare, required=True)
    _add_common_flags(compare)
    _add_training_flags(compare)
    compare.add_argument("--out", required=True, help="output directory")

    return parser
