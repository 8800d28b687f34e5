#!/usr/bin/env python3
# SPDX-License-Identifier: GPL-3.0-or-later
import argparse
import logging
import sys
from contextlib import contextmanager
from pathlib import Path

from osclab import __doc__ as doc
from osclab import __version__
from osclab.datasets import IdxFormatError, Split
from osclab.models.generate_schema import generate_schema
from osclab.models.parse_config import ConfigError, parse_config, parse_sweep_config
from osclab.network import CheckpointFormatError, load_checkpoint
from osclab.osclab_logging import init_logging
from osclab.oscillations import StatisticsError
from osclab.run import (
    RECORD_FILE,
    PartialReportError,
    aggregate,
    build_dataset,
    cross_bit_eval,
    load_record,
    load_records,
    print_report,
    run_experiment,
    sweep,
    write_report,
)
from osclab.tensor import NumericalError, ShapeError
from osclab.toy_models import (
    ToyState,
    TwoWeightState,
    mean_quantized,
    simulate,
    simulate_two_weight,
    sweep_toy,
    write_toy_sweep,
    write_trajectory,
    write_two_weight_trajectory,
)
from osclab.tracing import init_tracing

logger = logging.getLogger(__name__)

EXIT_FAILURE = 1
EXIT_CONFIG_ERROR = 2
EXIT_NUMERICAL_ERROR = 3

# Command line flag -> dotted config key
TRAIN_OVERRIDES = {
    "seed": "train.seed",
    "lr": "train.lr",
    "max_epochs": "train.max_epochs",
    "patience": "train.early_stop_patience",
    "batch_size": "train.batch_size",
    "scale_frozen": "train.scale_frozen",
    "track_every_step": "train.track_every_step",
    "oscillation_mode": "train.oscillation_mode",
    "track_cross_bit": "train.track_cross_bit",
    "train_fraction": "train.train_fraction",
    "analysis_layer": "train.analysis_layer",
    "regime": "train.regime.kind",
    "width": "train.regime.width",
    "track_width": "train.regime.track_width",
    "lam": "train.regime.lam",
    "output_dir": "output_dir",
}


def width_arg(value: str) -> int | str:
    return int(value) if value.isdigit() else value


def comparison_arg(value: str) -> tuple[str, str]:
    a, sep, b = value.partition(":")
    if not sep or not a or not b:
        raise argparse.ArgumentTypeError(f"Expected A:B, got {value!r}")
    return a, b


def add_train_arguments(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("overrides of the config file")
    group.add_argument("--seed", type=int)
    group.add_argument("--lr", type=float)
    group.add_argument("--max-epochs", type=int)
    group.add_argument("--patience", type=int, help="Early stopping patience")
    group.add_argument("--batch-size", type=int)
    group.add_argument(
        "--scale-frozen",
        action=argparse.BooleanOptionalAction,
        help="Keep each layer's initial quantizer scale",
    )
    group.add_argument("--track-every-step", action=argparse.BooleanOptionalAction)
    group.add_argument("--oscillation-mode", choices=("bins", "values"))
    group.add_argument("--track-cross-bit", action=argparse.BooleanOptionalAction)
    group.add_argument("--train-fraction", type=float)
    group.add_argument("--analysis-layer", type=int)
    group.add_argument("--regime", choices=("baseline", "qat", "oscreg"))
    group.add_argument("--width", type=width_arg, help='Bits or "ternary"')
    group.add_argument("--track-width", type=width_arg, help='Bits or "ternary"')
    group.add_argument("--lam", type=float, help="Regularization strength")
    group.add_argument("--output-dir", type=str)


def train_overrides(args: argparse.Namespace) -> dict[str, object]:
    return {
        key: getattr(args, name)
        for name, key in TRAIN_OVERRIDES.items()
        if getattr(args, name) is not None
    }


def parse_args(argv=None):
    parser = argparse.ArgumentParser(description=doc)
    parser.add_argument(
        "-v", "--version", action="version", version=f"%(prog)s {__version__}"
    )
    parser.add_argument(
        "--log-level",
        choices=("DEBUG", "INFO", "WARNING", "ERROR"),
        help="Level of the osclab loggers (default from the logging config)",
    )

    subparsers = parser.add_subparsers(dest="command")

    toy_parser = subparsers.add_parser(
        "toy", help="Simulate the linear toy model and write its trajectory CSV"
    )
    toy_parser.add_argument("--x", type=float, default=1.0, help="Input")
    toy_parser.add_argument("--y", type=float, default=0.75, help="Target")
    toy_parser.add_argument("--scale", type=float, default=1.0, help="Fixed scale")
    toy_parser.add_argument("--lr", type=float, default=0.05)
    toy_parser.add_argument("--w0", type=float, default=0.3, help="Initial weight")
    toy_parser.add_argument("--steps", type=int, default=2000)
    toy_parser.add_argument(
        "--two-weight",
        action="store_true",
        help="Simulate the two-weight model q(w2) q(w1) x instead",
    )
    toy_parser.add_argument(
        "--w2", type=float, default=1.0, help="Initial second weight"
    )
    toy_parser.add_argument(
        "--sweep-y",
        type=float,
        nargs="+",
        metavar="Y",
        help="Sweep the one-weight model over these targets",
    )
    toy_parser.add_argument(
        "--sweep-lr",
        type=float,
        nargs="+",
        metavar="LR",
        help="Sweep the one-weight model over these learning rates",
    )
    toy_parser.add_argument(
        "-o", "--output", type=str, help="Trajectory CSV file (default is stdout)"
    )

    train_parser = subparsers.add_parser("train", help="Run one experiment")
    train_parser.add_argument("config", type=str, help="Experiment config file")
    add_train_arguments(train_parser)

    crossbit_parser = subparsers.add_parser(
        "crossbit", help="Evaluate a checkpoint at several widths"
    )
    crossbit_parser.add_argument("checkpoint", type=str)
    crossbit_parser.add_argument(
        "-c", "--config", type=str, required=True, help="Experiment config file"
    )
    crossbit_parser.add_argument(
        "--widths",
        type=width_arg,
        nargs="+",
        help="Evaluation widths (default from the config)",
    )
    crossbit_parser.add_argument(
        "--split", choices=[str(s) for s in Split], default=str(Split.TEST)
    )

    sweep_parser = subparsers.add_parser(
        "sweep", help="Run a config x seed matrix and compare oscillation counts"
    )
    sweep_parser.add_argument("config", type=str, help="Sweep config file")
    sweep_parser.add_argument("--workers", type=int)
    sweep_parser.add_argument("--output-dir", type=str)

    report_parser = subparsers.add_parser(
        "report", help="Aggregate run records found under a directory"
    )
    report_parser.add_argument("runs", type=str, help="Directory with run records")
    report_parser.add_argument(
        "--compare",
        type=comparison_arg,
        action="append",
        default=[],
        metavar="A:B",
        help="Compare oscillation counts of two configs (repeatable)",
    )
    report_parser.add_argument("--name", type=str, default="report")
    report_parser.add_argument(
        "-o", "--output", type=str, help="Report directory (default is the runs one)"
    )

    generate_parser = subparsers.add_parser(
        "generate-schema", help="Generate YAML or JSON schema"
    )
    generate_parser.add_argument(
        "schema_file",
        type=str,
        nargs="?",
        help="Output schema YAML or JSON file to generate (default is stdout)",
    )
    generate_parser.add_argument(
        "-j",
        "--json",
        help="Generate JSON instead of the default YAML",
        action="store_true",
    )
    generate_parser.add_argument(
        "-s",
        "--sweep",
        help="Generate schema for sweep configs instead of experiment configs",
        action="store_true",
    )

    return parser.parse_args(argv)


@contextmanager
def output_file(path: str | None):
    if path is None:
        yield sys.stdout
    else:
        with open(path, "w", newline="") as f:
            yield f


def run_toy(args) -> None:
    if args.steps < 1 or not args.scale > 0:
        raise ConfigError("Toy model needs --steps >= 1 and --scale > 0")
    sweeping = args.sweep_y is not None or args.sweep_lr is not None
    if sweeping and args.two_weight:
        raise ConfigError("Toy sweeps support only the one-weight model")
    if sweeping:
        base = ToyState(w=args.w0, x=args.x, y=args.y, scale=args.scale, lr=args.lr)
        points = sweep_toy(
            base, args.sweep_y or [args.y], args.sweep_lr or [args.lr], args.steps
        )
        with output_file(args.output) as f:
            write_toy_sweep(f, points)
        return
    if args.two_weight:
        state = TwoWeightState(
            w1=args.w0, w2=args.w2, x=args.x, y=args.y, scale=args.scale, lr=args.lr
        )
        trajectory = simulate_two_weight(state, args.steps)
        with output_file(args.output) as f:
            write_two_weight_trajectory(f, trajectory)
    else:
        one = ToyState(w=args.w0, x=args.x, y=args.y, scale=args.scale, lr=args.lr)
        trajectory = simulate(one, args.steps)
        with output_file(args.output) as f:
            write_trajectory(f, trajectory)
        logger.info(
            "Mean q(w) over the last %d steps: %.6f",
            max(1, args.steps // 2),
            mean_quantized(trajectory, max(1, args.steps // 2)),
        )
    logger.info("Oscillations: %d", trajectory.oscillations)


def run_crossbit(args) -> None:
    config = parse_config(args.config)
    try:
        model = load_checkpoint(args.checkpoint)
    except (OSError, CheckpointFormatError) as e:
        raise ConfigError(f"Cannot load checkpoint {args.checkpoint!r}: {e}")
    scales = None
    record_path = Path(args.checkpoint).with_name(RECORD_FILE)
    if config.train.scale_frozen and record_path.is_file():
        scales = load_record(record_path).scales
        logger.info("Using frozen scales from %s", record_path)
    data = build_dataset(config.dataset)
    x, y = data.subset(Split(args.split))
    try:
        result = cross_bit_eval(
            model,
            args.widths or config.eval_widths,
            x,
            y,
            tracking=config.train.regime.tracking_spec(),
            scales=scales,
        )
    except (ShapeError, ValueError) as e:
        raise ConfigError(f"Cannot evaluate {args.checkpoint!r}: {e}")
    for width, value in result.items():
        print(f"{width}: {value}")


def run_report(args) -> None:
    records = load_records(args.runs)
    report = aggregate(args.name, records, args.compare)
    write_report(report, records, Path(args.output or args.runs))
    print_report(report)


def run_command(args) -> None:
    if args.command == "toy":
        run_toy(args)
    elif args.command == "train":
        config = parse_config(args.config, train_overrides(args))
        run_experiment(config)
    elif args.command == "crossbit":
        run_crossbit(args)
    elif args.command == "sweep":
        overrides = {"workers": args.workers} if args.workers is not None else {}
        sweep_config, variants = parse_sweep_config(args.config, overrides)
        output_dir = Path(args.output_dir) if args.output_dir else None
        print_report(sweep(sweep_config, variants, output_dir=output_dir))
    elif args.command == "report":
        run_report(args)
    elif args.command == "generate-schema":
        generate_schema(args.schema_file, output_json=args.json, sweep=args.sweep)


def main(argv=None):
    args = parse_args(argv)
    init_logging(args.log_level)
    init_tracing()

    try:
        run_command(args)
    except (ConfigError, IdxFormatError) as e:
        print(f"Configuration error: {e}", file=sys.stderr)
        sys.exit(EXIT_CONFIG_ERROR)
    except NumericalError as e:
        print(f"Numerical error: {e}", file=sys.stderr)
        sys.exit(EXIT_NUMERICAL_ERROR)
    except (PartialReportError, StatisticsError) as e:
        print(f"Report failed: {e}", file=sys.stderr)
        sys.exit(EXIT_FAILURE)
    sys.exit(0)
