# SPDX-License-Identifier: GPL-3.0-or-later
import csv
import logging
from collections.abc import Callable, Iterable, Sequence
from concurrent.futures import ProcessPoolExecutor
from functools import partial
from pathlib import Path
from typing import TextIO

import numpy as np
from opentelemetry import trace

from osclab.datasets import Dataset, Split, gen_blobs, load_idx
from osclab.models.config import (
    BlobsDataset,
    DatasetConfig,
    EvalWidth,
    ExperimentConfig,
    SweepConfig,
)
from osclab.models.parse_config import ConfigError, parse_manifest
from osclab.models.records import (
    Comparison,
    ConfigSummary,
    RunRecord,
    Summary,
    SweepReport,
)
from osclab.network import Model, init_model, mlp_layers, save_checkpoint
from osclab.oscillations import write_histogram_file, welch_t
from osclab.quantizer import QuantSpec, parse_width, width_label
from osclab.report import Report
from osclab.templates.template_manager import TemplateManager
from osclab.tensor import Matrix, NumericalError, Rng
from osclab.training import Scales, evaluate, train, width_scales

logger = logging.getLogger(__name__)
tracer = trace.get_tracer(__name__)

METRICS_HEADER = ("config_id", "seed", "eval_width", "accuracy")
EPOCHS_HEADER = (
    "epoch",
    "train_loss",
    "reg_value",
    "fp_val_accuracy",
    "target_val_accuracy",
)

RECORD_FILE = "record.json"
CHECKPOINT_FILE = "model.oscl"
OSCILLATION_LOG_FILE = "oscillations.csv"
METRICS_FILE = "metrics.csv"
EPOCHS_FILE = "epochs.csv"
OSCILLATION_HISTOGRAM_FILE = "oscillation_histogram.csv"
CLUSTER_HISTOGRAM_FILE = "cluster_histogram.csv"
REPORT_FILE = "report.json"
SUMMARY_FILE = "summary.md"


class PartialReportError(RuntimeError):
    def __init__(self, message: str, missing: list[str]):
        super().__init__(message)
        self.missing = missing


def build_dataset(config: DatasetConfig) -> Dataset:
    if isinstance(config, BlobsDataset):
        return gen_blobs(
            config.seed,
            config.num_classes,
            config.dims,
            config.per_class,
            config.spread,
            center_scale=config.center_scale,
        )
    manifest = parse_manifest(config.manifest)
    try:
        return load_idx(
            manifest.images, manifest.labels, split_seed=manifest.split_seed
        )
    except OSError as e:
        raise ConfigError(f"Cannot read IDX dataset: {e}")


def build_model(config: ExperimentConfig, data: Dataset) -> Model:
    layers = mlp_layers(
        data.dims,
        config.model.hidden,
        data.num_classes,
        activation=config.model.activation,
        unquantized_layers=config.model.unquantized_layers,
    )
    return init_model(layers, Rng(config.train.seed))


@tracer.start_as_current_span("cross_bit_eval")
def cross_bit_eval(
    model: Model,
    widths: Sequence[EvalWidth],
    x: Matrix,
    y: np.ndarray,
    *,
    tracking: QuantSpec | None = None,
    scales: Scales = None,
) -> dict[str, float]:
    """
    Accuracy of the model after PTQ at each width; "fp32" evaluates the
    latent weights directly. Frozen ``scales`` are used for the ``tracking``
    width, the other widths compute their scales from the weights.
    """
    result = {}
    for width in widths:
        spec = parse_width(width)
        frozen = None if tracking is None else width_scales(spec, tracking, scales)
        result[width_label(spec)] = evaluate(model, x, y, spec, frozen)
    return result


def run_dir(output_dir: Path, config_id: str, seed: int) -> Path:
    return output_dir / config_id / f"seed-{seed}"


def write_metrics(file: TextIO, records: Iterable[RunRecord]) -> None:
    writer = csv.writer(file, lineterminator="\n")
    writer.writerow(METRICS_HEADER)
    for record in records:
        for width, value in record.cross_bit.items():
            writer.writerow((record.config_id, record.seed, width, repr(value)))


def write_epochs(file: TextIO, record: RunRecord, widths: Sequence[str]) -> None:
    writer = csv.writer(file, lineterminator="\n")
    tracked = list(widths) if record.train.track_cross_bit else []
    writer.writerow((*EPOCHS_HEADER, *(f"val_{width}" for width in tracked)))
    for m in record.epochs:
        writer.writerow(
            (
                m.epoch,
                repr(m.train_loss),
                repr(m.reg_value),
                repr(m.fp_val_accuracy),
                repr(m.target_val_accuracy),
                *(repr(m.cross_bit_val[width]) for width in tracked),
            )
        )


@tracer.start_as_current_span("run_experiment")
def run_experiment(
    config: ExperimentConfig,
    *,
    config_id: str | None = None,
    output_dir: Path | None = None,
) -> RunRecord:
    """
    Trains one model, evaluates it at every configured width on the test
    split and persists the run directory.
    """
    config_id = config_id or config.name
    seed = config.train.seed
    directory = run_dir(output_dir or config.output_dir, config_id, seed)
    directory.mkdir(parents=True, exist_ok=True)
    logger.info("Running %s seed %d in %s", config_id, seed, directory)

    data = build_dataset(config.dataset)
    model = build_model(config, data)
    widths = [width_label(parse_width(w)) for w in config.eval_widths]

    if config.outputs.oscillation_log:
        with open(directory / OSCILLATION_LOG_FILE, "w", newline="") as log:
            record = train(
                model, data, config.train, eval_widths=widths, oscillation_log=log
            )
    else:
        record = train(model, data, config.train, eval_widths=widths)

    x_test, y_test = data.subset(Split.TEST)
    cross_bit = cross_bit_eval(
        model,
        config.eval_widths,
        x_test,
        y_test,
        tracking=config.train.regime.tracking_spec(),
        scales=record.scales if config.train.scale_frozen else None,
    )
    record = record.model_copy(
        update={
            "config_id": config_id,
            "experiment": config,
            "test_fp_accuracy": evaluate(model, x_test, y_test),
            "cross_bit": cross_bit,
            "metrics_csv": METRICS_FILE,
            "oscillation_log": (
                OSCILLATION_LOG_FILE if config.outputs.oscillation_log else None
            ),
            "checkpoint": CHECKPOINT_FILE if config.outputs.checkpoint else None,
        }
    )
    # Re-run validators on the completed record.
    record = RunRecord.model_validate(record.model_dump())

    if config.outputs.checkpoint:
        save_checkpoint(model, directory / CHECKPOINT_FILE)
    with open(directory / METRICS_FILE, "w", newline="") as f:
        write_metrics(f, [record])
    with open(directory / EPOCHS_FILE, "w", newline="") as f:
        write_epochs(f, record, widths)
    analysis = record.layer_oscillation(record.analysis_layer)
    if analysis is not None:
        write_histogram_file(directory / OSCILLATION_HISTOGRAM_FILE, analysis.histogram)
        write_histogram_file(
            directory / CLUSTER_HISTOGRAM_FILE, analysis.cluster_histogram
        )
    (directory / RECORD_FILE).write_text(record.model_dump_json(indent=2))

    logger.info(
        "Finished %s seed %d: %s",
        config_id,
        seed,
        ", ".join(f"{width} {value:.4f}" for width, value in cross_bit.items()),
    )
    return record


def load_record(path: Path | str) -> RunRecord:
    return RunRecord.model_validate_json(Path(path).read_text())


def load_records(directory: Path | str) -> list[RunRecord]:
    paths = sorted(Path(directory).rglob(RECORD_FILE))
    logger.info("Loading %d run records from %s", len(paths), directory)
    return [load_record(path) for path in paths]


def summarize(values: Sequence[float]) -> Summary:
    array = np.asarray(values, dtype=np.float64)
    std = float(np.std(array, ddof=1)) if array.size >= 2 else None
    return Summary(mean=float(np.mean(array)), std=std, n=int(array.size))


def summarize_config(config_id: str, records: list[RunRecord]) -> ConfigSummary:
    widths = list(dict.fromkeys(w for r in records for w in r.cross_bit))
    analysis = [r.layer_oscillation(r.analysis_layer) for r in records]
    layers = [x for x in analysis if x is not None]
    cross_bit = {}
    for width in widths:
        values = [r.cross_bit[width] for r in records if width in r.cross_bit]
        cross_bit[width] = summarize(values)
    return ConfigSummary(
        config_id=config_id,
        seeds=[r.seed for r in records],
        cross_bit=cross_bit,
        fraction_oscillating=(
            summarize([x.fraction_oscillating for x in layers]) if layers else None
        ),
        near_threshold_fraction=(
            summarize([x.near_threshold_fraction for x in layers]) if layers else None
        ),
    )


def aggregate(
    name: str,
    records: Iterable[RunRecord],
    comparisons: Sequence[tuple[str, str]] = (),
) -> SweepReport:
    """
    Per-config mean and standard deviation over seeds, and Welch's t-test
    between the pooled per-weight oscillation counts of config pairs.
    """
    by_config: dict[str, list[RunRecord]] = {}
    for record in records:
        by_config.setdefault(record.config_id, []).append(record)

    missing = sorted({x for pair in comparisons for x in pair} - set(by_config))
    if missing:
        raise PartialReportError(
            f"No runs for compared configs: {', '.join(missing)}", missing=missing
        )

    result = []
    for a, b in comparisons:
        counts_a = [c for r in by_config[a] for c in r.analysis_counts]
        counts_b = [c for r in by_config[b] for c in r.analysis_counts]
        welch = welch_t(counts_a, counts_b)
        logger.info(
            "Welch %s vs %s: t=%.3f df=%.1f p=%.3g", a, b, welch.t, welch.df, welch.p
        )
        result.append(
            Comparison(
                a=a,
                b=b,
                t=welch.t,
                df=welch.df,
                p=welch.p,
                n_a=len(counts_a),
                n_b=len(counts_b),
            )
        )

    return SweepReport(
        name=name,
        configs=[summarize_config(k, v) for k, v in by_config.items()],
        comparisons=result,
    )


def write_report(
    report: SweepReport, records: Sequence[RunRecord], directory: Path
) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    (directory / REPORT_FILE).write_text(report.model_dump_json(indent=2))
    with open(directory / METRICS_FILE, "w", newline="") as f:
        write_metrics(f, records)
    widths = list(dict.fromkeys(w for c in report.configs for w in c.cross_bit))
    summary = TemplateManager().render_file(
        "summary.md.j2", report=report, widths=widths
    )
    (directory / SUMMARY_FILE).write_text(summary)
    logger.info("Report written to %s", directory)


def print_report(report: SweepReport, printer: Report | None = None) -> Report:
    printer = printer or Report()
    for config in report.configs:
        with printer.section(config.config_id):
            printer.set("seeds", config.seeds)
            for width, summary in config.cross_bit.items():
                printer.set(width, summary.model_dump())
            if config.fraction_oscillating is not None:
                printer.set(
                    "fraction_oscillating", config.fraction_oscillating.model_dump()
                )
    for c in report.comparisons:
        with printer.section(f"{c.a} vs {c.b}"):
            printer.set("welch", {"t": c.t, "df": c.df, "p": c.p})
    return printer


def _run_job(job: tuple[str, ExperimentConfig, Path]) -> RunRecord:
    config_id, config, output_dir = job
    return run_experiment(config, config_id=config_id, output_dir=output_dir)


def _outcome(job, call: Callable[[], RunRecord]):
    try:
        return job, call(), None
    except NumericalError as e:
        return job, None, e


def sweep_jobs(
    sweep_config: SweepConfig, variants: dict[str, ExperimentConfig], output_dir: Path
) -> list[tuple[str, ExperimentConfig, Path]]:
    jobs = []
    for name, config in variants.items():
        for seed in sweep_config.seeds:
            train = config.train.model_copy(update={"seed": seed})
            jobs.append((name, config.model_copy(update={"train": train}), output_dir))
    return jobs


@tracer.start_as_current_span("sweep")
def sweep(
    sweep_config: SweepConfig,
    variants: dict[str, ExperimentConfig],
    *,
    output_dir: Path | None = None,
) -> SweepReport:
    """
    Runs every variant for every seed, then aggregates the records.

    Runs are independent; with more than one worker they execute in a
    process pool.
    """
    output_dir = output_dir or sweep_config.output_dir / sweep_config.name
    jobs = sweep_jobs(sweep_config, variants, output_dir / "runs")
    logger.info("Sweep %s: %d runs", sweep_config.name, len(jobs))

    if sweep_config.workers > 1:
        with ProcessPoolExecutor(max_workers=sweep_config.workers) as executor:
            futures = [executor.submit(_run_job, job) for job in jobs]
            outcomes = [
                _outcome(job, future.result) for job, future in zip(jobs, futures)
            ]
    else:
        outcomes = [_outcome(job, partial(_run_job, job)) for job in jobs]

    records: list[RunRecord] = []
    missing: list[str] = []
    for (config_id, config, _), record, error in outcomes:
        if record is not None:
            records.append(record)
        else:
            run = f"{config_id}/seed-{config.train.seed}"
            logger.error("Run %s failed: %s", run, error)
            missing.append(run)

    report = aggregate(sweep_config.name, records, sweep_config.comparisons)
    write_report(report, records, output_dir)
    if missing:
        raise PartialReportError(
            f"Sweep {sweep_config.name!r} is missing {len(missing)} runs:"
            f" {', '.join(missing)}",
            missing=missing,
        )
    return report
