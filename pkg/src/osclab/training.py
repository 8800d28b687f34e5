# SPDX-License-Identifier: GPL-3.0-or-later
"""
Training regimes: full-precision baseline, quantization-aware training and
oscillation regularization, plus post-training quantization.
"""

import csv
import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass, field
from typing import TextIO

import numpy as np
from opentelemetry import trace

from osclab.datasets import Dataset, Split, take_fraction
from osclab.models.config import EvalWidth, TrainConfig
from osclab.models.records import EpochMetrics, LayerOscillation, RunRecord
from osclab.models.regime import QAT, OscReg
from osclab.network import (
    FULL_PRECISION,
    AdamState,
    FakeQuant,
    ForwardMode,
    Model,
    accuracy,
    adam_step,
    backward,
    forward,
    loss_softmax_ce,
)
from osclab.oscillations import (
    OSCILLATION_LOG_HEADER,
    OscillationMode,
    OscillationTracker,
    cluster_stats,
    observe,
    oscillation_histogram,
    write_oscillation_rows,
)
from osclab.quantizer import QuantSpec, parse_width, quantize, scale_factor, width_label
from osclab.tensor import (
    STREAM_SHUFFLE,
    STREAM_SUBSAMPLE,
    ContractError,
    Matrix,
    NumericalError,
    Rng,
    ensure_finite,
)

logger = logging.getLogger(__name__)
tracer = trace.get_tracer(__name__)

type Scales = Sequence[float | None] | None


def _scale(scales: Scales, layer: int) -> float | None:
    return None if scales is None else scales[layer]


def reg_value(
    model: Model, spec: QuantSpec, lam: float, scales: Scales = None
) -> float:
    """(lam / 2) * sum over quantized layers of mean(q(w)^2 - w^2)."""
    if lam < 0:
        raise ValueError(f"Regularization strength must be non-negative, got {lam}")
    total = 0.0
    for i in model.quantized_layers():
        w = model.weights[i]
        q = quantize(w, spec, _scale(scales, i)).values
        total += float(np.mean(q * q - w * w))
    return 0.5 * lam * total


def reg_grad(
    model: Model, spec: QuantSpec, lam: float, scales: Scales = None
) -> list[Matrix]:
    """
    STE gradient of the regularizer: (lam / n) * (q(w) - w) per quantized
    layer with n weights, zero for layers kept at full precision.
    """
    if lam < 0:
        raise ValueError(f"Regularization strength must be non-negative, got {lam}")
    grads = [np.zeros_like(w) for w in model.weights]
    for i in model.quantized_layers():
        w = model.weights[i]
        q = quantize(w, spec, _scale(scales, i)).values
        grads[i] = (lam / w.size) * (q - w)
    return grads


def ptq(model: Model, spec: QuantSpec, scales: Scales = None) -> Model:
    """Copy of the model with quantized layers replaced by q(w)."""
    result = model.copy()
    for i in model.quantized_layers():
        result.weights[i] = quantize(model.weights[i], spec, _scale(scales, i)).values
    return result


def evaluate(
    model: Model,
    x: Matrix,
    y: np.ndarray,
    spec: QuantSpec | None = None,
    scales: Scales = None,
) -> float:
    """Accuracy of the model, after PTQ at ``spec`` unless it is None."""
    if spec is not None:
        model = ptq(model, spec, scales)
    logits, _ = forward(model, x, FULL_PRECISION)
    return accuracy(logits, y)


def initial_scales(model: Model, spec: QuantSpec) -> tuple[float | None, ...]:
    quantized = set(model.quantized_layers())
    return tuple(
        scale_factor(w, spec) if i in quantized else None
        for i, w in enumerate(model.weights)
    )


@dataclass
class OscillationMonitor:
    """Per-layer trackers of the tracking quantizer's bin assignment."""

    spec: QuantSpec
    mode: OscillationMode
    layers: list[int]
    scales: Scales = None
    trackers: dict[int, OscillationTracker] = field(default_factory=dict)

    def __post_init__(self):
        self.trackers = {i: OscillationTracker() for i in self.layers}

    def observe(self, model: Model) -> None:
        for i, tracker in self.trackers.items():
            view = quantize(model.weights[i], self.spec, _scale(self.scales, i))
            if self.mode == OscillationMode.BINS:
                observe(tracker, view.bin_indices)
            else:
                observe(tracker, view.values)

    def write_log(self, writer, epoch: int, layer: int, model: Model) -> None:
        view = quantize(model.weights[layer], self.spec, _scale(self.scales, layer))
        tracker = self.trackers[layer]
        write_oscillation_rows(writer, epoch, layer, view.bin_indices, tracker)

    def summary(self, model: Model) -> list[LayerOscillation]:
        result = []
        for i, tracker in self.trackers.items():
            histogram, fraction = oscillation_histogram(tracker)
            scale = _scale(self.scales, i)
            clusters = cluster_stats(model.weights[i], self.spec, scale)
            result.append(
                LayerOscillation(
                    layer=i,
                    weights=int(tracker.flat_counts().size),
                    fraction_oscillating=fraction,
                    mean_count=float(np.mean(tracker.flat_counts())),
                    histogram=histogram,
                    near_threshold_fraction=clusters.near_threshold_fraction,
                    cluster_histogram=clusters.histogram,
                    scale=clusters.scale,
                )
            )
        return result


def _restore(model: Model, best: Model) -> None:
    model.weights[:] = [w.copy() for w in best.weights]
    model.biases[:] = [b.copy() for b in best.biases]
    model.touch()


def width_scales(spec: QuantSpec | None, tracking: QuantSpec, scales: Scales) -> Scales:
    """Frozen scales apply to the tracking width only."""
    return scales if spec == tracking else None


def _cross_bit_val(
    model: Model,
    x: Matrix,
    y: np.ndarray,
    widths: Sequence[EvalWidth],
    tracking: QuantSpec,
    scales: Scales,
) -> dict[str, float]:
    result = {}
    for width in widths:
        spec = parse_width(width)
        result[width_label(spec)] = evaluate(
            model, x, y, spec, width_scales(spec, tracking, scales)
        )
    return result


@tracer.start_as_current_span("train")
def train(
    model: Model,
    data: Dataset,
    config: TrainConfig,
    *,
    eval_widths: Sequence[EvalWidth] = (),
    oscillation_log: TextIO | None = None,
) -> RunRecord:
    """
    Trains ``model`` in place and restores the parameters of the best epoch.

    Early stopping watches the target-bit validation accuracy for QAT and
    oscillation regularization, full-precision accuracy for the baseline.
    """
    regime = config.regime
    rng = Rng(config.seed)
    x_train, y_train = data.subset(Split.TRAIN)
    x_val, y_val = data.subset(Split.VAL)
    if y_train.size == 0 or y_val.size == 0:
        raise ContractError(
            f"Training needs non-empty train and val splits,"
            f" got {y_train.size} and {y_val.size} examples"
        )
    x_train, y_train = take_fraction(
        x_train, y_train, config.train_fraction, rng.split(STREAM_SUBSAMPLE)
    )

    quantized = model.quantized_layers()
    if config.analysis_layer not in quantized:
        raise ContractError(
            f"Analysis layer {config.analysis_layer} is not a quantized layer"
            f" (quantized layers: {quantized})"
        )

    target = regime.target_spec()
    tracking = regime.tracking_spec()
    frozen = initial_scales(model, tracking) if config.scale_frozen else None
    mode: ForwardMode = (
        FakeQuant(tracking, frozen) if isinstance(regime, QAT) else FULL_PRECISION
    )
    lam = regime.lam if isinstance(regime, OscReg) else None
    optimizer = AdamState.for_model(
        model,
        config.lr,
        beta1=config.beta1,
        beta2=config.beta2,
        eps=config.adam_eps,
    )
    monitor = OscillationMonitor(
        spec=tracking, mode=config.oscillation_mode, layers=quantized, scales=frozen
    )
    writer = None
    if oscillation_log is not None:
        writer = csv.writer(oscillation_log, lineterminator="\n")
        writer.writerow(OSCILLATION_LOG_HEADER)

    monitor.observe(model)
    if writer is not None:
        monitor.write_log(writer, 0, config.analysis_layer, model)

    logger.info(
        "Training %s: %d examples, %d layers, seed %d",
        regime.kind,
        y_train.size,
        len(model.layers),
        config.seed,
    )

    epochs: list[EpochMetrics] = []
    best = model.copy()
    best_epoch = 0
    best_metric = -math.inf
    stale = 0
    stopped_early = False
    n = y_train.size
    for epoch in range(1, config.max_epochs + 1):
        order = rng.split(STREAM_SHUFFLE, epoch).permutation(n)
        loss_sum = 0.0
        reg_sum = 0.0
        batches = 0
        for start in range(0, n, config.batch_size):
            rows = order[start : start + config.batch_size]
            logits, cache = forward(model, x_train[rows], mode)
            loss, grad_logits = loss_softmax_ce(logits, y_train[rows])
            gradients = backward(model, cache, grad_logits, mode)
            reg = 0.0
            if lam is not None:
                reg = reg_value(model, tracking, lam, frozen)
                gradients.add_weight_terms(reg_grad(model, tracking, lam, frozen))
            if not math.isfinite(loss + reg):
                raise NumericalError(
                    f"Non-finite loss {loss + reg} at epoch {epoch},"
                    f" batch {batches + 1}"
                )
            adam_step(model, gradients, optimizer)
            if config.track_every_step:
                monitor.observe(model)
            loss_sum += loss
            reg_sum += reg
            batches += 1
            logger.debug("Epoch %d batch %d: loss %.6f", epoch, batches, loss)

        for i, w in enumerate(model.weights):
            ensure_finite(w, f"layer {i} weights after epoch {epoch}")
        if not config.track_every_step:
            monitor.observe(model)
        if writer is not None:
            monitor.write_log(writer, epoch, config.analysis_layer, model)

        fp_val = evaluate(model, x_val, y_val)
        target_val = evaluate(model, x_val, y_val, tracking, frozen)
        metrics = EpochMetrics(
            epoch=epoch,
            train_loss=loss_sum / batches,
            reg_value=reg_sum / batches,
            fp_val_accuracy=fp_val,
            target_val_accuracy=target_val,
            cross_bit_val=(
                _cross_bit_val(model, x_val, y_val, eval_widths, tracking, frozen)
                if config.track_cross_bit
                else {}
            ),
        )
        epochs.append(metrics)
        logger.info(
            "Epoch %d: loss %.6f, reg %.6f, val fp %.4f, val %s-bit %.4f",
            epoch,
            metrics.train_loss,
            metrics.reg_value,
            fp_val,
            tracking.label,
            target_val,
        )

        metric = fp_val if target is None else target_val
        if metric > best_metric:
            best_metric = metric
            best_epoch = epoch
            best = model.copy()
            stale = 0
        else:
            stale += 1
            if stale >= config.early_stop_patience:
                logger.warning(
                    "Stopping early after epoch %d: no improvement for %d epochs",
                    epoch,
                    stale,
                )
                stopped_early = True
                break

    if best_epoch != len(epochs):
        logger.warning("Restoring parameters of best epoch %d", best_epoch)
    _restore(model, best)

    analysis = monitor.trackers[config.analysis_layer]
    return RunRecord(
        seed=config.seed,
        train=config,
        activation=str(model.layers[0].activation),
        epochs=epochs,
        best_epoch=best_epoch,
        stopped_early=stopped_early,
        scales=[
            quantize(w, tracking, _scale(frozen, i)).scale if i in quantized else None
            for i, w in enumerate(model.weights)
        ],
        oscillation=monitor.summary(model),
        analysis_layer=config.analysis_layer,
        analysis_counts=analysis.flat_counts().tolist(),
    )
