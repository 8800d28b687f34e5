# SPDX-License-Identifier: GPL-3.0-or-later
"""
Oscillation detection, weight clustering and Welch's t-test.

A weight oscillates at step t when its quantized value changes and the
direction of that change is opposite to the direction of its previous change.
"""

import csv
import math
from collections import Counter
from dataclasses import dataclass, field
from enum import StrEnum
from pathlib import Path
from typing import TextIO

import numpy as np
import numpy.typing as npt
from scipy.special import betainc

from osclab.quantizer import QuantSpec, quantize
from osclab.tensor import ContractError, Matrix

CLUSTER_BUCKETS = 64
NEAR_THRESHOLD = 0.1


class OscillationMode(StrEnum):
    # Compare integer bin indices round(w / s).
    BINS = "bins"
    # Compare quantized values q(w) literally.
    VALUES = "values"


class StatisticsError(ValueError):
    pass


@dataclass
class OscillationTracker:
    last: np.ndarray | None = None
    # Sign of the last change per weight, 0 before the first change.
    direction: npt.NDArray[np.int8] | None = None
    counts: npt.NDArray[np.int64] | None = None
    samples: int = 0

    @property
    def shape(self) -> tuple[int, ...] | None:
        return None if self.last is None else self.last.shape

    def flat_counts(self) -> npt.NDArray[np.int64]:
        if self.counts is None:
            return np.zeros(0, dtype=np.int64)
        return self.counts.reshape(-1)


def observe(tracker: OscillationTracker, observation: np.ndarray) -> OscillationTracker:
    """Feeds one snapshot of bin indices (or quantized values) to the tracker."""
    if tracker.last is None:
        tracker.last = observation.copy()
        tracker.direction = np.zeros(observation.shape, dtype=np.int8)
        tracker.counts = np.zeros(observation.shape, dtype=np.int64)
        tracker.samples = 1
        return tracker

    assert tracker.direction is not None and tracker.counts is not None
    if observation.shape != tracker.last.shape:
        raise ContractError(
            f"Observation shape {observation.shape} differs from"
            f" tracked shape {tracker.last.shape}"
        )

    change = np.sign(observation - tracker.last).astype(np.int8)
    changed = change != 0
    reversed_ = changed & (tracker.direction != 0) & (change != tracker.direction)
    tracker.counts += reversed_
    tracker.direction = np.where(changed, change, tracker.direction)
    tracker.last = observation.copy()
    tracker.samples += 1
    return tracker


def oscillation_histogram(
    tracker: OscillationTracker,
) -> tuple[dict[int, int], float]:
    """
    Histogram of per-weight oscillation counts (only counts > 0) and the
    fraction of weights that oscillated at least once.
    """
    if tracker.samples < 2:
        raise ContractError("Oscillation histogram needs at least two observations")
    counts = tracker.flat_counts()
    oscillating = counts[counts > 0]
    histogram = dict(sorted(Counter(int(c) for c in oscillating).items()))
    return histogram, oscillating.size / counts.size


@dataclass(frozen=True)
class ClusterStats:
    # Mass of weights per position inside their bin; 0 and 1 are the lower
    # and upper threshold, 0.5 is the quantization level.
    histogram: list[float] = field(default_factory=list)
    near_threshold_fraction: float = 0.0
    scale: float = 0.0


def cluster_stats(
    weights: Matrix, spec: QuantSpec, scale: float | None = None
) -> ClusterStats:
    view = quantize(weights, spec, scale)
    s = view.scale
    d_low = weights - (view.values - s / 2)
    d_up = s - d_low
    position = np.clip(d_low / s, 0.0, 1.0).reshape(-1)
    bucket_counts, _ = np.histogram(position, bins=CLUSTER_BUCKETS, range=(0.0, 1.0))
    near = np.minimum(d_low, d_up) < NEAR_THRESHOLD * s
    return ClusterStats(
        histogram=(bucket_counts / position.size).tolist(),
        near_threshold_fraction=float(np.mean(near)),
        scale=s,
    )


@dataclass(frozen=True)
class WelchResult:
    t: float
    df: float
    p: float


def t_two_sided_p(t: float, df: float) -> float:
    """P(|T| >= |t|) for Student's t with ``df`` degrees of freedom."""
    return float(betainc(df / 2.0, 0.5, df / (df + t * t)))


def welch_t(a, b) -> WelchResult:
    """Welch's unequal-variance t-test, two-sided."""
    x = np.asarray(a, dtype=np.float64).reshape(-1)
    y = np.asarray(b, dtype=np.float64).reshape(-1)
    if x.size < 2 or y.size < 2:
        raise StatisticsError(
            f"Both samples need at least 2 values, got {x.size} and {y.size}"
        )
    var_x = float(np.var(x, ddof=1)) / x.size
    var_y = float(np.var(y, ddof=1)) / y.size
    if var_x == 0.0 and var_y == 0.0:
        raise StatisticsError("Both samples have zero variance")

    t = (float(np.mean(x)) - float(np.mean(y))) / math.sqrt(var_x + var_y)
    df = (var_x + var_y) ** 2 / (
        var_x**2 / (x.size - 1) + var_y**2 / (y.size - 1)
    )
    return WelchResult(t=t, df=df, p=t_two_sided_p(t, df))


OSCILLATION_LOG_HEADER = (
    "epoch",
    "layer",
    "weight_index",
    "bin_index",
    "cumulative_count",
)
HISTOGRAM_HEADER = ("bucket", "mass")


def write_oscillation_rows(
    writer, epoch: int, layer: int, bins: np.ndarray, tracker: OscillationTracker
) -> None:
    if bins.size != tracker.flat_counts().size:
        raise ContractError(
            f"Got {bins.size} bin indices for"
            f" {tracker.flat_counts().size} tracked weights"
        )
    for index, (value, count) in enumerate(
        zip(bins.reshape(-1).tolist(), tracker.flat_counts().tolist())
    ):
        writer.writerow((epoch, layer, index, value, count))


def write_histogram(file: TextIO, mass: dict | list) -> None:
    items = mass.items() if isinstance(mass, dict) else enumerate(mass)
    writer = csv.writer(file, lineterminator="\n")
    writer.writerow(HISTOGRAM_HEADER)
    for bucket, value in items:
        writer.writerow((bucket, repr(float(value))))


def write_histogram_file(path: Path, mass: dict | list) -> None:
    with open(path, "w", newline="") as f:
        write_histogram(f, mass)
