# SPDX-License-Identifier: GPL-3.0-or-later
"""
Exact simulators of the linear toy models used to explain QAT oscillations.

One weight:  prediction q(w) x, loss 0.5 (q(w) x - y)^2.
Two weights: prediction q(w2) q(w1) x.

The quantizer uses a fixed scale so that the bins do not follow the weight.
The quantization part of the loss, delta_L = L(q(w)) - L(w), splits into a
quadratic "oscillator" term and a linear "dampener" term.
"""

import csv
import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass, field, replace
from typing import TextIO

import numpy as np

from osclab.oscillations import OscillationTracker, observe
from osclab.tensor import NumericalError, as_matrix

logger = logging.getLogger(__name__)

DIVERGENCE_LIMIT = 1e3

TRAJECTORY_HEADER = ("step", "w", "q_w", "grad_fp", "grad_delta", "oscillation_flag")
TOY_SWEEP_HEADER = ("y", "lr", "mean_q_w", "oscillations")
TWO_WEIGHT_TRAJECTORY_HEADER = (
    "step",
    "w1",
    "w2",
    "q_w1",
    "q_w2",
    "prediction_q",
    "oscillator_1",
    "dampener_1",
    "oscillator_2",
    "dampener_2",
    "oscillation_flag",
)


class DivergenceError(NumericalError):
    pass


def q_fixed(w: float, scale: float) -> float:
    return scale * float(np.rint(w / scale))


@dataclass
class ToyState:
    w: float
    x: float
    y: float
    scale: float = 1.0
    lr: float = 0.05
    t: int = 0

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError(f"Toy scale must be positive, got {self.scale}")

    @property
    def q(self) -> float:
        return q_fixed(self.w, self.scale)


@dataclass
class TwoWeightState:
    w1: float
    w2: float
    x: float
    y: float
    scale: float = 1.0
    lr: float = 0.05
    t: int = 0

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError(f"Toy scale must be positive, got {self.scale}")

    @property
    def q1(self) -> float:
        return q_fixed(self.w1, self.scale)

    @property
    def q2(self) -> float:
        return q_fixed(self.w2, self.scale)


def loss(prediction: float, y: float) -> float:
    return 0.5 * (prediction - y) ** 2


def delta_loss(state: ToyState) -> tuple[float, float]:
    """(quadratic, linear) terms of L(q(w)) - L(w)."""
    q, w, x, y = state.q, state.w, state.x, state.y
    return 0.5 * x * x * (q * q - w * w), y * x * (w - q)


def fp_grad_1w(state: ToyState) -> float:
    return state.x * (state.w * state.x - state.y)


def qat_grad_1w(state: ToyState) -> float:
    """Backprop through the fake-quant forward with the STE."""
    return state.x * (state.q * state.x - state.y)


def ste_grad_delta_1w(state: ToyState) -> float:
    """STE gradient of delta_L: x^2 (q(w) - w) = -x^2 eps(w)."""
    return state.x * state.x * (state.q - state.w)


@dataclass(frozen=True)
class DeltaParts:
    oscillator: float
    dampener: float

    @property
    def total(self) -> float:
        return self.oscillator + self.dampener


@dataclass(frozen=True)
class TwoWeightDeltaGrad:
    g1: DeltaParts
    g2: DeltaParts


def delta_loss_2w(state: TwoWeightState) -> tuple[float, float]:
    q1, q2, w1, w2, x, y = state.q1, state.q2, state.w1, state.w2, state.x, state.y
    quadratic = 0.5 * x * x * ((q2 * q1) ** 2 - (w2 * w1) ** 2)
    linear = y * x * (w2 * w1 - q2 * q1)
    return quadratic, linear


def ste_grad_delta_2w(state: TwoWeightState) -> TwoWeightDeltaGrad:
    q1, q2, w1, w2, x, y = state.q1, state.q2, state.w1, state.w2, state.x, state.y
    xx, yx = x * x, y * x
    return TwoWeightDeltaGrad(
        g1=DeltaParts(
            oscillator=xx * (q2 * q2 * q1 - w2 * w2 * w1),
            dampener=yx * (w2 - q2),
        ),
        g2=DeltaParts(
            oscillator=xx * (q1 * q1 * q2 - w1 * w1 * w2),
            dampener=yx * (w1 - q1),
        ),
    )


def fp_grad_2w(state: TwoWeightState) -> tuple[float, float]:
    residual = state.w2 * state.w1 * state.x - state.y
    return state.x * state.w2 * residual, state.x * state.w1 * residual


def qat_grad_2w(state: TwoWeightState) -> tuple[float, float]:
    residual = state.q2 * state.q1 * state.x - state.y
    return state.x * state.q2 * residual, state.x * state.q1 * residual


@dataclass(frozen=True)
class ToyStep:
    step: int
    w: float
    q_w: float
    grad_fp: float
    grad_delta: float
    oscillation: bool


@dataclass(frozen=True)
class TwoWeightStep:
    step: int
    w1: float
    w2: float
    q_w1: float
    q_w2: float
    prediction_q: float
    delta: TwoWeightDeltaGrad
    oscillation: bool


@dataclass
class Trajectory[StepT]:
    steps: list[StepT] = field(default_factory=list)
    oscillations: int = 0


def _check_divergence(t: int, *weights: float) -> None:
    if any(not math.isfinite(w) or abs(w) > DIVERGENCE_LIMIT for w in weights):
        raise DivergenceError(
            f"Toy trajectory diverged at step {t}: weights {weights}"
            f" exceed {DIVERGENCE_LIMIT:g}"
        )


def simulate(state: ToyState, steps: int) -> Trajectory[ToyStep]:
    """
    Plain gradient descent on the one-weight model under the QAT gradient
    grad L(w) + x^2 (q(w) - w). Records the state before each update.
    """
    if steps < 1:
        raise ValueError(f"Number of steps must be positive, got {steps}")

    trajectory: Trajectory[ToyStep] = Trajectory()
    tracker = OscillationTracker()
    for _ in range(steps):
        before = int(tracker.flat_counts().sum())
        observe(tracker, np.rint(as_matrix(state.w) / state.scale))
        flag = bool(tracker.flat_counts().sum() > before)
        grad_fp = fp_grad_1w(state)
        grad_delta = ste_grad_delta_1w(state)
        trajectory.steps.append(
            ToyStep(state.t, state.w, state.q, grad_fp, grad_delta, flag)
        )
        state.w -= state.lr * (grad_fp + grad_delta)
        state.t += 1
        _check_divergence(state.t, state.w)

    trajectory.oscillations = int(tracker.flat_counts().sum())
    logger.debug(
        "Toy trajectory: %d steps, %d oscillations", steps, trajectory.oscillations
    )
    return trajectory


def simulate_two_weight(
    state: TwoWeightState, steps: int
) -> Trajectory[TwoWeightStep]:
    if steps < 1:
        raise ValueError(f"Number of steps must be positive, got {steps}")

    trajectory: Trajectory[TwoWeightStep] = Trajectory()
    tracker = OscillationTracker()
    for _ in range(steps):
        before = int(tracker.flat_counts().sum())
        observe(tracker, np.rint(as_matrix([state.w1, state.w2]) / state.scale))
        flag = bool(tracker.flat_counts().sum() > before)
        delta = ste_grad_delta_2w(state)
        fp1, fp2 = fp_grad_2w(state)
        trajectory.steps.append(
            TwoWeightStep(
                step=state.t,
                w1=state.w1,
                w2=state.w2,
                q_w1=state.q1,
                q_w2=state.q2,
                prediction_q=state.q2 * state.q1 * state.x,
                delta=delta,
                oscillation=flag,
            )
        )
        state.w1 -= state.lr * (fp1 + delta.g1.total)
        state.w2 -= state.lr * (fp2 + delta.g2.total)
        state.t += 1
        _check_divergence(state.t, state.w1, state.w2)

    trajectory.oscillations = int(tracker.flat_counts().sum())
    return trajectory


def mean_quantized(trajectory: Trajectory[ToyStep], last: int) -> float:
    """Time average of q(w) over the last ``last`` recorded steps."""
    tail = trajectory.steps[-last:]
    return sum(step.q_w for step in tail) / len(tail)


@dataclass(frozen=True)
class ToySweepPoint:
    y: float
    lr: float
    mean_q_w: float
    oscillations: int


def sweep_toy(
    base: ToyState, targets: Sequence[float], rates: Sequence[float], steps: int
) -> list[ToySweepPoint]:
    """
    Simulates the one-weight model for every (target, learning rate) pair,
    each from the initial state of ``base``. The mean of q(w) is taken over
    the second half of each trajectory.
    """
    last = max(1, steps // 2)
    points = []
    for y in targets:
        for lr in rates:
            trajectory = simulate(replace(base, y=y, lr=lr, t=0), steps)
            points.append(
                ToySweepPoint(
                    y=y,
                    lr=lr,
                    mean_q_w=mean_quantized(trajectory, last),
                    oscillations=trajectory.oscillations,
                )
            )
    logger.info("Toy sweep: %d trajectories of %d steps", len(points), steps)
    return points


def write_toy_sweep(file: TextIO, points: Sequence[ToySweepPoint]) -> None:
    writer = csv.writer(file, lineterminator="\n")
    writer.writerow(TOY_SWEEP_HEADER)
    for p in points:
        writer.writerow((repr(p.y), repr(p.lr), repr(p.mean_q_w), p.oscillations))


def write_trajectory(file: TextIO, trajectory: Trajectory[ToyStep]) -> None:
    writer = csv.writer(file, lineterminator="\n")
    writer.writerow(TRAJECTORY_HEADER)
    for s in trajectory.steps:
        writer.writerow(
            (
                s.step,
                repr(s.w),
                repr(s.q_w),
                repr(s.grad_fp),
                repr(s.grad_delta),
                int(s.oscillation),
            )
        )


def write_two_weight_trajectory(
    file: TextIO, trajectory: Trajectory[TwoWeightStep]
) -> None:
    writer = csv.writer(file, lineterminator="\n")
    writer.writerow(TWO_WEIGHT_TRAJECTORY_HEADER)
    for s in trajectory.steps:
        writer.writerow(
            (
                s.step,
                repr(s.w1),
                repr(s.w2),
                repr(s.q_w1),
                repr(s.q_w2),
                repr(s.prediction_q),
                repr(s.delta.g1.oscillator),
                repr(s.delta.g1.dampener),
                repr(s.delta.g2.oscillator),
                repr(s.delta.g2.dampener),
                int(s.oscillation),
            )
        )
