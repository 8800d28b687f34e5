# SPDX-License-Identifier: GPL-3.0-or-later
from typing import Annotated

from pydantic import BaseModel, Field, model_validator

from osclab.models.config import SCHEMA_VERSION, ExperimentConfig, TrainConfig
from osclab.tensor import RNG_ALGORITHM

type Accuracy = Annotated[float, Field(ge=0.0, le=1.0)]


class EpochMetrics(BaseModel):
    epoch: int
    train_loss: float
    reg_value: float = 0.0
    fp_val_accuracy: Accuracy
    target_val_accuracy: Accuracy = Field(
        description="Validation accuracy after quantizing at the target"
        " (or tracking) width"
    )
    cross_bit_val: dict[str, Accuracy] = Field(default_factory=dict)


class LayerOscillation(BaseModel):
    layer: int
    weights: int
    fraction_oscillating: Accuracy
    mean_count: float
    histogram: dict[int, int] = Field(
        default_factory=dict, description="Oscillation count -> number of weights"
    )
    near_threshold_fraction: Accuracy
    cluster_histogram: list[float] = Field(default_factory=list)
    scale: float


class RunRecord(BaseModel):
    version: int = SCHEMA_VERSION
    config_id: str = ""
    seed: int
    train: TrainConfig
    experiment: ExperimentConfig | None = None
    rng: str = RNG_ALGORITHM
    activation: str
    epochs: list[EpochMetrics] = Field(default_factory=list)
    best_epoch: int
    stopped_early: bool = False
    scales: list[float | None] = Field(
        default_factory=list,
        description="Per-layer scale of the tracking quantizer at the best epoch",
    )
    oscillation: list[LayerOscillation] = Field(default_factory=list)
    analysis_layer: int = 0
    analysis_counts: list[int] = Field(
        default_factory=list,
        description="Per-weight oscillation counts of the analysis layer",
    )
    test_fp_accuracy: Accuracy | None = None
    cross_bit: dict[str, Accuracy] = Field(default_factory=dict)
    checkpoint: str | None = None
    oscillation_log: str | None = None
    metrics_csv: str | None = None

    @model_validator(mode="after")
    def check_cross_bit_widths(self) -> "RunRecord":
        if self.cross_bit and self.experiment is not None:
            expected = [str(w) for w in self.experiment.eval_widths]
            if list(self.cross_bit) != expected:
                raise ValueError(
                    f"Cross-bit row {list(self.cross_bit)} does not cover"
                    f" the configured widths {expected}"
                )
        return self

    def layer_oscillation(self, layer: int) -> LayerOscillation | None:
        return next((x for x in self.oscillation if x.layer == layer), None)


class Summary(BaseModel):
    mean: float
    std: float | None = Field(
        default=None, description="Sample standard deviation; only for 2+ seeds"
    )
    n: int


class ConfigSummary(BaseModel):
    config_id: str
    seeds: list[int]
    cross_bit: dict[str, Summary] = Field(default_factory=dict)
    fraction_oscillating: Summary | None = None
    near_threshold_fraction: Summary | None = None


class Comparison(BaseModel):
    a: str
    b: str
    t: float
    df: float
    p: float
    n_a: int
    n_b: int


class SweepReport(BaseModel):
    version: int = SCHEMA_VERSION
    name: str
    configs: list[ConfigSummary] = Field(default_factory=list)
    comparisons: list[Comparison] = Field(default_factory=list)

    def config(self, config_id: str) -> ConfigSummary:
        return next(x for x in self.configs if x.config_id == config_id)
