# SPDX-License-Identifier: GPL-3.0-or-later
from pathlib import Path
from typing import Annotated, Literal

from pydantic import (
    BaseModel,
    ConfigDict,
    Field,
    field_validator,
    model_validator,
)

from osclab.models.regime import Regime
from osclab.network import Activation
from osclab.oscillations import OscillationMode
from osclab.quantizer import FP32_LABEL, TERNARY_LABEL
from osclab.utils import to_comma_separated

SCHEMA_VERSION = 1

type EvalWidth = Literal["ternary", "fp32"] | Annotated[int, Field(ge=2, le=16)]

DEFAULT_EVAL_WIDTHS: list[EvalWidth] = [TERNARY_LABEL, 3, 4, 8, FP32_LABEL]


def check_schema_version(value: int) -> int:
    if value != SCHEMA_VERSION:
        raise ValueError(
            f"Unsupported config version {value}, expected {SCHEMA_VERSION}"
        )
    return value


class StrictModel(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")


class BlobsDataset(StrictModel):
    """Gaussian blobs generated from a seed."""

    kind: Literal["blobs"] = "blobs"
    seed: int = Field(default=0, ge=0, description="Seed for centers, noise and splits")
    num_classes: int = Field(default=10, ge=1)
    dims: int = Field(default=64, ge=1)
    per_class: int = Field(default=500, ge=1)
    spread: float = Field(default=1.5, gt=0.0, description="Noise std per dimension")
    center_scale: float = Field(
        default=0.5, gt=0.0, description="Std of class centers per dimension"
    )


class IdxManifest(StrictModel):
    """Dataset manifest file listing IDX files and the split seed."""

    images: Path = Field(description="IDX image file (relative to the manifest)")
    labels: Path = Field(description="IDX label file (relative to the manifest)")
    split_seed: int = Field(default=0, ge=0)


class IdxDataset(StrictModel):
    """IDX image/label files listed in a manifest."""

    kind: Literal["idx"] = "idx"
    manifest: Path = Field(description="Path to the dataset manifest file")


type DatasetConfig = Annotated[BlobsDataset | IdxDataset, Field(discriminator="kind")]


class ModelConfig(StrictModel):
    hidden: list[Annotated[int, Field(ge=1)]] = Field(
        default_factory=lambda: [256] * 5,
        description="Hidden layer widths; input and output widths follow the data",
    )
    activation: Activation = Field(
        default=Activation.RELU, description="Hidden layer activation"
    )
    unquantized_layers: list[Annotated[int, Field(ge=0)]] = Field(
        default_factory=list, description="Indices of layers kept at full precision"
    )


class TrainConfig(StrictModel):
    regime: Regime = Field(description="Training regime: baseline, qat or oscreg")
    lr: float = Field(default=1e-3, gt=0.0, description="Adam learning rate")
    max_epochs: int = Field(default=100, ge=1)
    early_stop_patience: int = Field(
        default=10, ge=1, description="Epochs without improvement before stopping"
    )
    batch_size: int = Field(default=64, ge=1)
    seed: int = Field(
        default=0, ge=0, description="Run seed; all randomness derives from it"
    )
    scale_frozen: bool = Field(
        default=False,
        description="Fix each layer's scale at its initial value instead of"
        " recomputing it at every step",
    )
    track_every_step: bool = Field(
        default=False,
        description="Observe oscillations after every step, not every epoch",
    )
    oscillation_mode: OscillationMode = Field(
        default=OscillationMode.BINS,
        description="Compare bin indices (default) or quantized values",
    )
    track_cross_bit: bool = Field(
        default=False,
        description="Record validation accuracy at every eval width per epoch",
    )
    train_fraction: float = Field(
        default=1.0, gt=0.0, le=1.0, description="Fraction of the training split to use"
    )
    analysis_layer: int = Field(
        default=0,
        ge=0,
        description="Layer whose per-weight oscillation counts are kept",
    )
    beta1: float = Field(default=0.9, ge=0.0, lt=1.0)
    beta2: float = Field(default=0.999, ge=0.0, lt=1.0)
    adam_eps: float = Field(default=1e-8, gt=0.0)


class OutputConfig(StrictModel):
    oscillation_log: bool = Field(
        default=True,
        description="Write the per-epoch oscillation log of the analysis layer",
    )
    checkpoint: bool = Field(default=True, description="Write the model checkpoint")


class ExperimentConfig(StrictModel):
    version: int = Field(
        description="The version of the config schema."
        f" The latest version is {SCHEMA_VERSION}."
    )
    name: str = Field(default="experiment", description="Config identifier in reports")
    dataset: DatasetConfig = Field(default_factory=BlobsDataset)
    model: ModelConfig = Field(default_factory=ModelConfig)
    train: TrainConfig
    eval_widths: list[EvalWidth] = Field(
        default_factory=lambda: list(DEFAULT_EVAL_WIDTHS),
        description="Widths for cross-bit evaluation",
    )
    output_dir: Path = Field(default=Path("runs"), description="Root of run outputs")
    outputs: OutputConfig = Field(default_factory=OutputConfig)

    @field_validator("version")
    @classmethod
    def check_version(cls, value: int) -> int:
        return check_schema_version(value)

    @field_validator("eval_widths")
    @classmethod
    def check_unique_widths(cls, value: list) -> list:
        labels = [str(w) for w in value]
        if len(set(labels)) != len(labels):
            raise ValueError(f"Duplicate evaluation widths: {labels}")
        return value


class SweepConfig(StrictModel):
    version: int = Field(
        description="The version of the config schema."
        f" The latest version is {SCHEMA_VERSION}."
    )
    name: str = Field(default="sweep")
    base: dict = Field(description="Experiment config shared by all variants")
    variants: dict[str, dict] = Field(
        description="Named partial experiment configs merged into the base config"
    )
    seeds: list[Annotated[int, Field(ge=0)]] = Field(min_length=1)
    comparisons: list[tuple[str, str]] = Field(
        default_factory=list,
        description="Pairs of variants whose oscillation counts are compared"
        " with Welch's t-test",
    )
    workers: int = Field(default=1, ge=1, description="Runs executed in parallel")
    output_dir: Path = Field(default=Path("sweeps"))

    @field_validator("version")
    @classmethod
    def check_version(cls, value: int) -> int:
        return check_schema_version(value)

    @model_validator(mode="after")
    def check_comparisons(self) -> "SweepConfig":
        unknown = {
            name
            for pair in self.comparisons
            for name in pair
            if name not in self.variants
        }
        if unknown:
            raise ValueError(
                f"Comparisons reference unknown variants: {to_comma_separated(unknown)}"
            )
        return self
