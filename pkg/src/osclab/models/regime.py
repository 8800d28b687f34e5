# SPDX-License-Identifier: GPL-3.0-or-later
from typing import Annotated, Literal

from pydantic import BaseModel, ConfigDict, Field

from osclab.quantizer import TERNARY_LABEL, QuantSpec

type Width = Literal["ternary"] | Annotated[int, Field(ge=2, le=16)]

WIDTH_DESCRIPTION = f'Quantizer width: number of bits (2-16) or "{TERNARY_LABEL}"'


class RegimeBase(BaseModel):
    """Base class for training regimes."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    def target_spec(self) -> QuantSpec | None:
        """Quantizer used inside training, None for full-precision training."""
        return None

    def tracking_spec(self) -> QuantSpec:
        """Quantizer used to observe oscillations and clustering."""
        raise NotImplementedError()


class Baseline(RegimeBase):
    """
    Plain full-precision training.

    Oscillations and clustering are still observed with respect to the
    "track_width" quantizer.
    """

    kind: Literal["baseline"] = "baseline"
    track_width: Width = Field(
        default=3, description=f"{WIDTH_DESCRIPTION}; used only for analytics"
    )

    def tracking_spec(self) -> QuantSpec:
        return QuantSpec.from_width(self.track_width)


class QAT(RegimeBase):
    """
    Quantization-aware training: fake-quantized forward pass, gradients
    passed straight through the quantizer to the latent weights.
    """

    kind: Literal["qat"] = "qat"
    width: Width = Field(description=WIDTH_DESCRIPTION)

    def target_spec(self) -> QuantSpec:
        return QuantSpec.from_width(self.width)

    def tracking_spec(self) -> QuantSpec:
        return self.target_spec()


class OscReg(RegimeBase):
    """
    Full-precision forward pass plus the oscillation-inducing regularizer
    (lam / 2) * sum over layers of mean(q(w)^2 - w^2).
    """

    kind: Literal["oscreg"] = "oscreg"
    width: Width = Field(description=WIDTH_DESCRIPTION)
    lam: float = Field(default=1.0, ge=0.0, description="Regularization strength")

    def target_spec(self) -> QuantSpec:
        return QuantSpec.from_width(self.width)

    def tracking_spec(self) -> QuantSpec:
        return self.target_spec()


type Regime = Annotated[Baseline | QAT | OscReg, Field(discriminator="kind")]
