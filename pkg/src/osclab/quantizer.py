# SPDX-License-Identifier: GPL-3.0-or-later
"""
Uniform symmetric per-tensor weight quantizer.

The scale covers the whole range of the tensor, so there is no clamping:
s = max(|w|) / (2^(b-1) - 1) and q(w) = s * round(w / s), with ties rounded
half to even. A frozen scale may no longer cover the tensor, so bin
indices computed with a given scale are clipped to the available levels.
"""

from dataclasses import dataclass

import numpy as np

from osclab.tensor import IndexMatrix, Matrix, ShapeError

# Scale used for all-zero tensors; keeps q(0) = 0.
SCALE_FLOOR = 1e-8

FP32_LABEL = "fp32"
TERNARY_LABEL = "ternary"


@dataclass(frozen=True)
class QuantSpec:
    """Bit-width descriptor. Ternary is arithmetically the same as 2 bits."""

    bits: int
    ternary: bool = False

    def __post_init__(self):
        if self.bits < 2:
            raise ValueError(f"Quantizer needs at least 2 bits, got {self.bits}")
        if self.ternary and self.bits != 2:
            raise ValueError("Ternary quantizer must use 2 bits")

    @classmethod
    def from_width(cls, width: int | str) -> "QuantSpec":
        if width == TERNARY_LABEL:
            return cls(bits=2, ternary=True)
        if isinstance(width, str):
            if not width.isdigit():
                raise ValueError(f"Unknown quantization width: {width!r}")
            width = int(width)
        return cls(bits=width)

    @property
    def levels(self) -> int:
        """Number of positive quantization levels."""
        return 2 ** (self.bits - 1) - 1

    @property
    def label(self) -> str:
        return TERNARY_LABEL if self.ternary else str(self.bits)


def width_label(spec: QuantSpec | None) -> str:
    return FP32_LABEL if spec is None else spec.label


def parse_width(width: int | str) -> QuantSpec | None:
    """Parses an evaluation width; "fp32" means no quantization."""
    if width == FP32_LABEL:
        return None
    return QuantSpec.from_width(width)


@dataclass(frozen=True)
class QuantView:
    scale: float
    bin_indices: IndexMatrix
    values: Matrix


def scale_factor(w: Matrix, spec: QuantSpec) -> float:
    if w.size == 0:
        raise ShapeError("Cannot compute a scale factor for an empty tensor")
    max_abs = float(np.max(np.abs(w)))
    if max_abs == 0.0:
        return SCALE_FLOOR
    return max_abs / spec.levels


def quantize(w: Matrix, spec: QuantSpec, scale: float | None = None) -> QuantView:
    """
    Quantizes a tensor. A given ``scale`` is used as is (frozen scale) and the
    bin indices are clipped to the levels of ``spec``, otherwise the scale is
    computed from ``w``.
    """
    bin_indices: IndexMatrix
    if scale is None:
        scale = scale_factor(w, spec)
        bin_indices = np.rint(w / scale).astype(np.int64)
    elif w.size == 0:
        raise ShapeError("Cannot quantize an empty tensor")
    else:
        bin_indices = np.clip(
            np.rint(w / scale).astype(np.int64), -spec.levels, spec.levels
        )
    return QuantView(scale=scale, bin_indices=bin_indices, values=scale * bin_indices)


def quant_error(w: Matrix, spec: QuantSpec, scale: float | None = None) -> Matrix:
    return w - quantize(w, spec, scale).values


def threshold_distances(w: float, view: QuantView) -> tuple[float, float]:
    """
    Distances from ``w`` to the lower and upper threshold of its bin.

    Both lie in [0, s] and add up to s.
    """
    s = view.scale
    q = s * float(np.rint(w / s))
    d_low = w - (q - s / 2)
    d_up = (q + s / 2) - w
    return d_low, d_up
