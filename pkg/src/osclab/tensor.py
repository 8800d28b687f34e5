# SPDX-License-Identifier: GPL-3.0-or-later
"""
Dense 64-bit matrices and seeded random streams.

Every numeric value in the package is carried by a 2-D float64 numpy array
(``Matrix``). Randomness comes from PCG64 generators whose seeds are derived
with ``numpy.random.SeedSequence``, so a (seed, stream key) pair always
produces the same draws on every platform.
"""

from dataclasses import dataclass, field

import numpy as np
import numpy.typing as npt

type Matrix = npt.NDArray[np.float64]
type IndexMatrix = npt.NDArray[np.int64]

RNG_ALGORITHM = "PCG64 seeded by numpy SeedSequence(entropy=seed, spawn_key=stream)"

# Sub-stream keys, see Rng.split().
STREAM_INIT = 0
STREAM_SHUFFLE = 1
STREAM_DATA = 2
STREAM_SUBSAMPLE = 3


class ShapeError(ValueError):
    pass


class ContractError(RuntimeError):
    pass


class NumericalError(ArithmeticError):
    pass


def as_matrix(data, *, rows: int | None = None, cols: int | None = None) -> Matrix:
    """
    Converts nested sequences or arrays to a float64 matrix.

    Scalars and 1-D inputs become a single row.
    """
    matrix = np.array(data, dtype=np.float64, ndmin=2)
    if matrix.ndim != 2:
        raise ShapeError(f"Expected a 2-D matrix, got {matrix.ndim} dimensions")
    if rows is not None and matrix.shape[0] != rows:
        raise ShapeError(f"Expected {rows} rows, got {matrix.shape[0]}")
    if cols is not None and matrix.shape[1] != cols:
        raise ShapeError(f"Expected {cols} columns, got {matrix.shape[1]}")
    return matrix


def ensure_finite(matrix: Matrix, what: str) -> Matrix:
    if not np.all(np.isfinite(matrix)):
        raise NumericalError(f"Non-finite values in {what}")
    return matrix


def matmul(a: Matrix, b: Matrix) -> Matrix:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"Cannot multiply {a.shape} by {b.shape}")
    return np.matmul(a, b)


@dataclass
class Rng:
    """
    Seeded random stream.

    ``split(*keys)`` derives an independent child stream, e.g.
    ``rng.split(STREAM_INIT, layer)`` for the initialization of one layer.
    """

    seed: int
    stream: tuple[int, ...] = ()
    generator: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        if self.seed < 0:
            raise ValueError(f"Seed must be non-negative, got {self.seed}")
        sequence = np.random.SeedSequence(entropy=self.seed, spawn_key=self.stream)
        self.generator = np.random.Generator(np.random.PCG64(sequence))

    def split(self, *keys: int) -> "Rng":
        return Rng(self.seed, (*self.stream, *keys))

    def permutation(self, n: int) -> npt.NDArray[np.int64]:
        return self.generator.permutation(n)


def rand_normal(rng: Rng, rows: int, cols: int, mean: float, std: float) -> Matrix:
    if std < 0:
        raise ValueError(f"Standard deviation must be non-negative, got {std}")
    return rng.generator.normal(mean, std, size=(rows, cols))
