# Copyright (C) 2025 Clyso
# SPDX-License-Identifier: AGPL-3.0-or-later

"""
Dense float64 substrate and seeded randomness.

Every matrix in the package is a row-major ``numpy`` float64 array. Stacks of
matrices (K×N×C prompt features, B×M×C feature sets) use the leading axes as
batch axes and the last two as rows/columns.

Randomness comes from a single generator algorithm, PCG64. Streams are
reproducible per seed within this implementation only.
"""

from __future__ import annotations

from typing import Any

import numpy as np
import numpy.typing as npt
from pydantic import BaseModel, ConfigDict

Mat = npt.NDArray[np.float64]
Vec64 = npt.NDArray[np.float64]
Rng = np.random.Generator

UNIT_NORM_TOLERANCE = 1e-6


class PlotError(ValueError):
    """Base class for errors raised by the plot library."""

    pass


class ShapeError(PlotError):
    """Raised when array dimensions do not line up."""

    pass


class ZeroNormError(PlotError):
    """Raised when a row that must be normalized has zero length."""

    def __init__(self, row: Any, what: str = "row") -> None:
        self.row = row
        super().__init__(f"zero-norm {what} {row}")


class NumericalError(PlotError):
    """Raised on NaN or otherwise non-finite intermediate values."""

    pass


class ArrayModel(BaseModel):
    """Base model for immutable containers that carry numpy arrays."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)


def as_array(x: Any, ndim: int | None = None, name: str = "array") -> Mat:
    a = np.asarray(x, dtype=np.float64)
    if ndim is not None and a.ndim != ndim:
        raise ShapeError(f"{name} must have {ndim} dimensions, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise NumericalError(f"{name} contains non-finite values")
    return a


def matmul(a: Mat, b: Mat) -> Mat:
    a = as_array(a, 2, "left operand")
    b = as_array(b, 2, "right operand")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(
            f"cannot multiply {a.shape[0]}x{a.shape[1]} by {b.shape[0]}x{b.shape[1]}"
        )
    return a @ b


def row_norms(m: Mat) -> Mat:
    return np.sqrt(np.sum(m * m, axis=-1))


def l2_normalize_rows(m: Mat) -> Mat:
    """Scale every row (last axis) to unit L2 norm.

    Works on plain matrices and on stacks; a zero row raises ``ZeroNormError``
    naming the row index (a tuple for stacks).
    """
    m = np.asarray(m, dtype=np.float64)
    norms = row_norms(m)
    zero = np.argwhere(norms == 0.0)
    if zero.size:
        index = tuple(int(i) for i in zero[0])
        raise ZeroNormError(index[0] if len(index) == 1 else index)
    return m / norms[..., None]


def check_unit_rows(m: Mat, name: str, tol: float = UNIT_NORM_TOLERANCE) -> None:
    deviation = np.abs(row_norms(m) - 1.0)
    if deviation.size and float(deviation.max()) > tol:
        bad = np.unravel_index(int(np.argmax(deviation)), deviation.shape)
        raise PlotError(
            f"{name} rows must be unit-norm: row {tuple(int(i) for i in bad)} "
            + f"deviates by {float(deviation.max()):.3g}"
        )


def logsumexp(x: Mat, axis: int = -1) -> Mat:
    peak = np.max(x, axis=axis, keepdims=True)
    out = np.log(np.sum(np.exp(x - peak), axis=axis, keepdims=True)) + peak
    return np.squeeze(out, axis=axis)


def softmax_temp(scores: Vec64, tau: float, axis: int = -1) -> Vec64:
    """Temperature softmax with max-subtraction; works along ``axis`` of a stack."""
    if not tau > 0:
        raise PlotError(f"temperature must be positive, got {tau}")
    z = np.asarray(scores, dtype=np.float64) / tau
    z = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def make_rng(seed: int) -> Rng:
    if not 0 <= seed < 2**64:
        raise PlotError(f"seed must be a 64-bit unsigned integer, got {seed}")
    return np.random.Generator(np.random.PCG64(seed))


def rng_gaussian(rng: Rng, n: int) -> Vec64:
    if n < 0:
        raise PlotError(f"cannot draw {n} samples")
    return rng.standard_normal(n)
