"""Simulated uniform quantization: encodings, fake-quantize, BN folding.

The quantizer is asymmetric and per-tensor, with the integer grid [0, 2^b-1]
derived from the absolute min/max of the tensor (ranges are widened to
include zero so the zero-point is always exact). Values are rounded half to
even. Quantize-then-dequantize stays in floating point; nothing here is
differentiable and nothing needs to be, since only already-predicted
parameters and activations pass through it.
"""

from __future__ import annotations

import dataclasses
from typing import Union

import numpy as np

from .errors import QuantError
from .tensor import Tensor

FLOAT_BITWIDTH = 32  # sentinel: no quantization, plain float pipeline

TensorOrArray = Union[Tensor, np.ndarray]


@dataclasses.dataclass(frozen=True)
class QuantConfig:
    """Bitwidth and BN-fold epsilon; scheme/granularity/range are fixed."""

    bitwidth: int = 8
    eps_fold: float = 1e-5
    scheme: str = "asymmetric"
    granularity: str = "per_tensor"
    range_source: str = "absolute_minmax"

    def __post_init__(self):
        if self.bitwidth != FLOAT_BITWIDTH and not (2 <= self.bitwidth <= 8):
            raise QuantError(
                f"bitwidth must be in [2, 8] or {FLOAT_BITWIDTH} (float bypass), "
                f"got {self.bitwidth}")
        if self.eps_fold <= 0:
            raise QuantError("eps_fold must be positive")
        if self.scheme != "asymmetric":
            raise QuantError(f"only the asymmetric scheme is supported, got '{self.scheme}'")
        if self.granularity != "per_tensor":
            raise QuantError(f"only per_tensor granularity is supported, "
                             f"got '{self.granularity}'")
        if self.range_source != "absolute_minmax":
            raise QuantError(f"only absolute_minmax ranges are supported, "
                             f"got '{self.range_source}'")

    @property
    def is_bypass(self) -> bool:
        return self.bitwidth == FLOAT_BITWIDTH

    @property
    def qmin(self) -> int:
        return 0

    @property
    def qmax(self) -> int:
        return (1 << self.bitwidth) - 1


FLOAT_CONFIG = QuantConfig(bitwidth=FLOAT_BITWIDTH)


@dataclasses.dataclass(frozen=True)
class QuantEncoding:
    """Scale, zero-point and bitwidth of one uniform affine grid."""

    scale: float
    zero_point: int
    bitwidth: int

    def __post_init__(self):
        if self.scale <= 0:
            raise QuantError(f"scale must be positive, got {self.scale}")
        if not 2 <= self.bitwidth <= 8:
            raise QuantError(f"encoding bitwidth must be in [2, 8], got {self.bitwidth}")
        if not self.qmin <= self.zero_point <= self.qmax:
            raise QuantError(
                f"zero_point {self.zero_point} outside [{self.qmin}, {self.qmax}]")

    @property
    def qmin(self) -> int:
        return 0

    @property
    def qmax(self) -> int:
        return (1 << self.bitwidth) - 1

    def grid(self) -> np.ndarray:
        """All representable real values, ascending."""
        return (np.arange(self.qmax + 1, dtype=np.float64) - self.zero_point) * self.scale


def _as_array(t: TensorOrArray) -> np.ndarray:
    return t.data if isinstance(t, Tensor) else np.asarray(t)


def compute_encoding(t: TensorOrArray, bitwidth: int) -> QuantEncoding:
    """Uniform affine encoding from the absolute range of ``t``.

    The range is widened to include zero; an all-zero tensor falls back to
    scale 1, zero-point 0.
    """
    data = _as_array(t)
    if data.size == 0:
        raise QuantError("cannot compute an encoding for an empty tensor")
    if not np.isfinite(data).all():
        raise QuantError("cannot compute an encoding for non-finite values")
    rmin = min(0.0, float(data.min()))
    rmax = max(0.0, float(data.max()))
    if rmax == rmin:
        return QuantEncoding(scale=1.0, zero_point=0, bitwidth=bitwidth)
    qmax = (1 << bitwidth) - 1
    scale = (rmax - rmin) / qmax
    zero_point = int(np.clip(np.round(-rmin / scale), 0, qmax))
    return QuantEncoding(scale=scale, zero_point=zero_point, bitwidth=bitwidth)


def fake_quantize(t: TensorOrArray, enc: QuantEncoding) -> TensorOrArray:
    """Quantize-then-dequantize onto the encoding's grid.

    Idempotent bit-exactly, and maps 0.0 to 0.0 for every valid encoding.
    """
    data = _as_array(t)
    x = data.astype(np.float64, copy=False)
    q = np.clip(np.round(x / enc.scale) + enc.zero_point, enc.qmin, enc.qmax)
    out = ((q - enc.zero_point) * enc.scale).astype(data.dtype)
    if isinstance(t, Tensor):
        return Tensor(out, dtype=data.dtype)
    return out


def quantize_tensor(t: TensorOrArray, bitwidth: int) -> TensorOrArray:
    """Fake-quantize with an encoding computed from the tensor itself."""
    return fake_quantize(t, compute_encoding(t, bitwidth))


def bn_fold(weight: TensorOrArray, gamma: TensorOrArray,
            batch_var: TensorOrArray, eps: float) -> TensorOrArray:
    """Fold a BatchNorm's multiplicative factor into conv weights.

    ``w_fold[c, ...] = gamma[c] * w[c, ...] / sqrt(batch_var[c] + eps)``,
    matching output channel c of the convolution to BatchNorm channel c.
    """
    w = _as_array(weight)
    ga = _as_array(gamma).reshape(-1)
    var = _as_array(batch_var).reshape(-1)
    if ga.shape[0] != w.shape[0] or var.shape[0] != w.shape[0]:
        raise QuantError(
            f"channel mismatch: weight has {w.shape[0]} output channels, "
            f"gamma has {ga.shape[0]}, batch_var has {var.shape[0]}")
    if eps <= 0:
        raise QuantError("eps must be positive")
    if (var < 0).any():
        raise QuantError("batch variance must be non-negative")
    factor = (ga.astype(np.float64) / np.sqrt(var.astype(np.float64) + eps))
    shape = (w.shape[0],) + (1,) * (w.ndim - 1)
    out = (w.astype(np.float64) * factor.reshape(shape)).astype(w.dtype)
    if isinstance(weight, Tensor):
        return Tensor(out, dtype=w.dtype)
    return out
