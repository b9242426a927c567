"""Two's-complement fixed point and the truncation test for the ReLU sign.

A value is nonnegative exactly when 0 appears among the logical right shifts
of its complement code (shift amounts 0 .. l_x - 1). Shifting a nonnegative
code eventually clears it because the sign bit is 0; a negative code keeps
its sign bit in view until the last tested shift. The derivation below
simulates the shifts explicitly instead of just reading the sign bit, so the
equivalence stays an observable fact rather than an assumption.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

NONNEGATIVE = "nonnegative"
NEGATIVE = "negative"


@dataclass(frozen=True)
class FixedPointFormat:
    """l_x-bit two's complement, split evenly into integer and fraction."""

    total_bits: int

    def __post_init__(self):
        if self.total_bits % 2:
            raise ValueError("total_bits must be even")
        if not 4 <= self.total_bits <= 32:
            raise ValueError("total_bits must lie in [4, 32]")

    @property
    def frac_bits(self) -> int:
        return self.total_bits // 2

    @property
    def int_bits(self) -> int:
        return self.total_bits // 2

    @property
    def raw_min(self) -> int:
        return -(1 << (self.total_bits - 1))

    @property
    def raw_max(self) -> int:
        return (1 << (self.total_bits - 1)) - 1

    @property
    def scale(self) -> int:
        return 1 << self.frac_bits


@dataclass(frozen=True)
class FixedValue:
    raw: int
    fmt: FixedPointFormat

    @property
    def value(self) -> float:
        return self.raw / self.fmt.scale

    @property
    def complement_code(self) -> int:
        """The raw pattern as an unsigned l_x-bit word."""
        return self.raw & ((1 << self.fmt.total_bits) - 1)


def quantize(x: float, fmt: FixedPointFormat) -> FixedValue:
    """Truncation quantizer: floor(x * 2^f), saturating at the raw range."""
    raw = int(np.floor(float(x) * fmt.scale))
    raw = min(max(raw, fmt.raw_min), fmt.raw_max)
    return FixedValue(raw=raw, fmt=fmt)


def quantize_array(x: np.ndarray, fmt: FixedPointFormat):
    """Vectorized quantizer. Returns (raw int64 array, saturated count)."""
    scaled = np.floor(np.asarray(x, dtype=np.float64) * fmt.scale)
    saturated = int(np.count_nonzero(
        (scaled < fmt.raw_min) | (scaled > fmt.raw_max)))
    raw = np.clip(scaled, fmt.raw_min, fmt.raw_max).astype(np.int64)
    return raw, saturated


def truncation_shares(v: FixedValue) -> list[int]:
    """The l_x logical right shifts of the complement code."""
    u = v.complement_code
    return [u >> k for k in range(v.fmt.total_bits)]


def truncation_sign(v: FixedValue) -> str:
    """Sign from shifts alone: nonnegative iff some share equals 0."""
    if any(s == 0 for s in truncation_shares(v)):
        return NONNEGATIVE
    return NEGATIVE


def _nonneg_by_shifts(raw: np.ndarray, fmt: FixedPointFormat) -> np.ndarray:
    """Vectorized share simulation over an int64 raw array."""
    mask = (1 << fmt.total_bits) - 1
    u = raw & mask
    nonneg = np.zeros(u.shape, dtype=bool)
    for k in range(fmt.total_bits):
        nonneg |= (u >> k) == 0
    return nonneg


class TruncatedReLU:
    """Activation slot: quantize the input, gate it by the truncation sign.

    Forward semantics are the contract; the gradient is the plain ReLU
    subgradient of the unquantized input (straight-through), since training
    never runs in this mode.
    """

    name = "truncated_relu"

    def __init__(self, fmt: FixedPointFormat):
        self.fmt = fmt
        self.saturated = 0
        self.total = 0

    def apply(self, z: np.ndarray) -> np.ndarray:
        raw, sat = quantize_array(z, self.fmt)
        self.saturated += sat
        self.total += int(np.prod(z.shape))
        nonneg = _nonneg_by_shifts(raw, self.fmt)
        return np.where(nonneg, raw / self.fmt.scale, 0.0)

    def grad(self, z: np.ndarray) -> np.ndarray:
        return (z > 0).astype(np.float64)

    def descriptor(self) -> dict:
        return {"kind": "truncated_relu", "total_bits": self.fmt.total_bits}

    def with_slot(self, index: int) -> "TruncatedReLU":
        return TruncatedReLU(self.fmt)  # fresh counters per slot

    def __repr__(self):
        return f"TruncatedReLU(l_x={self.fmt.total_bits})"


def truncated_relu_network_eval(net, x: np.ndarray, y: np.ndarray,
                                fmt: FixedPointFormat) -> float:
    """Accuracy of the network with every ReLU run through the truncation
    protocol; everything else stays in float64."""
    from .transform import transform  # deferred: transform imports this module

    swapped = transform(net, TruncatedReLU(fmt))
    from .nn import predict
    return float(np.mean(predict(swapped, x) == np.asarray(y)))
