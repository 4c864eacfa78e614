"""Fixed-point codec between reals and the ring Z_{2^64}.

Ring tensors are plain ``numpy.ndarray`` objects of dtype ``uint64``; numpy's
unsigned arithmetic already wraps modulo 2**64, so addition, subtraction and
multiplication of ring tensors need no special handling.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import RangeOverflow

MODULUS_BITS = 64
RING_DTYPE = np.uint64


@dataclass(frozen=True)
class RingParams:
    frac_bits: int = 16
    comparison_bitlength: int = MODULUS_BITS
    modulus_bits: int = MODULUS_BITS

    def __post_init__(self):
        if self.modulus_bits != MODULUS_BITS:
            raise ValueError("only the 2**64 ring is supported")
        if not 1 <= self.frac_bits <= 32:
            raise ValueError(f"frac_bits must be in [1, 32], got {self.frac_bits}")
        if not 2 <= self.comparison_bitlength <= MODULUS_BITS:
            raise ValueError(f"comparison_bitlength must be in [2, 64], got {self.comparison_bitlength}")

    @property
    def scale(self) -> int:
        return 1 << self.frac_bits

    @property
    def max_value(self) -> float:
        """Exclusive upper bound of the representable real range."""
        return float(2 ** (MODULUS_BITS - 1 - self.frac_bits))


DEFAULT_PARAMS = RingParams()


def to_signed(t: np.ndarray) -> np.ndarray:
    return np.asarray(t, dtype=RING_DTYPE).view(np.int64)


def from_signed(t: np.ndarray) -> np.ndarray:
    return np.asarray(t, dtype=np.int64).view(RING_DTYPE)


def ring(values) -> np.ndarray:
    """Coerce python/numpy integers (any sign) into ring elements."""
    arr = np.asarray(values)
    if arr.dtype == RING_DTYPE:
        return arr.copy()
    if arr.dtype.kind in "iu":
        return arr.astype(np.int64).view(RING_DTYPE) if arr.dtype.kind == "i" else arr.astype(RING_DTYPE)
    # object arrays of python ints, possibly outside int64
    flat = [int(v) % (1 << MODULUS_BITS) for v in arr.ravel()]
    return np.array(flat, dtype=RING_DTYPE).reshape(arr.shape)


def encode(value, params: RingParams = DEFAULT_PARAMS, frac_bits: int | None = None) -> np.ndarray:
    """Encode reals as round(value * 2^f) in two's complement (half away from zero)."""
    f = params.frac_bits if frac_bits is None else frac_bits
    v = np.asarray(value, dtype=np.float64)
    limit = float(2 ** (MODULUS_BITS - 1 - f))
    if not np.all(np.isfinite(v)):
        raise RangeOverflow("non-finite value cannot be encoded")
    if v.size and (v.max() >= limit or v.min() < -limit):
        raise RangeOverflow(f"value outside representable range [-2^{63 - f}, 2^{63 - f})")
    scaled = np.sign(v) * np.floor(np.abs(v) * float(1 << f) + 0.5)
    if scaled.size and (scaled.max() >= 2.0**63 or scaled.min() < -(2.0**63)):
        raise RangeOverflow("value rounds outside the ring")
    return scaled.astype(np.int64).view(RING_DTYPE)


def decode(t: np.ndarray, params: RingParams = DEFAULT_PARAMS, frac_bits: int | None = None) -> np.ndarray:
    f = params.frac_bits if frac_bits is None else frac_bits
    return to_signed(t).astype(np.float64) / float(1 << f)


def shift_right(t: np.ndarray, bits: int) -> np.ndarray:
    """Arithmetic (sign-preserving) right shift of ring elements."""
    if bits == 0:
        return np.array(t, dtype=RING_DTYPE, copy=True)
    return (to_signed(t) >> np.int64(bits)).view(RING_DTYPE)


def truncate(t: np.ndarray, params: RingParams = DEFAULT_PARAMS) -> np.ndarray:
    """Rescale a product (precision 2f) back to precision f."""
    return shift_right(t, params.frac_bits)
