"""Power-of-two fixed-point representation.

A real value r is stored as an integer together with a fractional-bit
count f; the value represented is int * 2**-f.  Because every scale is a
power of two, all conversions reduce to shifts, rounding and clamping,
which is what lets the inference engine avoid multipliers entirely.

frac_bits is unconstrained in sign and may exceed bit_width: negative
values express coarse grids for large-magnitude tensors, large positive
values express fine grids for tiny ones.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError


def round_half_away_from_zero(x: np.ndarray) -> np.ndarray:
    """Round to the nearest integer, ties away from zero (2.5 -> 3, -2.5 -> -3).

    This is the single rounding rule used everywhere in the toolkit; the
    integer kernels implement the same rule with shifts.
    """
    x = np.asarray(x, dtype=np.float64)
    return np.trunc(x + np.copysign(0.5, x))


@dataclass(frozen=True)
class QuantParams:
    """Fixed-point format of one tensor: scale 2**-frac_bits, clamped to bit_width."""

    frac_bits: int
    bit_width: int = 8
    signed: bool = True

    def __post_init__(self) -> None:
        if isinstance(self.frac_bits, bool) or not isinstance(self.frac_bits, (int, np.integer)):
            raise InvalidInputError(f"frac_bits must be an int, got {self.frac_bits!r}")
        object.__setattr__(self, "frac_bits", int(self.frac_bits))
        if not 2 <= self.bit_width <= 16:
            raise InvalidInputError(f"bit_width must be in [2, 16], got {self.bit_width}")
        object.__setattr__(self, "bit_width", int(self.bit_width))

    @property
    def int_min(self) -> int:
        return -(1 << (self.bit_width - 1)) if self.signed else 0

    @property
    def int_max(self) -> int:
        return (1 << (self.bit_width - 1)) - 1 if self.signed else (1 << self.bit_width) - 1

    @property
    def scale(self) -> float:
        return 2.0 ** -self.frac_bits


@dataclass(frozen=True)
class QuantizedTensor:
    """Integer tensor plus the fixed-point format its values live in."""

    ints: np.ndarray
    params: QuantParams

    def __post_init__(self) -> None:
        ints = np.asarray(self.ints)
        if not np.issubdtype(ints.dtype, np.integer):
            raise InvalidInputError(f"ints must be an integer array, got dtype {ints.dtype}")
        ints = ints.astype(np.int32)
        lo, hi = self.params.int_min, self.params.int_max
        if ints.size and (ints.min() < lo or ints.max() > hi):
            bad = int(ints.min()) if ints.min() < lo else int(ints.max())
            raise InvalidInputError(
                f"integer value {bad} outside [{lo}, {hi}] for "
                f"{self.params.bit_width}-bit {'signed' if self.params.signed else 'unsigned'}"
            )
        ints.flags.writeable = False
        object.__setattr__(self, "ints", ints)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.ints.shape

    @property
    def values(self) -> np.ndarray:
        return dequantize(self)


def quantize_scalar(r: float, params: QuantParams) -> tuple[int, float]:
    """Map one real number onto the fixed-point grid.

    Returns (integer, represented value).  Rounds half away from zero and
    saturates at the integer range of ``params``.
    """
    r = float(r)
    if not math.isfinite(r):
        raise InvalidInputError(f"cannot quantize non-finite value {r!r}")
    scaled = r * 2.0 ** params.frac_bits
    lo, hi = params.int_min, params.int_max
    if scaled >= hi:
        i = hi
    elif scaled <= lo:
        i = lo
    else:
        i = int(math.trunc(scaled + math.copysign(0.5, scaled)))
        i = min(hi, max(lo, i))
    return i, i * params.scale


def quantize_tensor(t: np.ndarray, params: QuantParams) -> QuantizedTensor:
    """Elementwise quantize_scalar over an array (vectorized)."""
    t = np.asarray(t, dtype=np.float64)
    finite = np.isfinite(t)
    if not finite.all():
        idx = tuple(int(i) for i in np.argwhere(~finite)[0])
        raise InvalidInputError(f"non-finite value {t[idx]!r} at index {idx}")
    scaled = t * 2.0 ** params.frac_bits
    rounded = round_half_away_from_zero(scaled)
    ints = np.clip(rounded, params.int_min, params.int_max).astype(np.int32)
    return QuantizedTensor(ints, params)


def dequantize(q: QuantizedTensor) -> np.ndarray:
    """Represented real values, exact in float64 for every legal format."""
    return q.ints.astype(np.float64) * q.params.scale


def max_frac_window(t: np.ndarray, bit_width: int, tau: int) -> tuple[int, int]:
    """Search window for the fractional-bit grid search, as an index range.

    The upper index depends only on the largest magnitude in ``t``:
    hi = ceil(log2(max|t| + 1)) + 1, and lo = hi - tau, so the window
    always holds tau + 1 indices.  An index i maps to the candidate
    frac_bits (bit_width - 1) - i (see frac_bit_candidates); low indices
    mean fine grids, high indices coarse ones.  All-zero tensors get hi = 1.
    """
    t = np.asarray(t, dtype=np.float64)
    if t.size == 0:
        raise InvalidInputError("cannot derive a search window from an empty tensor")
    if not np.isfinite(t).all():
        raise InvalidInputError("cannot derive a search window from non-finite values")
    if tau < 0:
        raise InvalidInputError(f"tau must be >= 0, got {tau}")
    m = float(np.max(np.abs(t)))
    hi = math.ceil(math.log2(m + 1.0)) + 1
    return hi - tau, hi


def frac_bit_candidates(t: np.ndarray, bit_width: int, tau: int) -> list[int]:
    """Candidate frac_bits in search order (lowest window index first).

    The list runs from the largest frac_bits to the smallest because the
    window is iterated by ascending index; grid searches that keep the
    first strict minimum therefore prefer finer grids on ties.
    """
    lo, hi = max_frac_window(t, bit_width, tau)
    return [(bit_width - 1) - i for i in range(lo, hi + 1)]
