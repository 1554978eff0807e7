"""Convolution and elementwise kernels in two matching domains.

The float kernels (conv2d_float, run_unified_module_float) are the
reference semantics; the integer kernels (conv2d_int, requantize, ...)
compute the same results using only int32 arithmetic, shifts and clamps.
For any operands within the checked 32-bit accumulator range the two
paths agree bit for bit after output quantization; the test suite leans
on that equivalence heavily.

Unified modules come in four shapes, one output quantization each:

    a: conv                          -> signed output
    b: conv -> relu                  -> unsigned output
    c: conv -> add shortcut -> relu  -> unsigned output
    d: conv -> add shortcut          -> signed output

All array layouts are NCHW for activations and (out, in, kh, kw) for
weights.  Accumulators carry frac_bits = x.frac_bits + w.frac_bits.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import IntegerOverflowError, InvalidInputError, ShapeError
from .fixedpoint import (
    QuantParams,
    QuantizedTensor,
    dequantize,
    quantize_tensor,
    round_half_away_from_zero,
)

MODULE_CASES = ("a", "b", "c", "d")

INT32_MIN = -(1 << 31)
INT32_MAX = (1 << 31) - 1


@dataclass(frozen=True)
class ConvAttrs:
    """Static convolution attributes: square stride and zero padding."""

    stride: int = 1
    padding: int = 0

    def __post_init__(self) -> None:
        if self.stride < 1:
            raise InvalidInputError(f"stride must be >= 1, got {self.stride}")
        if self.padding < 0:
            raise InvalidInputError(f"padding must be >= 0, got {self.padding}")


@dataclass(frozen=True)
class AlignedBias:
    """Bias shifted onto the accumulator grid 2**-(x.frac_bits + w.frac_bits)."""

    ints: np.ndarray  # int32, one entry per output channel
    shift: int  # positive = left shift was applied, negative = rounding right shift


def conv_output_hw(h: int, w: int, kh: int, kw: int, attrs: ConvAttrs) -> tuple[int, int]:
    """Spatial output size of a convolution; raises if the kernel does not fit."""
    oh = (h + 2 * attrs.padding - kh) // attrs.stride + 1
    ow = (w + 2 * attrs.padding - kw) // attrs.stride + 1
    if kh > h + 2 * attrs.padding or kw > w + 2 * attrs.padding or oh < 1 or ow < 1:
        raise ShapeError(
            f"kernel {kh}x{kw} does not fit input {h}x{w} with padding {attrs.padding}"
        )
    return oh, ow


def _check_conv_shapes(x_shape, w_shape, b_len, attrs: ConvAttrs) -> tuple[int, int]:
    if len(x_shape) != 4:
        raise ShapeError(f"activations must be NCHW, got shape {tuple(x_shape)}")
    if len(w_shape) != 4:
        raise ShapeError(f"weights must be (out, in, kh, kw), got shape {tuple(w_shape)}")
    n, c, h, w = x_shape
    l, cw, kh, kw = w_shape
    if c != cw:
        raise ShapeError(f"input has {c} channels but weights expect {cw} (shapes {tuple(x_shape)} vs {tuple(w_shape)})")
    if b_len is not None and b_len != l:
        raise ShapeError(f"bias has {b_len} entries but convolution has {l} output channels")
    return conv_output_hw(h, w, kh, kw, attrs)


def _im2col(x: np.ndarray, kh: int, kw: int, attrs: ConvAttrs) -> np.ndarray:
    """(N, C, H, W) -> (N, OH, OW, C*kh*kw) patch matrix, zero padded."""
    if attrs.padding:
        p = attrs.padding
        x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))  # (N, C, OH', OW', kh, kw)
    win = win[:, :, :: attrs.stride, :: attrs.stride, :, :]
    win = win.transpose(0, 2, 3, 1, 4, 5)  # (N, OH, OW, C, kh, kw)
    n, oh, ow = win.shape[:3]
    return win.reshape(n, oh, ow, -1)


def conv2d_float(x: np.ndarray, w: np.ndarray, b: np.ndarray, attrs: ConvAttrs) -> np.ndarray:
    """Reference convolution: float64 accumulation, zero padding, square stride."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if b.ndim != 1:
        raise ShapeError(f"bias must be 1-D, got shape {b.shape}")
    _check_conv_shapes(x.shape, w.shape, b.shape[0], attrs)
    col = _im2col(x, w.shape[2], w.shape[3], attrs)
    out = col @ w.reshape(w.shape[0], -1).T + b
    return out.transpose(0, 3, 1, 2)


def _round_right_shift(v: np.ndarray, s: int) -> np.ndarray:
    """v * 2**-s for s > 0, rounding half away from zero; int64 in, int64 out."""
    if s >= 63:
        return np.zeros_like(v)
    mag = np.abs(v)
    r = (mag + (np.int64(1) << np.int64(s - 1))) >> np.int64(s)
    return np.where(v < 0, -r, r)


def _shift_left_checked(v: np.ndarray, s: int, what: str) -> np.ndarray:
    """v * 2**s for s >= 0 with the result checked against int32; int64 in/out."""
    if s > 31:
        # any nonzero value shifted this far leaves int32, and the shift
        # itself could wrap int64, so refuse before touching the bits
        if np.any(v != 0):
            raise IntegerOverflowError(f"{what}: left shift by {s} overflows int32")
        return v
    out = v << np.int64(s)
    _check_int32(out, what)
    return out


def align_bias(b: QuantizedTensor, x_frac_bits: int, w_frac_bits: int) -> AlignedBias:
    """Move a quantized bias onto the accumulator grid of a convolution.

    The shift is (x.frac_bits + w.frac_bits) - b.frac_bits.  Left shifts
    are exact; right shifts round half away from zero, dropping precision
    the accumulator cannot hold.  The result must fit int32.
    """
    if b.ints.ndim != 1:
        raise ShapeError(f"bias must be 1-D, got shape {b.shape}")
    shift = (x_frac_bits + w_frac_bits) - b.params.frac_bits
    v = b.ints.astype(np.int64)
    if shift >= 0:
        out = _shift_left_checked(v, shift, "aligned bias")
    else:
        out = _round_right_shift(v, -shift)
    return AlignedBias(out.astype(np.int32), shift)


def conv2d_int(
    x: QuantizedTensor,
    w: QuantizedTensor,
    bias: AlignedBias,
    attrs: ConvAttrs,
    label: str = "",
) -> np.ndarray:
    """Integer convolution with checked int32 accumulation.

    Products of x and w integers plus the aligned bias are summed in a
    wide intermediate; any value outside int32 raises instead of wrapping.
    The returned int32 tensor carries frac_bits x.frac + w.frac (tracked
    by the caller).
    """
    _check_conv_shapes(x.shape, w.shape, bias.ints.shape[0], attrs)
    col = _im2col(x.ints.astype(np.int64), w.shape[2], w.shape[3], attrs)
    acc = col @ w.ints.reshape(w.shape[0], -1).T.astype(np.int64)
    acc = acc + bias.ints.astype(np.int64)
    acc = acc.transpose(0, 3, 1, 2)
    _check_int32(acc, f"accumulator{' of ' + label if label else ''}")
    return acc.astype(np.int32)


def _check_int32(v: np.ndarray, what: str) -> None:
    bad = (v < INT32_MIN) | (v > INT32_MAX)
    if bad.any():
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        raise IntegerOverflowError(f"{what} overflows int32 at output index {idx}")


def requantize(acc: np.ndarray, acc_frac_bits: int, out: QuantParams) -> QuantizedTensor:
    """Shift an int32 accumulator onto the output grid and clamp.

    Equivalent to quantizing the real value acc * 2**-acc_frac_bits with
    ``out``: right shifts round half away from zero, left shifts are
    exact, then the result saturates at the output integer range.
    """
    s = acc_frac_bits - out.frac_bits
    v = np.asarray(acc, dtype=np.int64)
    if s > 0:
        shifted = _round_right_shift(v, s)
    elif -s > 31:
        big = np.int64(1) << np.int64(62)
        shifted = np.sign(v) * big
    else:
        shifted = v << np.int64(-s)
    ints = np.clip(shifted, out.int_min, out.int_max).astype(np.int32)
    return QuantizedTensor(ints, out)


def relu_int(q: QuantizedTensor) -> QuantizedTensor:
    """max(0, x) on the integer values; the format is unchanged."""
    if not q.params.signed:
        raise InvalidInputError("relu_int expects a signed input")
    return QuantizedTensor(np.maximum(q.ints, 0), q.params)


def _align_add(
    a: np.ndarray, a_frac: int, b: np.ndarray, b_frac: int, label: str = ""
) -> tuple[np.ndarray, int]:
    """Shift both int operands to the finer grid and add, all checked int32."""
    if a.shape != b.shape:
        raise ShapeError(f"residual operands differ in shape: {a.shape} vs {b.shape}")
    common = max(a_frac, b_frac)
    what = f"residual{' of ' + label if label else ''}"
    a64 = _shift_left_checked(np.asarray(a, dtype=np.int64), common - a_frac, what)
    b64 = _shift_left_checked(np.asarray(b, dtype=np.int64), common - b_frac, what)
    out = a64 + b64
    _check_int32(out, what)
    return out.astype(np.int32), common


def residual_add_int(a: QuantizedTensor, b: QuantizedTensor) -> tuple[np.ndarray, int]:
    """Add two quantized tensors exactly on their common (finer) grid.

    Returns the int32 sum and its frac_bits, max of the operand formats;
    the coarser operand is left-shifted, which is exact.
    """
    return _align_add(a.ints, a.params.frac_bits, b.ints, b.params.frac_bits)


def _check_case(case: str, out: QuantParams, shortcut) -> None:
    if case not in MODULE_CASES:
        raise InvalidInputError(f"unknown module case {case!r}")
    wants_unsigned = case in ("b", "c")
    if out.signed == wants_unsigned:
        raise InvalidInputError(
            f"case {case!r} requires {'unsigned' if wants_unsigned else 'signed'} output params"
        )
    if (case in ("c", "d")) != (shortcut is not None):
        raise InvalidInputError(f"case {case!r} and shortcut presence do not match")


def run_unified_module_int(
    case: str,
    x: QuantizedTensor,
    w: QuantizedTensor,
    b: QuantizedTensor,
    attrs: ConvAttrs,
    out: QuantParams,
    shortcut: QuantizedTensor | None = None,
    label: str = "",
) -> QuantizedTensor:
    """Integer execution of one unified module: exactly one output quantization."""
    _check_case(case, out, shortcut)
    aligned = align_bias(b, x.params.frac_bits, w.params.frac_bits)
    acc = conv2d_int(x, w, aligned, attrs, label=label)
    acc_frac = x.params.frac_bits + w.params.frac_bits
    if case in ("c", "d"):
        acc, acc_frac = _align_add(
            acc, acc_frac, shortcut.ints, shortcut.params.frac_bits, label=label
        )
    if case in ("b", "c"):
        acc = np.maximum(acc, 0)
    return requantize(acc, acc_frac, out)


def _grid_round(v: np.ndarray, frac_bits: int) -> np.ndarray:
    """Round float values onto the grid 2**-frac_bits (no range clamp)."""
    scale = 2.0 ** frac_bits
    return round_half_away_from_zero(np.asarray(v, dtype=np.float64) * scale) / scale


def unified_module_float_acc(
    case: str,
    x: QuantizedTensor,
    w: QuantizedTensor,
    b: QuantizedTensor,
    attrs: ConvAttrs,
    shortcut: QuantizedTensor | None = None,
) -> np.ndarray:
    """Float emulation of a module up to (not including) output quantization.

    Mirrors the integer path exactly: the bias is first rounded onto the
    accumulator grid the way align_bias does, so the float accumulator
    equals the int32 accumulator times 2**-(x.frac+w.frac) bit for bit.
    """
    acc_frac = x.params.frac_bits + w.params.frac_bits
    b_aligned = _grid_round(dequantize(b), acc_frac)
    acc = conv2d_float(dequantize(x), dequantize(w), b_aligned, attrs)
    if case in ("c", "d"):
        if dequantize(shortcut).shape != acc.shape:
            raise ShapeError(
                f"residual operands differ in shape: {acc.shape} vs {shortcut.shape}"
            )
        acc = acc + dequantize(shortcut)
    if case in ("b", "c"):
        acc = np.maximum(acc, 0.0)
    return acc


def run_unified_module_float(
    case: str,
    x: QuantizedTensor,
    w: QuantizedTensor,
    b: QuantizedTensor,
    attrs: ConvAttrs,
    out: QuantParams,
    shortcut: QuantizedTensor | None = None,
) -> np.ndarray:
    """Float-emulation twin of run_unified_module_int.

    Returns the quantized output values (ints * 2**-out.frac_bits); for
    operands within the integer engine's overflow limits the implied
    integers equal the integer path exactly.
    """
    _check_case(case, out, shortcut)
    acc = unified_module_float_acc(case, x, w, b, attrs, shortcut)
    return dequantize(quantize_tensor(acc, out))


def run_unified_module_ref(
    case: str,
    x: np.ndarray,
    w: np.ndarray,
    b: np.ndarray,
    attrs: ConvAttrs,
    shortcut: np.ndarray | None = None,
) -> np.ndarray:
    """Pure float module semantics with no quantization anywhere."""
    if case not in MODULE_CASES:
        raise InvalidInputError(f"unknown module case {case!r}")
    out = conv2d_float(x, w, b, attrs)
    if case in ("c", "d"):
        out = out + np.asarray(shortcut, dtype=np.float64)
    if case in ("b", "c"):
        out = np.maximum(out, 0.0)
    return out
