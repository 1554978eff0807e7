"""Random unified-module instance generator shared by several test files.

Frac bits are always drawn from the same windows the calibrator would
search, so generated instances look like real calibration outcomes.
"""

import numpy as np

from shiftquant.fixedpoint import QuantParams, frac_bit_candidates, quantize_tensor
from shiftquant.nnops import ConvAttrs, conv_output_hw, run_unified_module_ref


def random_module_instance(rng, bit_width=8, tau=4, max_hw=8, max_c=16):
    """One random module: quantized operands plus attrs and output params."""
    case = str(rng.choice(["a", "b", "c", "d"]))
    n = int(rng.integers(1, 3))
    c = int(rng.integers(1, max_c + 1))
    l = int(rng.integers(1, max_c + 1))
    h = int(rng.integers(1, max_hw + 1))
    w_sp = int(rng.integers(1, max_hw + 1))
    padding = int(rng.integers(0, 2))
    kh = int(rng.integers(1, min(3, h + 2 * padding) + 1))
    kw = int(rng.integers(1, min(3, w_sp + 2 * padding) + 1))
    stride = int(rng.integers(1, 3))
    attrs = ConvAttrs(stride=stride, padding=padding)
    oh, ow = conv_output_hw(h, w_sp, kh, kw, attrs)

    def rand_tensor(shape, scale_pow):
        scale = 2.0 ** float(rng.uniform(-scale_pow, scale_pow))
        return rng.normal(0.0, scale, size=shape)

    x = rand_tensor((n, c, h, w_sp), 3)
    w = rand_tensor((l, c, kh, kw), 3)
    b = rand_tensor((l,), 3)

    def draw_q(t, signed=True, nonneg=False):
        f = int(rng.choice(frac_bit_candidates(t, bit_width, tau)))
        if nonneg:
            t = np.abs(t)
        return quantize_tensor(t, QuantParams(f, bit_width, signed))

    x_q = draw_q(x)
    w_q = draw_q(w)
    b_q = draw_q(b)

    shortcut_q = None
    shortcut_ref = None
    if case in ("c", "d"):
        sc = rand_tensor((n, l, oh, ow), 3)
        sc_signed = bool(rng.integers(0, 2))
        shortcut_q = draw_q(sc, signed=sc_signed, nonneg=not sc_signed)
        shortcut_ref = shortcut_q.values

    ref = run_unified_module_ref(
        case, x_q.values, w_q.values, b_q.values, attrs, shortcut=shortcut_ref
    )
    out_frac = int(rng.choice(frac_bit_candidates(ref, bit_width, tau)))
    out = QuantParams(out_frac, bit_width, signed=case in ("a", "d"))

    return {
        "case": case,
        "x": x_q,
        "w": w_q,
        "b": b_q,
        "attrs": attrs,
        "out": out,
        "shortcut": shortcut_q,
    }
