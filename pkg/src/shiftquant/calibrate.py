"""Post-training calibration of shift amounts by windowed grid search.

Per unified module the calibrator tries every (weight, bias, output)
frac-bit triple from data-derived windows (tau + 1 candidates per
tensor, see fixedpoint.max_frac_window) and keeps the triple whose
quantized output lies closest, in L2 distance, to the float reference
output.  Updates happen only on strict improvement, so the earliest
minimizer in iteration order wins ties; iteration runs from fine grids
to coarse ones.

Calibration is layer-wise: a module sees the already-quantized
activations of its producers, computed with their chosen formats, and
its own chosen output format becomes the input format downstream.  The
float reference activations always come from the unquantized float
graph on the same calibration batch.  No weights are ever retrained.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError, ShapeError
from .fixedpoint import (
    QuantParams,
    QuantizedTensor,
    dequantize,
    frac_bit_candidates,
    quantize_tensor,
)
from .graph import Model, UnifiedModule, fold_bn, fuse, run_graph_float
from .modelio import QuantizedModel, QuantizedModuleRec
from .nnops import unified_module_float_acc


@dataclass(frozen=True)
class CalibConfig:
    """Calibration settings plus the calibration batch itself."""

    bit_width: int = 8
    tau: int = 4
    calib_inputs: tuple[np.ndarray, ...] = field(default_factory=tuple)
    threads: int = 1

    def __post_init__(self) -> None:
        if not 2 <= self.bit_width <= 16:
            raise InvalidInputError(f"bit_width must be in [2, 16], got {self.bit_width}")
        if self.tau < 0:
            raise InvalidInputError(f"tau must be >= 0, got {self.tau}")
        if self.threads < 1:
            raise InvalidInputError(f"threads must be >= 1, got {self.threads}")
        object.__setattr__(self, "calib_inputs", tuple(self.calib_inputs))


@dataclass(frozen=True)
class ModuleCalibration:
    """Chosen formats and achieved error for one unified module."""

    label: str
    case: str
    input_frac_bits: int
    frac_w: int
    frac_b: int
    frac_out: int
    error: float
    mse: float
    evaluations: int
    window_sizes: tuple[int, int, int]


@dataclass(frozen=True)
class CalibrationResult:
    bit_width: int
    tau: int
    input_frac_bits: int
    input_error: float
    input_evaluations: int
    modules: tuple[ModuleCalibration, ...]
    wall_time_s: float

    @property
    def total_evaluations(self) -> int:
        return self.input_evaluations + sum(m.evaluations for m in self.modules)


def _l2_sum(ref: np.ndarray, got: np.ndarray) -> float:
    """Sum over batch samples of the L2 distance between activations."""
    d = (ref - got).reshape(ref.shape[0], -1)
    return float(np.sqrt((d * d).sum(axis=1)).sum())


def calibrate_input(x: np.ndarray, cfg: CalibConfig) -> tuple[QuantParams, float, int]:
    """1-D windowed search for the network input's own format (signed)."""
    best: tuple[float, QuantParams] | None = None
    cands = frac_bit_candidates(x, cfg.bit_width, cfg.tau)
    for f in cands:
        p = QuantParams(f, cfg.bit_width, signed=True)
        err = _l2_sum(x, dequantize(quantize_tensor(x, p)))
        if best is None or err < best[0]:
            best = (err, p)
    return best[1], best[0], len(cands)


def calibrate_module(
    m: UnifiedModule,
    tensors: dict[str, np.ndarray],
    x_q: QuantizedTensor,
    o_ref: np.ndarray,
    cfg: CalibConfig,
    shortcut_q: QuantizedTensor | None = None,
) -> tuple[ModuleCalibration, QuantizedTensor]:
    """Exhaustive triple grid search for one module.

    Returns the calibration entry and the module's quantized output under
    the chosen formats (the activation that propagates downstream).  The
    shortcut operand, when present, keeps its upstream format untouched.
    """
    w = np.asarray(tensors[m.weight], dtype=np.float64)
    b = (
        np.asarray(tensors[m.bias], dtype=np.float64)
        if m.bias is not None
        else np.zeros(w.shape[0])
    )
    signed_out = m.case in ("a", "d")
    w_cands = frac_bit_candidates(w, cfg.bit_width, cfg.tau)
    b_cands = frac_bit_candidates(b, cfg.bit_width, cfg.tau)
    o_cands = frac_bit_candidates(o_ref, cfg.bit_width, cfg.tau)

    def eval_weight_slice(iw: int) -> list[tuple[int, float]]:
        w_q = quantize_tensor(w, QuantParams(w_cands[iw], cfg.bit_width, signed=True))
        scored = []
        for ib, fb in enumerate(b_cands):
            b_q = quantize_tensor(b, QuantParams(fb, cfg.bit_width, signed=True))
            acc = unified_module_float_acc(m.case, x_q, w_q, b_q, m.attrs, shortcut_q)
            for io, fo in enumerate(o_cands):
                out_p = QuantParams(fo, cfg.bit_width, signed=signed_out)
                got = dequantize(quantize_tensor(acc, out_p))
                idx = (iw * len(b_cands) + ib) * len(o_cands) + io
                scored.append((idx, _l2_sum(o_ref, got)))
        return scored

    if cfg.threads > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            slices = list(pool.map(eval_weight_slice, range(len(w_cands))))
    else:
        slices = [eval_weight_slice(iw) for iw in range(len(w_cands))]
    scored = [t for s in slices for t in s]
    # strict-improvement semantics: the smallest index among minimal errors
    best_idx, best_err = min(scored, key=lambda t: (t[1], t[0]))

    io = best_idx % len(o_cands)
    ib = (best_idx // len(o_cands)) % len(b_cands)
    iw = best_idx // (len(o_cands) * len(b_cands))
    w_q = quantize_tensor(w, QuantParams(w_cands[iw], cfg.bit_width, signed=True))
    b_q = quantize_tensor(b, QuantParams(b_cands[ib], cfg.bit_width, signed=True))
    out_p = QuantParams(o_cands[io], cfg.bit_width, signed=signed_out)
    acc = unified_module_float_acc(m.case, x_q, w_q, b_q, m.attrs, shortcut_q)
    out_q = quantize_tensor(acc, out_p)

    entry = ModuleCalibration(
        label=m.output_id,
        case=m.case,
        input_frac_bits=x_q.params.frac_bits,
        frac_w=w_cands[iw],
        frac_b=b_cands[ib],
        frac_out=o_cands[io],
        error=best_err,
        mse=float(np.mean((o_ref - dequantize(out_q)) ** 2)),
        evaluations=len(scored),
        window_sizes=(len(w_cands), len(b_cands), len(o_cands)),
    )
    return entry, out_q


def _stack_calib(model: Model, cfg: CalibConfig) -> np.ndarray:
    if not cfg.calib_inputs:
        raise InvalidInputError("calibration requires at least one input batch")
    shape = model.graph.input_node.shape
    batches = []
    for t in cfg.calib_inputs:
        t = np.asarray(t, dtype=np.float64)
        if t.ndim == 3:
            t = t[None]
        if t.ndim != 4 or t.shape[1:] != shape:
            raise ShapeError(
                f"calibration input shape {t.shape} does not match model input {shape}"
            )
        batches.append(t)
    return np.concatenate(batches, axis=0)


def calibrate_graph(
    model: Model, modules: tuple[UnifiedModule, ...], cfg: CalibConfig
) -> CalibrationResult:
    """Calibrate every module of a folded, fused model in topological order."""
    if not modules:
        raise InvalidInputError("model has no unified modules to calibrate")
    t0 = time.perf_counter()
    x = _stack_calib(model, cfg)
    float_acts = run_graph_float(model, x)
    in_params, in_err, in_evals = calibrate_input(x, cfg)
    qacts: dict[str, QuantizedTensor] = {
        model.graph.input_node.id: quantize_tensor(x, in_params)
    }
    entries: list[ModuleCalibration] = []
    for m in modules:
        shortcut_q = qacts[m.shortcut_ref] if m.shortcut_ref is not None else None
        entry, out_q = calibrate_module(
            m, model.tensors, qacts[m.input_ref], float_acts[m.output_id], cfg,
            shortcut_q=shortcut_q,
        )
        entries.append(entry)
        qacts[m.output_id] = out_q
    return CalibrationResult(
        bit_width=cfg.bit_width,
        tau=cfg.tau,
        input_frac_bits=in_params.frac_bits,
        input_error=in_err,
        input_evaluations=in_evals,
        modules=tuple(entries),
        wall_time_s=time.perf_counter() - t0,
    )


def build_quantized_model(
    model: Model,
    modules: tuple[UnifiedModule, ...],
    result: CalibrationResult,
    cfg: CalibConfig,
) -> QuantizedModel:
    """Freeze a calibration result into a self-contained quantized model."""
    input_id = model.graph.input_node.id
    index_of = {input_id: -1}
    for i, m in enumerate(modules):
        index_of[m.output_id] = i

    def out_frac(ref: int) -> int:
        return result.input_frac_bits if ref == -1 else result.modules[ref].frac_out

    recs = []
    for m, e in zip(modules, result.modules):
        w = np.asarray(model.tensors[m.weight], dtype=np.float64)
        b = (
            np.asarray(model.tensors[m.bias], dtype=np.float64)
            if m.bias is not None
            else np.zeros(w.shape[0])
        )
        w_q = quantize_tensor(w, QuantParams(e.frac_w, cfg.bit_width, signed=True))
        b_q = quantize_tensor(b, QuantParams(e.frac_b, cfg.bit_width, signed=True))
        input_ref = index_of[m.input_ref]
        shortcut_ref = None if m.shortcut_ref is None else index_of[m.shortcut_ref]
        acc_frac = e.input_frac_bits + e.frac_w
        common = acc_frac
        if shortcut_ref is not None:
            common = max(acc_frac, out_frac(shortcut_ref))
        recs.append(
            QuantizedModuleRec(
                label=m.output_id,
                case=m.case,
                attrs=m.attrs,
                input_ref=input_ref,
                shortcut_ref=shortcut_ref,
                weight=w_q,
                bias=b_q,
                out=QuantParams(e.frac_out, cfg.bit_width, signed=m.case in ("a", "d")),
                input_frac_bits=e.input_frac_bits,
                bias_align_shift=acc_frac - e.frac_b,
                requant_shift=common - e.frac_out,
            )
        )
    return QuantizedModel(
        bit_width=cfg.bit_width,
        input_shape=model.graph.input_node.shape,
        input_params=QuantParams(result.input_frac_bits, cfg.bit_width, signed=True),
        modules=tuple(recs),
    )


def quantize_model(model: Model, cfg: CalibConfig) -> tuple[QuantizedModel, CalibrationResult]:
    """Full pipeline: fold batch norms, fuse, calibrate, freeze."""
    folded = fold_bn(model)
    modules = fuse(folded.graph)
    result = calibrate_graph(folded, modules, cfg)
    return build_quantized_model(folded, modules, result, cfg), result
