"""Command-line driver: quantize, infer, report.

Exit codes: 0 success, 1 runtime error (bad files, overflow, shape
mismatches), 2 usage error (unknown flags, missing arguments).

Every command is deterministic given identical inputs and flags; report
output is byte-identical across runs (stable ordering, floats printed
with 9 significant digits).  SHIFTQUANT_THREADS caps calibration
parallelism.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from collections import Counter

import numpy as np

from .calibrate import CalibConfig, quantize_model
from .engine import ENGINES, run_float, run_quantized, run_quantized_modules
from .errors import InvalidInputError, ShiftQuantError
from .fixedpoint import dequantize
from .graph import Model, count_quant_ops_naive, fold_bn, run_graph_float
from .modelio import (
    QUANT_MODEL_FORMAT,
    QuantizedModel,
    load_model,
    load_quantized,
    manifest_format,
    read_tensor,
    save_quantized,
    write_tensor,
)


def _resolve_threads(flag: int | None) -> int:
    cap = os.environ.get("SHIFTQUANT_THREADS")
    cap = int(cap) if cap else None
    if cap is not None and cap < 1:
        raise InvalidInputError(f"SHIFTQUANT_THREADS must be >= 1, got {cap}")
    n = flag if flag is not None else (cap or 1)
    return min(n, cap) if cap is not None else n


def _load_input(path: str) -> np.ndarray:
    x = read_tensor(path).astype(np.float64)
    if x.ndim == 3:
        x = x[None]
    return x


def _g9(v: float) -> float:
    return float(f"{v:.9g}")


def cmd_quantize(args: argparse.Namespace) -> None:
    model = load_model(args.model, args.blobs)
    calib = tuple(_load_input(p) for p in args.calib)
    cfg = CalibConfig(
        bit_width=args.bits,
        tau=args.tau,
        calib_inputs=calib,
        threads=_resolve_threads(args.threads),
    )
    qm, res = quantize_model(model, cfg)
    save_quantized(qm, args.out)

    rows = [("module", "case", "n_in", "n_w", "n_b", "n_out", "error", "evals")]
    for e in res.modules:
        rows.append(
            (e.label, e.case, str(e.input_frac_bits), str(e.frac_w), str(e.frac_b),
             str(e.frac_out), f"{e.error:.9g}", str(e.evaluations))
        )
    widths = [max(len(r[c]) for r in rows) for c in range(len(rows[0]))]
    for r in rows:
        print("  ".join(v.ljust(w) for v, w in zip(r, widths)).rstrip())
    print(
        f"input: {res.bit_width}-bit signed, frac_bits={res.input_frac_bits} "
        f"({res.input_evaluations} evaluations)"
    )
    print(f"total evaluations: {res.total_evaluations}")
    print(f"wall time: {res.wall_time_s:.2f} s")
    print(f"wrote {args.out}")


def cmd_infer(args: argparse.Namespace) -> None:
    x = _load_input(args.input)
    if manifest_format(args.model) == QUANT_MODEL_FORMAT:
        qm = load_quantized(args.model)
        out = dequantize(run_quantized(qm, x, engine=args.engine))
    else:
        if args.engine == "int":
            raise InvalidInputError(
                "the int engine needs a quantized model; quantize first or use --engine float"
            )
        out = run_float(load_model(args.model, args.blobs), x)
    write_tensor(args.out, out.astype(np.float32))
    print(f"wrote {args.out}")


def build_report(qm: QuantizedModel, fmodel: Model, x: np.ndarray) -> dict:
    """Per-module quantization MSE, shift histogram, and the op census."""
    if qm.input_shape != fmodel.graph.input_node.shape:
        raise InvalidInputError(
            f"quantized input shape {qm.input_shape} does not match the float model "
            f"{fmodel.graph.input_node.shape}"
        )
    acts = run_graph_float(fold_bn(fmodel), x)
    outs = run_quantized_modules(qm, x, engine="int")
    modules = []
    for m, q in zip(qm.modules, outs):
        if m.label not in acts:
            raise InvalidInputError(
                f"module {m.label!r} has no counterpart in the float model"
            )
        mse = float(np.mean((acts[m.label] - dequantize(q)) ** 2))
        modules.append({"label": m.label, "case": m.case, "mse": mse})
    shifts = Counter()
    for m in qm.modules:
        shifts[m.bias_align_shift] += 1
        shifts[m.requant_shift] += 1
    return {
        "modules": modules,
        "shift_histogram": dict(sorted(shifts.items())),
        "quant_ops": {"fused": len(qm.modules), "naive": count_quant_ops_naive(fmodel.graph)},
    }


def render_report_json(rep: dict) -> str:
    doc = {
        "modules": [
            {"label": m["label"], "case": m["case"], "mse": _g9(m["mse"])}
            for m in rep["modules"]
        ],
        "shift_histogram": {str(k): v for k, v in rep["shift_histogram"].items()},
        "quant_ops": rep["quant_ops"],
    }
    return json.dumps(doc, indent=2) + "\n"


def render_report_csv(rep: dict) -> str:
    lines = ["module,case,mse"]
    lines += [f"{m['label']},{m['case']},{m['mse']:.9g}" for m in rep["modules"]]
    lines += ["", "shift,count"]
    lines += [f"{k},{v}" for k, v in rep["shift_histogram"].items()]
    lines += ["", "metric,value"]
    lines += [
        f"fused_quant_ops,{rep['quant_ops']['fused']}",
        f"naive_quant_ops,{rep['quant_ops']['naive']}",
    ]
    return "\n".join(lines) + "\n"


def cmd_report(args: argparse.Namespace) -> None:
    qm = load_quantized(args.model)
    fmodel = load_model(args.float_model, args.blobs)
    rep = build_report(qm, fmodel, _load_input(args.calib))
    text = render_report_json(rep) if args.format == "json" else render_report_csv(rep)
    if args.out:
        with open(args.out, "w") as f:
            f.write(text)
        print(f"wrote {args.out}")
    else:
        sys.stdout.write(text)


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="shiftquant",
        description="Power-of-two post-training quantization and integer inference.",
    )
    sub = p.add_subparsers(dest="command", required=True)

    q = sub.add_parser("quantize", help="calibrate a float model and write a quantized one")
    q.add_argument("--model", required=True, help="float model manifest (.json)")
    q.add_argument("--blobs", help="float weight blob (default: recorded in the manifest)")
    q.add_argument("--calib", required=True, nargs="+", help="calibration tensor blob(s)")
    q.add_argument("--bits", type=int, default=8, help="integer bit width (default 8)")
    q.add_argument("--tau", type=int, default=4, help="search window below the max (default 4)")
    q.add_argument("--threads", type=int, help="calibration threads (default 1)")
    q.add_argument("--out", required=True, help="output quantized manifest (.json)")
    q.set_defaults(func=cmd_quantize)

    i = sub.add_parser("infer", help="run a model on an input tensor blob")
    i.add_argument("--model", required=True, help="float or quantized manifest (.json)")
    i.add_argument("--blobs", help="float weight blob (float models only)")
    i.add_argument("--input", required=True, help="input tensor blob")
    i.add_argument("--out", required=True, help="output tensor blob (float32)")
    i.add_argument("--engine", choices=list(ENGINES), default="int",
                   help="quantized execution engine (default int)")
    i.set_defaults(func=cmd_infer)

    r = sub.add_parser("report", help="quantization statistics against the float model")
    r.add_argument("--model", required=True, help="quantized manifest (.json)")
    r.add_argument("--float-model", required=True, help="float model manifest (.json)")
    r.add_argument("--blobs", help="float weight blob (default: recorded in the manifest)")
    r.add_argument("--calib", required=True, help="tensor blob the MSE is measured on")
    r.add_argument("--format", choices=("csv", "json"), default="json")
    r.add_argument("--out", help="write the report here instead of stdout")
    r.set_defaults(func=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        args.func(args)
    except (ShiftQuantError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
