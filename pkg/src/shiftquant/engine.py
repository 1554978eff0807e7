"""Model-level inference drivers.

Two engines exist for quantized models and they must agree bit for bit:

  int    pure integer execution (int8 operands, int32 accumulators,
         shifts and clamps only)
  float  emulation through dequantized operands and float64 kernels,
         quantizing once per module exactly like the integer path

Float models run through the node-by-node reference executor in graph.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError
from .fixedpoint import QuantizedTensor, quantize_tensor
from .graph import Model, run_graph_float
from .modelio import QuantizedModel
from .nnops import run_unified_module_float, run_unified_module_int

ENGINES = ("int", "float")


def _check_input(shape: tuple[int, int, int], x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4 or x.shape[1:] != shape:
        raise ShapeError(f"input must be (N, {', '.join(map(str, shape))}), got {x.shape}")
    return x


def run_quantized_modules(
    qm: QuantizedModel, x: np.ndarray, engine: str = "int"
) -> list[QuantizedTensor]:
    """Run every unified module on a float input batch; returns all outputs.

    The input is quantized once with the stored input format; every
    module consumes the quantized activations of its producers, so the
    whole pass performs exactly one activation quantization per module.
    """
    if engine not in ENGINES:
        raise ValueError(f"engine must be one of {ENGINES}, got {engine!r}")
    x = _check_input(qm.input_shape, x)
    x_q = quantize_tensor(x, qm.input_params)
    outs: list[QuantizedTensor] = []

    def activation(ref: int) -> QuantizedTensor:
        return x_q if ref == -1 else outs[ref]

    for m in qm.modules:
        shortcut = None if m.shortcut_ref is None else activation(m.shortcut_ref)
        if engine == "int":
            out = run_unified_module_int(
                m.case, activation(m.input_ref), m.weight, m.bias, m.attrs, m.out,
                shortcut=shortcut, label=m.label,
            )
        else:
            vals = run_unified_module_float(
                m.case, activation(m.input_ref), m.weight, m.bias, m.attrs, m.out,
                shortcut=shortcut,
            )
            out = quantize_tensor(vals, m.out)  # exact: vals already lie on the grid
        outs.append(out)
    return outs


def run_quantized(qm: QuantizedModel, x: np.ndarray, engine: str = "int") -> QuantizedTensor:
    """Network output of a quantized model (the last module's activation)."""
    return run_quantized_modules(qm, x, engine)[-1]


def run_float(model: Model, x: np.ndarray) -> np.ndarray:
    """Network output of a float model via the node-by-node reference path."""
    graph = model.graph
    vals = run_graph_float(model, _check_input(graph.input_node.shape, x))
    return vals[graph.output_node.id]
