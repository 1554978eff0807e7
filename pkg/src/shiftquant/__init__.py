"""Power-of-two post-training quantization and integer-only inference.

Weights, biases and activations are mapped to n-bit integers with
per-tensor power-of-two scales, so inference needs nothing beyond int8
operands, int32 accumulators, bit shifts and clamps.  Shift amounts are
chosen by a windowed grid search against float reference activations;
no retraining is involved.
"""

from .calibrate import (
    CalibConfig,
    CalibrationResult,
    ModuleCalibration,
    build_quantized_model,
    calibrate_graph,
    quantize_model,
)
from .engine import ENGINES, run_float, run_quantized, run_quantized_modules
from .errors import (
    BlobFormatError,
    DanglingRefError,
    ExportVerificationError,
    GraphError,
    IntegerOverflowError,
    InvalidInputError,
    ManifestParseError,
    ModelFormatError,
    ShapeError,
    ShiftQuantError,
    UnfoldableGraphError,
    UnsupportedOpError,
    VersionError,
)
from .fixedpoint import (
    QuantParams,
    QuantizedTensor,
    dequantize,
    frac_bit_candidates,
    max_frac_window,
    quantize_scalar,
    quantize_tensor,
    round_half_away_from_zero,
)
from .graph import (
    BNParams,
    BNRefs,
    Graph,
    Model,
    Node,
    UnifiedModule,
    count_quant_ops,
    count_quant_ops_naive,
    fold_bn,
    fuse,
    infer_shapes,
    run_graph_float,
)
from .modelio import (
    QuantizedModel,
    QuantizedModuleRec,
    load_model,
    load_quantized,
    read_tensor,
    save_model,
    save_quantized,
    write_tensor,
)
from .nnops import ConvAttrs, MODULE_CASES, conv2d_float, conv2d_int, requantize

__version__ = "0.1.0"

__all__ = [
    "BNParams",
    "BNRefs",
    "BlobFormatError",
    "CalibConfig",
    "CalibrationResult",
    "ConvAttrs",
    "DanglingRefError",
    "ENGINES",
    "ExportVerificationError",
    "Graph",
    "GraphError",
    "IntegerOverflowError",
    "InvalidInputError",
    "MODULE_CASES",
    "ManifestParseError",
    "Model",
    "ModelFormatError",
    "ModuleCalibration",
    "Node",
    "QuantParams",
    "QuantizedModel",
    "QuantizedModuleRec",
    "QuantizedTensor",
    "ShapeError",
    "ShiftQuantError",
    "UnfoldableGraphError",
    "UnifiedModule",
    "UnsupportedOpError",
    "VersionError",
    "build_quantized_model",
    "calibrate_graph",
    "conv2d_float",
    "conv2d_int",
    "count_quant_ops",
    "count_quant_ops_naive",
    "dequantize",
    "fold_bn",
    "frac_bit_candidates",
    "fuse",
    "infer_shapes",
    "load_model",
    "load_quantized",
    "max_frac_window",
    "quantize_model",
    "quantize_scalar",
    "quantize_tensor",
    "read_tensor",
    "requantize",
    "round_half_away_from_zero",
    "run_float",
    "run_graph_float",
    "run_quantized",
    "run_quantized_modules",
    "save_model",
    "save_quantized",
    "write_tensor",
]
