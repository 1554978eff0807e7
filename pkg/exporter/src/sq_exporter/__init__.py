"""Torch checkpoint exporter for the shiftquant float-model format."""

from .blobs import read_tensor, write_float_model, write_tensor
from .errors import (
    CompletenessError,
    ExporterError,
    MissingTensorError,
    ShapeMismatchError,
    SpecFormatError,
    UnknownLayoutError,
    VerificationError,
)
from .export import (
    ExportResult,
    ExportSpec,
    SpecNode,
    TensorSource,
    collect_tensors,
    export,
    load_checkpoint,
    load_spec,
    run_torch,
    verify_export,
)

__version__ = "0.1.0"

__all__ = [
    "CompletenessError",
    "ExportResult",
    "ExportSpec",
    "ExporterError",
    "MissingTensorError",
    "ShapeMismatchError",
    "SpecFormatError",
    "SpecNode",
    "TensorSource",
    "UnknownLayoutError",
    "VerificationError",
    "collect_tensors",
    "export",
    "load_checkpoint",
    "load_spec",
    "read_tensor",
    "run_torch",
    "verify_export",
    "write_float_model",
    "write_tensor",
]
